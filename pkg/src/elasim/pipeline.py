"""Experiment stages. Each reads its inputs from and writes its outputs under one run directory.

Layout::

    config.txt                       canonical copy of the run configuration
    scenes/<class>/                  datasets (see storage.save_dataset)
    models/                          classifier, PTN, policy and value checkpoints
    models/classifiers.csv           per-class clean accuracy of every classifier
    ptn/<class>.csv                  per-frame IOU on the held-out routes
    agent/<class>.csv                training curves
    attack/<class>/<method>/         trace.csv, latency.csv, summary.json, frames/*.ppm
    oracle/<class>.csv               grid reachability per sampled test frame
    report/                          tables and summary text

Wall-clock measurements are confined to ``latency.csv`` / ``latency.json``
files so that everything else is byte-identical across runs with the same
configuration.
"""
from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import agent, attack, classify, laser, nn, percept, scene, seeding, storage
from .errors import ConfigError
from .textures import SIGN_CLASSES

METHODS = ("agent", "random", "random-search", "static-eot", "clean")


def workers():
    """Worker cap from ``ELA_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("ELA_THREADS", "1")))
    except ValueError:
        raise ConfigError("ELA_THREADS must be an integer") from None


def _map(fn, args):
    n = min(workers(), len(args))
    if n <= 1:
        return [fn(*a) for a in args]
    with ProcessPoolExecutor(n) as pool:
        return list(pool.map(fn, *zip(*args)))


def _say(log, msg):
    if log is not None:
        log(msg)


def write_config(cfg, out):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(cfg.dumps())


def _need(paths):
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise ConfigError("missing inputs:\n  " + "\n  ".join(missing))


# ---------------------------------------------------------------------------
# paths


def scene_dir(out, label):
    return os.path.join(out, "scenes", label)


def classifier_path(out, role, width, seed):
    return os.path.join(out, "models", f"{role}_w{width}_s{seed}.elan")


def ptn_path(out, label):
    return os.path.join(out, "models", f"ptn_{label}.elan")


def policy_paths(out, label):
    return (os.path.join(out, "models", f"policy_{label}.elan"), os.path.join(out, "models", f"value_{label}.elan"))


def method_dir(out, label, method):
    return os.path.join(out, "attack", label, method)


# ---------------------------------------------------------------------------
# scenes


def dataset_seed(cfg, label):
    return seeding.child_seed(cfg["seed"], "scene", label)


def build_dataset(cfg, label):
    style = cfg.dataset_config()
    world = scene.WorldConfig(label=label)
    seed = dataset_seed(cfg, label)
    routes = scene.default_routes(world, style.routes, style.frames, seed, style.route_kinds, style.held_out)
    return scene.generate_dataset(world, routes, seed, style.held_out, style)


def _gen_one(cfg, out, label):
    ds = build_dataset(cfg, label)
    storage.save_dataset(scene_dir(out, label), ds)
    return label, len(ds.frames)


def gen_scenes(cfg, out, log=None):
    write_config(cfg, out)
    done = _map(_gen_one, [(cfg, out, lab) for lab in cfg["scene.classes"]])
    for label, n in done:
        _say(log, f"scenes {label}: {n} frames")
    return done


_DATASETS = {}


def load_scenes(out, label):
    root = scene_dir(out, label)
    _need([os.path.join(root, "manifest.txt")])
    key = os.path.abspath(root)
    if key not in _DATASETS:
        _DATASETS[key] = storage.load_dataset(root)
    return _DATASETS[key]


# ---------------------------------------------------------------------------
# classifiers


def classifier_crops(datasets, split):
    X, y = [], []
    for ds in datasets:
        li = SIGN_CLASSES.index(ds.label)
        for f in ds.split(split):
            X.append(classify.crop_sign(f.image, f.geometry))
            y.append(li)
    return np.array(X, dtype=np.float32), np.array(y, dtype=np.int64)


def _classifier_specs(cfg):
    specs = [("surrogate", w, s) for w, s in zip(cfg["classifier.surrogate_widths"], cfg["classifier.surrogate_seeds"])]
    specs += [("victim", w, s) for w, s in zip(cfg["classifier.victim_widths"], cfg["classifier.victim_seeds"])]
    return specs


def train_classifiers(cfg, out, log=None):
    write_config(cfg, out)
    datasets = [load_scenes(out, lab) for lab in cfg["scene.classes"]]
    train = classifier_crops(datasets, "train")
    test = classifier_crops(datasets, "test")
    os.makedirs(os.path.join(out, "models"), exist_ok=True)
    models = []
    for role, width, seed in _classifier_specs(cfg):
        t0 = time.perf_counter()
        m = classify.train_classifier(*train, width, seed, role, cfg.classifier_config(), test=test)
        classify.save_classifier(classifier_path(out, role, width, seed), m)
        models.append(m)
        _say(log, f"{role} width {width} seed {seed}: held-out accuracy {m.accuracy:.4f} ({time.perf_counter() - t0:.0f} s)")
    write_bench(os.path.join(out, "models", "classifiers.csv"), models, *test)
    return models


def write_bench(path, models, crops, labels):
    """Per-class clean accuracy of each model."""
    header = ["model", "role", "width", "seed"] + list(SIGN_CLASSES) + ["overall"]
    rows = []
    for m in models:
        pred = m.predict(crops)
        accs = []
        for li in range(len(SIGN_CLASSES)):
            sel = labels == li
            accs.append(f"{np.mean(pred[sel] == li):.4f}" if sel.any() else "n/a")
        name = f"{m.role}_w{m.width}_s{m.seed}"
        rows.append([name, m.role, str(m.width), str(m.seed)] + accs + [f"{np.mean(pred == labels):.4f}"])
    storage.write_csv(path, header, rows)


def load_classifiers(cfg, out):
    paths = [classifier_path(out, r, w, s) for r, w, s in _classifier_specs(cfg)]
    _need(paths)
    models = [classify.load_classifier(p) for p in paths]
    surrogates = [m for m in models if m.role == "surrogate"]
    victims = [m for m in models if m.role == "victim"]
    classify.check_disjoint(surrogates, victims)
    return surrogates, victims


# ---------------------------------------------------------------------------
# perception


def _ptn_one(cfg, out, label):
    ds = load_scenes(out, label)
    t0 = time.perf_counter()
    res = percept.ptn_train(ds.train, cfg.ptn_config(), seeding.child_seed(cfg["seed"], "ptn", label), attacker_size=ds.world.attacker_size)
    seconds = time.perf_counter() - t0
    percept.save_ptn(ptn_path(out, label), res.model)
    miou = write_ptn_eval(os.path.join(out, "ptn", f"{label}.csv"), res.model, ds.test)
    # wall clock lives in its own file so the evaluation CSV stays byte-stable
    storage.write_json(os.path.join(out, "ptn", f"{label}.timing.json"), {"train_seconds": seconds})
    return label, miou, seconds


def write_ptn_eval(path, model, frames):
    miou, scores, geoms = percept.evaluate_miou(model, frames)
    header = ["frame_id", "iou", "xc", "yc", "a", "b", "delta", "gt_xc", "gt_yc", "gt_a", "gt_b", "gt_delta"]
    rows = [
        [f.frame_id, repr(float(s))] + [repr(float(v)) for v in g.as_array()] + [repr(float(v)) for v in f.geometry.as_array()]
        for f, s, g in zip(frames, scores, geoms)
    ]
    os.makedirs(os.path.dirname(path), exist_ok=True)
    storage.write_csv(path, header, rows)
    return miou


def train_ptns(cfg, out, log=None):
    write_config(cfg, out)
    os.makedirs(os.path.join(out, "models"), exist_ok=True)
    done = _map(_ptn_one, [(cfg, out, lab) for lab in cfg["attack.classes"]])
    for label, miou, seconds in done:
        _say(log, f"ptn {label}: held-out mIOU {miou:.4f} ({seconds:.0f} s)")
    return done


def load_ptn(out, label):
    _need([ptn_path(out, label)])
    return percept.load_ptn(ptn_path(out, label))


# ---------------------------------------------------------------------------
# agent


def route_targets(ds, ptn, split="train"):
    """FrameTargets per route, using the PTN geometry the agent sees at attack time."""
    li = SIGN_CLASSES.index(ds.label)
    routes = ds.train_routes if split == "train" else ds.test_routes
    out = []
    for r in routes:
        frames = [f for f in ds.frames if f.route == r]
        geoms = percept.ptn_predict(ptn, np.array([f.observation.as_array() for f in frames]))
        out.append([attack.make_target(f, percept._to_geometry(g, ptn.shape), li) for f, g in zip(frames, geoms)])
    return out


def _agent_one(cfg, out, label):
    ds = load_scenes(out, label)
    ptn = load_ptn(out, label)
    surrogates, _ = load_classifiers(cfg, out)
    targets = route_targets(ds, ptn)
    t0 = time.perf_counter()
    policy, curves = agent.train_agent(targets, surrogates, cfg.agent_config(), seeding.child_seed(cfg["seed"], "agent", label))
    seconds = time.perf_counter() - t0
    agent.save_policy(*policy_paths(out, label), policy, cfg.reward_config(), {"label": label})
    os.makedirs(os.path.join(out, "agent"), exist_ok=True)
    storage.write_csv(
        os.path.join(out, "agent", f"{label}.csv"),
        ["epoch", "mean_reward", "mean_steps", "train_asr"],
        [[str(e), repr(r), repr(s), repr(a)] for e, r, s, a in curves.rows()],
    )
    return label, curves, seconds


def train_agents(cfg, out, log=None):
    write_config(cfg, out)
    done = _map(_agent_one, [(cfg, out, lab) for lab in cfg["attack.classes"]])
    for label, curves, seconds in done:
        _say(
            log,
            f"agent {label}: steps {np.mean(curves.mean_steps[:10]):.2f} -> {np.mean(curves.mean_steps[-10:]):.2f}, "
            f"reward {np.mean(curves.mean_reward[:10]):.2f} -> {np.mean(curves.mean_reward[-10:]):.2f} ({seconds:.0f} s)",
        )
    return done


def load_agent(out, label):
    paths = policy_paths(out, label)
    _need(paths)
    return agent.load_policy(*paths)


# ---------------------------------------------------------------------------
# attacks and baselines


def save_trace(cfg, out, label, trace, images, victims, extra=None):
    d = method_dir(out, label, trace.method)
    fd = os.path.join(d, "frames")
    os.makedirs(fd, exist_ok=True)
    write_config(cfg, d)
    header, rows = trace.csv_rows()
    keep = [k for k, h in enumerate(header) if h != "ms"]
    storage.write_csv(os.path.join(d, "trace.csv"), [header[k] for k in keep], [[r[k] for k in keep] for r in rows])
    storage.write_csv(
        os.path.join(d, "latency.csv"),
        ["frame_id", "ms", "steps"],
        [[r.frame_id, f"{r.ms:.3f}", str(r.steps)] for r in trace.rows],
    )
    for r, img in zip(trace.rows, images):
        storage.write_ppm(os.path.join(fd, f"{r.frame_id}.ppm"), img)
    names = [f"{v.role}_w{v.width}_s{v.seed}" for v in victims]
    summary = {
        "method": trace.method,
        "label": label,
        "frames": len(trace.rows),
        "victims": names,
        "asr": {n: (trace.asr(k) if trace.rows else None) for k, n in enumerate(names)},
        "surrogate_asr": trace.surrogate_asr() if trace.rows else None,
        "mistaken_labels": {n: attack.mistaken_labels(trace, k) for k, n in enumerate(names)},
        "config_hash": cfg.hash(),
        "seed": cfg["seed"],
        "beta": cfg["attack.beta"],
        "rule": cfg["attack.rule"],
    }
    summary.update(extra or {})
    storage.write_json(os.path.join(d, "summary.json"), summary)
    lat = trace.latencies()
    storage.write_json(
        os.path.join(d, "latency.json"),
        {
            "median_ms": float(np.median(lat)) if len(lat) else None,
            "p95_ms": float(np.percentile(lat, 95)) if len(lat) else None,
            "mean_ms": float(np.mean(lat)) if len(lat) else None,
            "note": "perception + decision + composite per frame; excludes disk I/O and victim evaluation",
        },
    )


def _test_frames(ds):
    return [[f for f in ds.frames if f.route == r] for r in ds.test_routes]


def _attack_one(cfg, out, label):
    ds = load_scenes(out, label)
    ptn = load_ptn(out, label)
    policy = load_agent(out, label)
    surrogates, victims = load_classifiers(cfg, out)
    acfg = cfg.attack_config()
    seed = seeding.child_seed(cfg["seed"], "attack", label)
    trace = attack.AttackTrace("agent", label, n_victims=len(victims))
    images = []
    for frames in _test_frames(ds):
        tr, imgs = attack.attack_route(frames, ptn, policy, surrogates, victims, acfg, seed)
        trace.rows += tr.rows
        images += imgs
    save_trace(cfg, out, label, trace, images, victims)
    clean = attack.clean_trace(ds.test, victims)
    save_trace(cfg, out, label, clean, [f.image for f in ds.test], victims)
    return label, trace


def run_attack(cfg, out, log=None):
    write_config(cfg, out)
    done = _map(_attack_one, [(cfg, out, lab) for lab in cfg["attack.classes"]])
    for label, trace in done:
        _say(log, f"attack {label}: victim ASR {_fmt_list(trace.asr())}, median {np.median(trace.latencies()):.1f} ms")
    return done


def _baseline_one(cfg, out, label):
    ds = load_scenes(out, label)
    ptn = load_ptn(out, label)
    surrogates, victims = load_classifiers(cfg, out)
    acfg = cfg.attack_config()
    seed = seeding.child_seed(cfg["seed"], "baseline", label)
    test = ds.test
    rnd, imgs = attack.baseline_random(test, ptn, surrogates, victims, acfg, seed)
    save_trace(cfg, out, label, rnd, imgs, victims)
    rs, imgs = attack.baseline_random_search(test, ptn, surrogates, victims, acfg.queries, acfg, seed)
    save_trace(cfg, out, label, rs, imgs, victims, {"queries": acfg.queries})
    params, objective, eot, imgs = attack.baseline_static_eot(ds.train, test, ptn, surrogates, victims, acfg, seed)
    save_trace(
        cfg,
        out,
        label,
        eot,
        imgs,
        victims,
        {"eot_params": [params.phi, params.omega, params.wavelength], "eot_objective": objective},
    )
    return label, rnd, rs, eot


def run_baselines(cfg, out, log=None):
    write_config(cfg, out)
    done = _map(_baseline_one, [(cfg, out, lab) for lab in cfg["attack.classes"]])
    for label, rnd, rs, eot in done:
        _say(log, f"baselines {label}: random {_fmt_list(rnd.asr())}, random-search {_fmt_list(rs.asr())}, static-eot {_fmt_list(eot.asr())}")
    return done


def _fmt_list(xs):
    return "/".join("n/a" if x != x else f"{x:.2f}" for x in xs)


def _oracle_one(cfg, out, label):
    ds = load_scenes(out, label)
    surrogates, victims = load_classifiers(cfg, out)
    acfg = cfg.attack_config()
    frames = ds.test[:: cfg["oracle.stride"]]
    rows = []
    for f in frames:
        res = attack.oracle_grid(f, surrogates, victims, acfg, fine=True)
        p = res.params
        rows.append([f.frame_id, str(int(res.exists)), repr(p.phi), repr(p.omega), repr(p.wavelength), str(res.evaluated), ";".join(str(int(x)) for x in res.victim_fooled)])
    os.makedirs(os.path.join(out, "oracle"), exist_ok=True)
    storage.write_csv(
        os.path.join(out, "oracle", f"{label}.csv"),
        ["frame_id", "exists", "phi", "omega", "lambda", "evaluated", "victim_fooled"],
        rows,
    )
    return label, rows


def run_oracle(cfg, out, log=None):
    write_config(cfg, out)
    done = _map(_oracle_one, [(cfg, out, lab) for lab in cfg["attack.classes"]])
    for label, rows in done:
        _say(log, f"oracle {label}: {sum(r[1] == '1' for r in rows)}/{len(rows)} sampled frames reachable")
    return done


# ---------------------------------------------------------------------------
# offline recomputation


def recompute_asr(cfg, out, label, method):
    """Victim ASR from the saved adversarial frames and the dataset's GT geometry."""
    d = method_dir(out, label, method)
    _need([os.path.join(d, "trace.csv")])
    _, victims = load_classifiers(cfg, out)
    ds = load_scenes(out, label)
    by_id = {f.frame_id: f for f in ds.frames}
    header, rows = storage.read_csv(os.path.join(d, "trace.csv"))
    li = SIGN_CLASSES.index(label)
    fooled = np.zeros((len(rows), len(victims)), dtype=bool)
    for k, row in enumerate(rows):
        fid = row[header.index("frame_id")]
        img = scene.to_float(storage.read_ppm(os.path.join(d, "frames", f"{fid}.ppm")))
        for v, model in enumerate(victims):
            fooled[k, v] = classify.victim_eval(model, img, by_id[fid].geometry, li)[1]
    return [float(x) for x in fooled.mean(axis=0)] if len(rows) else [float("nan")] * len(victims)


def trace_asr(out, label, method):
    """Victim ASR recomputed from the labels stored in a trace CSV."""
    header, rows = storage.read_csv(os.path.join(method_dir(out, label, method), "trace.csv"))
    if not rows:
        return []
    labels = [r[header.index("victim_label")].split(";") for r in rows]
    return [float(np.mean([lab[v] != label for lab in labels])) for v in range(len(labels[0]))]


# ---------------------------------------------------------------------------
# whole run


def run_all(cfg, out, log=None):
    from . import report

    stages = [
        ("scenes", gen_scenes),
        ("classifiers", train_classifiers),
        ("ptn", train_ptns),
        ("agent", train_agents),
        ("attack", run_attack),
        ("baseline", run_baselines),
        ("oracle", run_oracle),
        ("report", report.write_report),
    ]
    timings = {}
    for name, fn in stages:
        if not cfg[f"stages.{name}"]:
            continue
        t0 = time.perf_counter()
        fn(cfg, out, log=log)
        timings[name] = time.perf_counter() - t0
        _say(log, f"stage {name}: {timings[name]:.0f} s")
    return timings


def laser_preview(image, mask, params, anchor, beta=laser.DEFAULT_BETA):
    """(after image, coverage map) for a single beam."""
    H, W = mask.shape
    cov = laser.rasterize_beam(params, anchor, W, H)
    return scene.quantize(laser.composite(image, mask, params, anchor, beta, cov)), cov


def describe(path):
    return nn.describe(path)
