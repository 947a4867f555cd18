import math
import time

import numpy as np
import pytest

from elasim import agent, attack, classify, laser, percept, scene, seeding, storage
from elasim.textures import SIGN_CLASSES

LABEL = "90"
LI = SIGN_CLASSES.index(LABEL)


def _fixed_model(label, seed, width, role="surrogate"):
    """A classifier that always answers ``label``."""
    m = classify.create_classifier(width, seed, role)
    last = m.net.layers[-1]
    last.weight[...] = 0.0
    last.bias[...] = 0.0
    last.bias[label] = 30.0
    return m


def _constant_policy(params):
    """A policy whose mean action decodes to ``params`` for every state."""
    pol = agent.create_policy(0)
    head = pol.net.layers[-1]
    head.weight[...] = 0.0
    u = np.array(
        [
            params.phi / math.pi,
            (params.omega - laser.OMEGA_MIN) / (laser.OMEGA_MAX - laser.OMEGA_MIN),
            (params.wavelength - laser.LAMBDA_MIN) / (laser.LAMBDA_MAX - laser.LAMBDA_MIN),
        ]
    )
    head.bias[...] = np.arctanh(2.0 * u - 1.0)
    return pol


@pytest.fixture(scope="module")
def setup(sign_data):
    cfg = classify.ClassifierConfig(epochs=15, min_accuracy=0.0)
    train = sign_data["train"]
    sur = [classify.train_classifier(*train, w, s, "surrogate", cfg) for w, s in ((48, 1), (32, 2), (64, 3))]
    vic = [classify.train_classifier(*train, w, s, "victim", cfg) for w, s in ((40, 4), (56, 5))]
    ds = sign_data["datasets"][LABEL]
    ptn = percept.ptn_train(ds.train, percept.PTNConfig(), seed=2).model
    return {"ds": ds, "sur": sur, "vic": vic, "ptn": ptn, "test": ds.test}


def _reset(models):
    for m in models:
        m.calls = 0


# the agent loop


def test_early_exit_when_first_step_fools_everyone(setup):
    f = setup["test"][5]
    wrong = [_fixed_model(k, s, 8) for k, s in ((0, 1), (2, 2), (3, 3))]
    pol = agent.create_policy(1)
    prev = laser.LaserParams(0.5, 4.0, 500.0)
    _, row = attack.attack_frame(f, setup["ptn"], pol, wrong, setup["vic"], prev_params=prev)
    assert row.steps == 1 and row.success and len(row.step_ms) == 1


def test_unfoolable_surrogates_use_every_step(setup):
    f = setup["test"][5]
    right = [_fixed_model(LI, s, 8) for s in (1, 2, 3)]
    cfg = attack.AttackConfig(n_max=7)
    _, row = attack.attack_frame(f, setup["ptn"], agent.create_policy(1), right, setup["vic"], cfg, prev_params=laser.LaserParams(0.5, 4.0, 500.0))
    assert row.steps == 7 and not row.success


def test_injected_grid_triple_reproduces_grid_result(setup):
    frame = setup["test"][10]
    geom = percept.ptn_forward(setup["ptn"], frame.observation)
    target = attack.make_target(frame, geom, LI)
    P, O, L = attack.grid_triples((12, 6, 8))
    # keep interior triples so the inverse squash stays finite
    inner = (P > 0) & (O > laser.OMEGA_MIN) & (O < laser.OMEGA_MAX) & (L > laser.LAMBDA_MIN) & (L < laser.LAMBDA_MAX)
    P, O, L = P[inner], O[inner], L[inner]
    probs, _, ok = attack.score_params(target, setup["sur"], P, O, L, laser.DEFAULT_BETA)
    k = int(np.flatnonzero(ok)[0]) if ok.any() else int(np.argmin(probs.mean(axis=1)))
    grid_params = laser.LaserParams(float(P[k]), float(O[k]), float(L[k]))
    pol = _constant_policy(grid_params)
    cfg = attack.AttackConfig(n_max=1)
    adv, row = attack.attack_frame(frame, setup["ptn"], pol, setup["sur"], setup["vic"], cfg, prev_params=grid_params)
    p = row.params
    assert (p.phi, p.omega, p.wavelength) == pytest.approx((grid_params.phi, grid_params.omega, grid_params.wavelength), abs=1e-9)
    _, _, again = attack.score_params(target, setup["sur"], [p.phi], [p.omega], [p.wavelength], laser.DEFAULT_BETA)
    assert row.success == bool(again[0]) == bool(ok[k])
    full = scene.quantize(laser.composite(frame.image, frame.mask, p, target.anchor, laser.DEFAULT_BETA))
    assert np.array_equal(adv, full)


def test_window_composite_matches_full_frame(setup):
    frame = setup["test"][3]
    target = attack.make_target(frame, frame.geometry, LI)
    x0, y0, x1, y1 = target.window
    for params in [laser.LaserParams(0.3, 6.0, 520.0), laser.LaserParams(2.9, 12.0, 680.0), laser.LaserParams(math.pi / 2, 1.0, 400.0)]:
        win = attack.composite_window(target, [params.phi], [params.omega], [params.wavelength])[0]
        full = scene.quantize(laser.composite(frame.image, frame.mask, params, target.anchor))
        assert np.array_equal(win, full[y0:y1, x0:x1])
        crop_fast = attack.surrogate_features(target, win[None])[0]
        crop_full = classify.to_features(classify.crop_sign(full, frame.geometry))
        assert np.allclose(crop_fast, crop_full, atol=1e-5)


def test_victims_are_queried_once_per_frame(setup):
    frames = setup["test"][:8]
    _reset(setup["vic"])
    attack.attack_route(frames, setup["ptn"], agent.create_policy(3), setup["sur"], setup["vic"], seed=1, keep_frames=False)
    assert [v.calls for v in setup["vic"]] == [len(frames)] * 2
    _reset(setup["vic"])
    attack.baseline_random_search(frames, setup["ptn"], setup["sur"], setup["vic"], 20, seed=1)
    assert [v.calls for v in setup["vic"]] == [len(frames)] * 2


def test_parameters_carry_over_between_frames(setup, monkeypatch):
    starts, first_states = [], []
    real_frame, real_state = attack.attack_frame, agent.make_state

    def frame_spy(frame, *args, **kw):
        starts.append(args[5])
        first_states.append(None)
        return real_frame(frame, *args, **kw)

    def state_spy(geom, params, width, height):
        if first_states[-1] is None:
            first_states[-1] = params
        return real_state(geom, params, width, height)

    monkeypatch.setattr(attack, "attack_frame", frame_spy)
    monkeypatch.setattr(agent, "make_state", state_spy)
    frames = setup["test"][:6]
    right = [_fixed_model(LI, s, 8) for s in (1, 2, 3)]
    cfg = attack.AttackConfig(n_max=3)
    trace, _ = attack.attack_route(frames, setup["ptn"], agent.create_policy(4), right, setup["vic"], cfg, seed=9)
    rng = seeding.rng(9, "attack", LABEL, frames[0].route)
    assert starts[0] is None and first_states[0] == agent.random_initial_params(rng)
    for t in range(1, len(frames)):
        assert starts[t] == trace.rows[t - 1].params
        assert first_states[t] in (None, starts[t])


def test_route_needs_five_frames(setup):
    with pytest.raises(ValueError):
        attack.attack_route(setup["test"][:4], setup["ptn"], agent.create_policy(1), setup["sur"], setup["vic"])
    with pytest.raises(ValueError):
        attack.attack_frame(setup["test"][0], setup["ptn"], agent.create_policy(1), setup["sur"], setup["vic"])


def test_trace_invariants(setup):
    trace, images = attack.attack_route(setup["test"], setup["ptn"], agent.create_policy(5), setup["sur"], setup["vic"], seed=2)
    assert len(images) == len(trace.rows) == len(setup["test"])
    assert all(1 <= r.steps <= attack.AttackConfig().n_max for r in trace.rows)
    assert np.all(trace.latencies() > 0)
    for k in range(2):
        assert trace.asr(k) == np.mean([r.victim_labels[k] != LABEL for r in trace.rows])
    header, body = trace.csv_rows()
    assert header[:8] == ["frame_id", "steps", "phi", "omega", "lambda", "success", "victim_label", "ms"]
    assert len(body) == len(trace.rows)


def test_asr_round_trips_through_saved_frames(setup, tmp_path):
    trace, images = attack.attack_route(setup["test"], setup["ptn"], agent.create_policy(6), setup["sur"], setup["vic"], seed=3)
    labels = []
    for n, (frame, img) in enumerate(zip(setup["test"], images)):
        path = tmp_path / f"{n}.ppm"
        storage.write_ppm(path, img)
        back = scene.to_float(storage.read_ppm(path))
        labels.append(tuple(v.classes[classify.victim_eval(v, back, frame.geometry, LI)[0]] for v in setup["vic"]))
    assert labels == [r.victim_labels for r in trace.rows]
    offline = [float(np.mean([lab[k] != LABEL for lab in labels])) for k in range(2)]
    assert offline == trace.asr()


# baselines


def test_single_query_search_is_the_random_baseline(setup):
    a, ia = attack.baseline_random(setup["test"], setup["ptn"], setup["sur"], setup["vic"], seed=4)
    b, ib = attack.baseline_random_search(setup["test"], setup["ptn"], setup["sur"], setup["vic"], 1, seed=4)
    key = lambda t: [(r.params, r.success, r.victim_labels) for r in t.rows]  # noqa: E731
    assert key(a) == key(b)
    assert all(np.array_equal(x, y) for x, y in zip(ia, ib))


def test_random_baseline_is_seeded(setup):
    a, _ = attack.baseline_random(setup["test"], setup["ptn"], setup["sur"], setup["vic"], seed=4)
    b, _ = attack.baseline_random(setup["test"], setup["ptn"], setup["sur"], setup["vic"], seed=4)
    c, _ = attack.baseline_random(setup["test"], setup["ptn"], setup["sur"], setup["vic"], seed=5)
    assert [r.params for r in a.rows] == [r.params for r in b.rows] != [r.params for r in c.rows]


def test_zero_intensity_reduces_to_clean(setup):
    cfg = attack.AttackConfig(beta=0.0)
    trace, images = attack.baseline_random(setup["test"], setup["ptn"], setup["sur"], setup["vic"], cfg, seed=1)
    assert all(np.array_equal(img, f.image) for img, f in zip(images, setup["test"]))
    assert max(trace.asr()) <= 0.02
    assert max(attack.clean_trace(setup["test"], setup["vic"]).asr()) <= 0.02


def test_random_search_is_monotone_in_budget(setup):
    frames = setup["test"]
    conf, asr, ms = {}, {}, {}
    for q in (1, 50, 200):
        trace, _ = attack.baseline_random_search(frames, setup["ptn"], setup["sur"], setup["vic"], q, seed=7)
        per_frame = []
        for f, r in zip(frames, trace.rows):
            tg = attack.make_target(f, percept.ptn_forward(setup["ptn"], f.observation), LI)
            probs, _, _ = attack.score_params(tg, setup["sur"], [r.params.phi], [r.params.omega], [r.params.wavelength], laser.DEFAULT_BETA)
            per_frame.append(probs.mean())
        conf[q], asr[q], ms[q] = np.array(per_frame), trace.asr(), trace.mean_latency()
    # common random numbers: a bigger budget only adds candidates
    assert np.all(conf[50] <= conf[1]) and np.all(conf[200] <= conf[50])
    for k in range(2):
        assert asr[1][k] <= asr[50][k] <= asr[200][k]
    assert ms[1] < ms[50] < ms[200]


def test_random_search_time_grows_with_budget(setup):
    frames = setup["test"][:6]
    t = {}
    for q in (100, 400):
        best = math.inf
        for _ in range(3):
            t0 = time.perf_counter()
            attack.baseline_random_search(frames, setup["ptn"], setup["sur"], setup["vic"], q, seed=1)
            best = min(best, time.perf_counter() - t0)
        t[q] = best
    # four times the queries: well above constant, at most linear plus noise
    assert 2.0 < t[400] / t[100] < 6.0


def test_static_eot_returns_the_grid_argmax(setup):
    cfg = attack.AttackConfig(grid=(12, 6, 8))
    ds = setup["ds"]
    p, obj, trace, _ = attack.baseline_static_eot(ds.train, setup["test"], setup["ptn"], setup["sur"], setup["vic"], cfg, seed=3)
    phis, omegas, lams = laser.param_grid(*cfg.grid)
    assert p.phi in phis and p.omega in omegas and p.wavelength in lams
    subset = attack.eot_subsample(ds.train, cfg.eot_fraction, 3)
    targets = [attack.make_target(f, percept.ptn_forward(setup["ptn"], f.observation), LI) for f in subset]
    targets = [tg for tg in targets if not tg.skipped]
    success, conf = attack.eot_objective(targets, setup["sur"], cfg, attack.grid_triples(cfg.grid))
    assert obj == success.max()
    best = np.flatnonzero(success == success.max())
    P, O, L = attack.grid_triples(cfg.grid)
    k = best[np.argmin(conf[best])]
    assert (p.phi, p.omega, p.wavelength) == (P[k], O[k], L[k])
    assert all(r.params == p for r in trace.rows)
    again = attack.baseline_static_eot(ds.train, setup["test"], setup["ptn"], setup["sur"], setup["vic"], cfg, seed=3)
    assert again[0] == p and [r.victim_labels for r in again[2].rows] == [r.victim_labels for r in trace.rows]


def test_eot_subsample_is_a_tenth():
    frames = list(range(80))
    sub = attack.eot_subsample(frames, 0.1, 1)
    assert len(sub) == 8 and sub == sorted(set(sub))


# brute-force oracle


def test_oracle_without_light_finds_nothing(setup):
    res = attack.oracle_grid(setup["test"][4], setup["sur"], setup["vic"], attack.AttackConfig(beta=0.0), fine=False)
    assert not res.exists and res.evaluated == 0


def test_oracle_flag_ignores_scan_order(setup):
    cfg = attack.AttackConfig(grid=(12, 6, 8))
    n = 12 * 6 * 8
    rng = np.random.default_rng(0)
    for f in setup["test"][::5]:
        base = attack.oracle_grid(f, setup["sur"], setup["vic"], cfg, fine=False)
        for _ in range(3):
            perm = attack.oracle_grid(f, setup["sur"], setup["vic"], cfg, fine=False, order=rng.permutation(n))
            assert perm.exists == base.exists


def test_oracle_success_is_real(setup):
    cfg = attack.AttackConfig(grid=(12, 6, 8))
    for f in setup["test"][::4]:
        res = attack.oracle_grid(f, setup["sur"], setup["vic"], cfg, fine=False)
        if res.exists:
            tg = attack.make_target(f, f.geometry, LI)
            p = res.params
            _, _, ok = attack.score_params(tg, setup["sur"], [p.phi], [p.omega], [p.wavelength], cfg.beta)
            assert ok[0]


def test_mistaken_label_histogram():
    row = lambda labs: attack.TraceRow("f", "90", 1, laser.LaserParams(0, 2, 500), True, labs, 1.0)  # noqa: E731
    tr = attack.AttackTrace("agent", "90", [row(("30", "90")), row(("30", "60")), row(("STOP", "90")), row(("90", "90"))], 2)
    assert attack.mistaken_labels(tr) == {"30": 2, "STOP": 1}
    assert attack.mistaken_labels(tr, 1) == {"60": 1}
    assert tr.asr() == [0.75, 0.25]
    assert math.isnan(attack.AttackTrace("agent", "90").surrogate_asr())
