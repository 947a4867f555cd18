"""End-to-end acceptance checks on a full default run.

The full run is slow (hours on one core). Point ``ELA_ACCEPT_RUN`` at an
existing run directory to reuse it; otherwise ``runs/acceptance`` is used
and created with ``ela run`` when it has no report yet. Each criterion
prints one PASS/FAIL line.
"""
import filecmp
import os
import subprocess
import sys

import numpy as np
import pytest

from elasim import cli, selftest, storage
from elasim.config import load_config

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
RUN = os.environ.get("ELA_ACCEPT_RUN", os.path.join(ROOT, "runs", "acceptance"))

MIN_CLASSES_MIOU = 4
MIOU_FLOOR = 0.90
PTN_SECONDS = 600.0
RANDOM_GAP = 0.20
MIN_GAP_CLASSES = 2
MEDIAN_MS, P95_MS = 50.0, 150.0
EPOCHS = 100
MIN_REACHABLE = 20
ACCURACY_FLOOR = 0.98
CLEAN_ASR_CEIL = 0.02

pytestmark = pytest.mark.acceptance


def verdict(capsys, n, title, ok, detail):
    with capsys.disabled():
        print(f"\ncriterion {n} {'PASS' if ok else 'FAIL'}: {title} | {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def run_dir():
    if not os.path.exists(os.path.join(RUN, "report", "summary.txt")):
        assert cli.main(["run", "--out", RUN]) == 0
    return RUN


@pytest.fixture(scope="module")
def cfg(run_dir):
    return load_config(os.path.join(run_dir, "config.txt"))


def _summary(run_dir, label, method):
    return storage.read_json(os.path.join(run_dir, "attack", label, method, "summary.json"))


def _victim_asr(run_dir, label, method):
    s = _summary(run_dir, label, method)
    return [s["asr"][v] for v in s["victims"]]


def _fmt(xs):
    return "/".join(f"{x:.2f}" for x in xs)


def test_criterion_1_perception_quality(run_dir, cfg, capsys):
    parts, good, slow = [], 0, []
    for label in cfg["attack.classes"]:
        header, rows = storage.read_csv(os.path.join(run_dir, "ptn", f"{label}.csv"))
        miou = float(np.mean([float(r[header.index("iou")]) for r in rows]))
        secs = storage.read_json(os.path.join(run_dir, "ptn", f"{label}.timing.json"))["train_seconds"]
        good += miou >= MIOU_FLOOR
        if secs >= PTN_SECONDS:
            slow.append(label)
        parts.append(f"{label} {miou:.4f} ({secs:.0f} s)")
    ok = good >= MIN_CLASSES_MIOU and good == len(cfg["attack.classes"]) and not slow
    verdict(capsys, 1, f"held-out mIOU >= {MIOU_FLOOR} on >= {MIN_CLASSES_MIOU} classes, training < 10 min", ok, ", ".join(parts))


def test_criterion_2_agent_beats_random(run_dir, cfg, capsys):
    parts, wins = [], 0
    for label in cfg["attack.classes"]:
        a = _victim_asr(run_dir, label, "agent")
        r = _victim_asr(run_dir, label, "random")
        won = all(x - y >= RANDOM_GAP for x, y in zip(a, r))
        wins += won
        parts.append(f"{label} agent {_fmt(a)} random {_fmt(r)}{' *' if won else ''}")
    verdict(capsys, 2, f"agent beats random by >= 20 pts on every victim for >= {MIN_GAP_CLASSES} classes", wins >= MIN_GAP_CLASSES, "; ".join(parts))


def test_criterion_3_agent_beats_static_eot(run_dir, cfg, capsys):
    parts, ok = [], True
    for label in cfg["attack.classes"]:
        a = _victim_asr(run_dir, label, "agent")
        e = _victim_asr(run_dir, label, "static-eot")
        ok &= all(x > y for x, y in zip(a, e))
        parts.append(f"{label} agent {_fmt(a)} eot {_fmt(e)}")
    verdict(capsys, 3, "agent ASR strictly above static EOT on every test route and victim", ok, "; ".join(parts))


def test_criterion_4_latency(run_dir, cfg, capsys):
    parts, ok = [], True
    for label in cfg["attack.classes"]:
        header, rows = storage.read_csv(os.path.join(run_dir, "attack", label, "agent", "latency.csv"))
        ms = np.array([float(r[header.index("ms")]) for r in rows])
        med, p95 = float(np.median(ms)), float(np.percentile(ms, 95))
        ok &= med < MEDIAN_MS and p95 < P95_MS
        parts.append(f"{label} median {med:.1f} p95 {p95:.1f} ms")
    verdict(capsys, 4, "per-frame median < 50 ms and p95 < 150 ms", ok, "; ".join(parts))


def test_criterion_5_convergence(run_dir, cfg, capsys):
    n_max = cfg["agent.n_max"]
    parts, ok = [], True
    for label in cfg["attack.classes"]:
        header, rows = storage.read_csv(os.path.join(run_dir, "agent", f"{label}.csv"))
        steps = np.array([float(r[header.index("mean_steps")]) for r in rows])
        rew = np.array([float(r[header.index("mean_reward")]) for r in rows])
        good = len(rows) == EPOCHS and steps[-10:].mean() <= 0.5 * n_max and rew[-10:].mean() > rew[:10].mean()
        ok &= bool(good)
        parts.append(f"{label} steps {steps[-10:].mean():.2f}/{n_max} reward {rew[:10].mean():.2f}->{rew[-10:].mean():.2f}")
    verdict(capsys, 5, f"{EPOCHS} epochs, last-10 steps <= N_max/2, last-10 reward above first-10", ok, "; ".join(parts))


def test_criterion_6_oracle_reachability(run_dir, cfg, capsys):
    reachable, won = 0, 0
    for label in cfg["attack.classes"]:
        header, rows = storage.read_csv(os.path.join(run_dir, "oracle", f"{label}.csv"))
        ids = {r[0] for r in rows if r[header.index("exists")] == "1"}
        th, tb = storage.read_csv(os.path.join(run_dir, "attack", label, "agent", "trace.csv"))
        won += sum(1 for r in tb if r[0] in ids and r[th.index("success")] == "1")
        reachable += len(ids)
    ok = reachable >= MIN_REACHABLE and won >= 0.5 * reachable
    verdict(capsys, 6, "agent succeeds on >= 50% of >= 20 grid-reachable frames", ok, f"{won}/{reachable} reachable frames won")


NUMERIC_TESTS = [
    "tests/test_nn.py::test_seed42_two_layer_finite_differences",
    "tests/test_nn.py::test_input_gradient_finite_differences",
    "tests/test_nn.py::test_xent_gradient_finite_differences",
    "tests/test_agent.py::test_ppo_gradients_match_finite_differences",
    "tests/test_percept.py::test_mask_loss_gradient_matches_finite_differences",
    "tests/test_agent.py::test_gae_matches_double_loop_exactly",
    "tests/test_agent.py::test_ratio_is_one_at_old_parameters",
    "tests/test_percept.py::test_mask_symmetries_bit_exact",
    "tests/test_agent.py::test_appearance_reward_examples_bit_exact",
]


def test_criterion_7_numerical_suite(capsys):
    logs = []
    st_ok = selftest.run(log=logs.append)
    proc = subprocess.run(
        [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *NUMERIC_TESTS],
        cwd=ROOT,
        capture_output=True,
        text=True,
    )
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
    ok = st_ok and proc.returncode == 0
    verdict(capsys, 7, "gradient, GAE, PPO ratio, mask symmetry and reward arithmetic checks", ok, f"selftest: {logs[-1]}; unit checks: {tail}")


DETERMINISM_CONFIG = """\
seed = 7
attack.classes = 90, STOP
baseline.queries = 20
baseline.grid = 8, 4, 6
oracle.grid = 12, 6, 8
oracle.stride = 10
[scene]
classes = 30, 90, STOP
routes = 4
frames = 24
[classifier]
surrogate_widths = 24, 16, 32
victim_widths = 40, 28
epochs = 4
min_accuracy = 0.0
[ptn]
epochs = 20
[agent]
epochs = 3
segments_per_epoch = 4
"""


def _volatile(name):
    # wall-clock measurements are the only files allowed to differ
    return name.startswith("latency.") or name.endswith(".timing.json")


def _tree(root):
    files = []
    for d, _, names in os.walk(root):
        files += [os.path.relpath(os.path.join(d, n), root) for n in names if not _volatile(n)]
    return sorted(files)


def test_criterion_8_determinism(tmp_path, capsys):
    cfg_path = tmp_path / "det.txt"
    cfg_path.write_text(DETERMINISM_CONFIG)
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert cli.main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    ta, tb = _tree(outs[0]), _tree(outs[1])
    differ = [f for f in ta if not filecmp.cmp(outs[0] / f, outs[1] / f, shallow=False)] if ta == tb else ["file lists"]
    ok = ta == tb and not differ
    detail = f"{len(ta)} files compared, {len(differ)} differ" + (f": {differ[:5]}" if differ else "")
    verdict(capsys, 8, "two seeded pipeline runs are byte-identical (latency files excluded)", ok, detail)


def test_criterion_9_clean_sanity(run_dir, cfg, capsys):
    header, rows = storage.read_csv(os.path.join(run_dir, "models", "classifiers.csv"))
    accs = {r[0]: float(r[header.index("overall")]) for r in rows}
    clean = {label: _victim_asr(run_dir, label, "clean") for label in cfg["attack.classes"]}
    ok = all(a >= ACCURACY_FLOOR for a in accs.values()) and all(x <= CLEAN_ASR_CEIL for xs in clean.values() for x in xs)
    detail = "accuracy " + ", ".join(f"{k} {v:.4f}" for k, v in accs.items())
    detail += "; clean ASR " + ", ".join(f"{k} {_fmt(v)}" for k, v in clean.items())
    verdict(capsys, 9, "classifiers >= 0.98 clean accuracy, clean-frame ASR <= 2%", ok, detail)

