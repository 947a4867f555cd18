import os

import numpy as np
import pytest

from elasim import attack, cli, config, pipeline, report, scene, selftest, storage
from elasim.errors import ConfigError

TINY = """\
# a run small enough for unit tests
seed = 3
attack.classes = 90
baseline.queries = 5
baseline.grid = 4, 3, 3
oracle.grid = 4, 3, 3
oracle.stride = 4

[scene]
classes = 30, 90
routes = 3
frames = 12

[classifier]
surrogate_widths = 16, 12, 20
victim_widths = 24, 28
epochs = 3
min_accuracy = 0.0

[ptn]
epochs = 5

[agent]
epochs = 2
segments_per_epoch = 2
"""


def _files(root):
    out = {}
    for d, _, names in os.walk(root):
        for n in names:
            p = os.path.join(d, n)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg_path = root / "tiny.cfg"
    cfg_path.write_text(TINY)
    out = root / "run"
    assert cli.main(["run", "--config", str(cfg_path), "--out", str(out)]) == 0
    return cfg_path, out


# configuration


def test_defaults_cover_every_key():
    cfg = config.RunConfig()
    assert cfg["seed"] == 1 and cfg["ppo.clip"] == 0.2 and cfg["scene.classes"][-1] == "STOP"
    assert cfg.ptn_config().jitter == cfg["ptn.jitter"]
    assert cfg.agent_config().reward.r_success == 10.0


def test_grammar(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 9  # trailing comment\n\n[ppo]\nlr = 0.001\n[reward]\nc = 1, 2, 3\n")
    cfg = config.load_config(str(p), ["scene.frames=40", "stages.oracle=false"])
    assert cfg["seed"] == 9 and cfg["ppo.lr"] == 0.001 and cfg["reward.c"] == [1.0, 2.0, 3.0]
    assert cfg["scene.frames"] == 40 and cfg["stages.oracle"] is False
    # inside a section a dotted key still gets the section prefix
    cfg = config.RunConfig()
    with pytest.raises(ConfigError):
        cfg.update_lines(["[ppo]", "stages.oracle = false"])
    with pytest.raises(ConfigError):
        config.load_config(str(tmp_path / "absent.cfg"))


@pytest.mark.parametrize(
    "lines",
    [["nonsense.key = 1"], ["seed = one"], ["just words"], ["stages.report = maybe"], ["attack.rule = SOME"], ["classifier.victim_widths = 256, 224"]],
)
def test_bad_config_rejected(lines):
    cfg = config.RunConfig()
    with pytest.raises(ConfigError):
        cfg.update_lines(lines)
        cfg.validate()


def test_hash_ignores_key_order():
    a = config.RunConfig()
    a.update_lines(["seed = 5", "[ppo]", "lr = 0.001", "[scene]", "frames = 50"])
    b = config.RunConfig()
    b.update_lines(["scene.frames = 50", "ppo.lr = 0.001", "seed = 5"])
    assert a.hash() == b.hash() and a.dumps() == b.dumps()
    b.set("seed", "6")
    assert a.hash() != b.hash()


def test_dump_round_trip():
    a = config.RunConfig()
    a.update_lines(["seed = 7", "reward.alpha = 0.125", "scene.classes = 30, STOP"])
    b = config.RunConfig()
    b.update_lines(a.dumps().splitlines())
    assert a.values == b.values


def test_worker_cap(monkeypatch):
    monkeypatch.setenv("ELA_THREADS", "3")
    assert pipeline.workers() == 3
    monkeypatch.setenv("ELA_THREADS", "many")
    with pytest.raises(ConfigError):
        pipeline.workers()


# storage


def test_image_round_trips(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 9, 3)).astype(np.uint8)
    storage.write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(storage.read_ppm(tmp_path / "a.ppm"), img)
    storage.write_pgm(tmp_path / "a.pgm", img[..., 0])
    assert np.array_equal(storage.read_pgm(tmp_path / "a.pgm"), img[..., 0])
    f = scene.to_float(img)
    storage.write_ppm(tmp_path / "b.ppm", f)
    assert np.array_equal(storage.read_ppm(tmp_path / "b.ppm"), img)
    with pytest.raises(ValueError):
        storage.read_pgm(tmp_path / "a.ppm")


def test_text_round_trips(tmp_path):
    storage.write_kv(tmp_path / "k.txt", [("x", 0.1), ("v", np.array([1.5, -2.0])), ("flag", True)])
    kv = storage.read_kv(tmp_path / "k.txt")
    assert float(kv["x"]) == 0.1 and storage.floats(kv["v"]) == [1.5, -2.0] and kv["flag"] == "true"
    storage.write_csv(tmp_path / "t.csv", ["a", "b"], [["1", "x,y"], ["2", ""]])
    assert storage.read_csv(tmp_path / "t.csv") == (["a", "b"], [["1", "x,y"], ["2", ""]])
    storage.write_json(tmp_path / "j.json", {"b": 1, "a": [0.5, None]})
    assert storage.read_json(tmp_path / "j.json") == {"a": [0.5, None], "b": 1}
    assert (tmp_path / "j.json").read_text().index('"a"') < (tmp_path / "j.json").read_text().index('"b"')


def test_dataset_round_trip(tmp_path):
    world = scene.WorldConfig(label="60")
    ds = scene.generate_dataset(world, scene.default_routes(world, 2, 6, 4), 4)
    storage.save_dataset(tmp_path / "ds", ds)
    back = storage.load_dataset(tmp_path / "ds")
    assert back.train_routes == ds.train_routes and back.test_routes == ds.test_routes
    for a, b in zip(ds.frames, back.frames):
        assert np.array_equal(a.image, b.image) and a.geometry == b.geometry and np.array_equal(a.mask, b.mask)
        assert a.observation == b.observation and a.frame_id == b.frame_id


# command line


def test_selftest_passes():
    assert cli.main(["selftest", "--quick"]) == 0


def test_selftest_failure_exit_code(monkeypatch):
    monkeypatch.setattr(selftest, "run", lambda quick=False, log=None: False)
    assert cli.main(["selftest"]) == 1


def test_usage_error_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["attack", "--no-such-flag"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        cli.main(["fly"])
    assert exc.value.code == 2


def test_config_error_exit_code(tmp_path, capsys):
    assert cli.main(["gen-scenes", "--set", "nope=1", "--out", str(tmp_path)]) == 2
    assert "unknown config key" in capsys.readouterr().err
    assert cli.main(["describe", str(tmp_path / "missing.elan")]) == 2


def test_missing_inputs_are_listed(tmp_path, capsys):
    assert cli.main(["attack", "--set", "attack.classes=90", "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "missing inputs" in err and os.path.join("scenes", "90", "manifest.txt") in err


def test_training_failure_exit_code(tmp_path, capsys):
    out = str(tmp_path / "r")
    args = ["--set", "scene.classes=30,90", "--set", "attack.classes=90", "--set", "scene.routes=2", "--set", "scene.frames=6", "--out", out]
    assert cli.main(["gen-scenes"] + args) == 0
    bad = ["--set", "classifier.epochs=1", "--set", "classifier.lr=1e-12", "--set", "classifier.min_accuracy=0.99"]
    assert cli.main(["train-classifier"] + args + bad) == 3
    assert "numeric failure" in capsys.readouterr().err


def test_gen_scenes_byte_identical(tmp_path):
    args = ["--set", "seed=1", "--set", "scene.classes=STOP", "--set", "attack.classes=STOP", "--set", "scene.routes=2", "--set", "scene.frames=6"]
    assert cli.main(["gen-scenes", *args, "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["gen-scenes", *args, "--out", str(tmp_path / "b")]) == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a == b and len(a) == 1 + 1 + 2 * 6 * 2


def test_laser_preview_and_describe(tmp_path, capsys):
    world = scene.WorldConfig(label="30")
    ds = scene.generate_dataset(world, scene.default_routes(world, 2, 6, 2), 2)
    storage.save_dataset(tmp_path / "ds", ds)
    frame = tmp_path / "ds" / "route_00" / "t003.ppm"
    out = tmp_path / "prev"
    assert cli.main(["laser-preview", str(frame), "--phi", "1.5707963267948966", "--omega", "5", "--lambda", "620", "--out", str(out)]) == 0
    before, after = storage.read_ppm(out / "before.ppm"), storage.read_ppm(out / "after.ppm")
    f = ds.frames[3]
    assert np.array_equal(before[~f.mask], after[~f.mask]) and (after.astype(int) >= before).all()
    assert (after != before).any() and storage.read_pgm(out / "coverage.pgm").max() == 255
    assert "slope inf" in capsys.readouterr().out
    assert cli.main(["laser-preview", str(frame), "--phi", "4", "--omega", "5", "--lambda", "620", "--out", str(out)]) == 2


# the tiny end-to-end run


def test_run_layout(tiny):
    _, out = tiny
    for rel in [
        "config.txt",
        "scenes/90/manifest.txt",
        "models/classifiers.csv",
        "models/ptn_90.elan",
        "models/policy_90.elan",
        "ptn/90.csv",
        "agent/90.csv",
        "attack/90/agent/trace.csv",
        "attack/90/agent/latency.json",
        "attack/90/static-eot/summary.json",
        "attack/90/clean/trace.csv",
        "oracle/90.csv",
        "report/summary.txt",
        "report/asr.csv",
    ]:
        assert (out / rel).exists(), rel


def test_config_and_hash_embedded(tiny):
    cfg_path, out = tiny
    cfg = config.load_config(str(cfg_path))
    for d in [out, out / "report", out / "attack" / "90" / "random"]:
        assert (d / "config.txt").read_text() == cfg.dumps()
    s = storage.read_json(out / "attack" / "90" / "agent" / "summary.json")
    assert s["config_hash"] == cfg.hash() and s["seed"] == 3
    assert cfg.hash() in (out / "report" / "summary.txt").read_text()


def test_report_verifies_asr_from_frames(tiny):
    cfg_path, out = tiny
    cfg = config.load_config(str(cfg_path))
    header, rows = storage.read_csv(out / "report" / "asr.csv")
    assert rows and all(r[header.index("verified")] == "yes" for r in rows)
    for method in pipeline.METHODS:
        assert pipeline.recompute_asr(cfg, str(out), "90", method) == pipeline.trace_asr(str(out), "90", method)


def test_report_byte_stable(tiny):
    cfg_path, out = tiny
    before = _files(out / "report")
    assert cli.main(["report", "--config", str(cfg_path), "--out", str(out)]) == 0
    assert _files(out / "report") == before


def test_empty_trace_reports_na(tiny, tmp_path):
    cfg_path, run = tiny
    cfg = config.load_config(str(cfg_path))
    _, victims = pipeline.load_classifiers(cfg, str(run))
    out = str(tmp_path)
    pipeline.save_trace(cfg, out, "90", attack.AttackTrace("agent", "90", n_victims=2), [], victims)
    _, rows = report.asr_table(cfg, out)
    agent_rows = [r for r in rows if r[1] == "agent"]
    assert len(agent_rows) == 2 and all(r[3] == "n/a" and r[5] == "0" for r in agent_rows)
    assert all(r[3] == "n/a" for r in rows if r[1] == "random")


def test_ptn_eval_and_bench_commands(tiny, tmp_path):
    cfg_path, out = tiny
    csv_path = tmp_path / "p.csv"
    assert cli.main(["ptn-eval", "--config", str(cfg_path), "--out", str(out), "--class", "90", "--csv", str(csv_path)]) == 0
    assert csv_path.read_bytes() == (out / "ptn" / "90.csv").read_bytes()
    bench = tmp_path / "b.csv"
    assert cli.main(["classify-bench", "--config", str(cfg_path), "--out", str(out), "--csv", str(bench)]) == 0
    assert bench.read_bytes() == (out / "models" / "classifiers.csv").read_bytes()
