"""``ela`` command line.

Exit codes: 0 success, 1 self-test violation, 2 configuration or usage
error, 3 numeric or training failure.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import laser, pipeline, report, scene, storage
from .config import load_config
from .errors import ConfigError, NumericError, TrainingFailure

STAGES = {
    "gen-scenes": pipeline.gen_scenes,
    "train-classifier": pipeline.train_classifiers,
    "train-ptn": pipeline.train_ptns,
    "train-agent": pipeline.train_agents,
    "attack": pipeline.run_attack,
    "baseline": pipeline.run_baselines,
    "oracle": pipeline.run_oracle,
    "report": report.write_report,
    "run": pipeline.run_all,
}

HELP = {
    "gen-scenes": "render the synthetic route datasets",
    "train-classifier": "train surrogate and victim classifiers",
    "train-ptn": "train one perspective network per attacked class",
    "train-agent": "train one PPO laser agent per attacked class",
    "attack": "attack the held-out routes with the trained agents",
    "baseline": "random, random-search and static-EOT baselines",
    "oracle": "brute-force grid reachability on sampled test frames",
    "report": "tables and summary from a run directory",
    "run": "every enabled stage in order",
}


def _common(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--out", default="runs/default", help="run directory")


def build_parser():
    parser = argparse.ArgumentParser(prog="ela", description="Laser attack simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in HELP.items():
        _common(sub.add_parser(name, help=text))
    p = sub.add_parser("selftest", help="run the invariant suite")
    p.add_argument("--quick", action="store_true", help="skip the slower checks")
    p = sub.add_parser("describe", help="print a checkpoint header")
    p.add_argument("path")
    p = sub.add_parser("ptn-eval", help="per-frame IOU CSV of a trained PTN")
    _common(p)
    p.add_argument("--class", dest="label", required=True)
    p.add_argument("--csv", help="output CSV (default: <out>/ptn/<class>.csv)")
    p = sub.add_parser("classify-bench", help="per-class accuracy CSV of the trained classifiers")
    _common(p)
    p.add_argument("--csv", help="output CSV (default: <out>/models/classifiers.csv)")
    p = sub.add_parser("laser-preview", help="before/after PPM and coverage PGM for one beam")
    p.add_argument("frame", help="PPM frame; a sidecar .txt beside it supplies the sign mask and anchor")
    p.add_argument("--phi", type=float, required=True, help="beam angle in radians, [0, pi)")
    p.add_argument("--omega", type=float, required=True, help="beam width in pixels")
    p.add_argument("--lambda", dest="wavelength", type=float, required=True, help="wavelength in nm")
    p.add_argument("--beta", type=float, default=laser.DEFAULT_BETA)
    p.add_argument("--anchor", help="column,row of the beam anchor")
    p.add_argument("--out", default="preview")
    return parser


def _log(msg):
    print(msg, flush=True)


def _laser_preview(args):
    img = scene.to_float(storage.read_ppm(args.frame))
    H, W = img.shape[:2]
    side = os.path.splitext(args.frame)[0] + ".txt"
    mask = np.ones((H, W), dtype=bool)
    anchor = ((W - 1) / 2.0, (H - 1) / 2.0)
    if os.path.exists(side):
        kv = storage.read_kv(side)
        xc, yc, a, b, delta = storage.floats(kv["ellipse"])
        geom = scene.SignGeometry(xc, yc, a, b, delta, kv.get("shape", "circle"))
        from .percept import shape_mask

        mask, anchor = shape_mask(geom, H, W), (xc, yc)
    if args.anchor:
        try:
            anchor = tuple(float(v) for v in args.anchor.split(","))
        except ValueError:
            raise ConfigError("--anchor expects column,row") from None
    try:
        params = laser.LaserParams(args.phi, args.omega, args.wavelength)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    after, cov = pipeline.laser_preview(img, mask, params, anchor, args.beta)
    os.makedirs(args.out, exist_ok=True)
    storage.write_ppm(os.path.join(args.out, "before.ppm"), img)
    storage.write_ppm(os.path.join(args.out, "after.ppm"), after)
    storage.write_pgm(os.path.join(args.out, "coverage.pgm"), cov)
    _log(f"slope {params.slope_text()}, wrote {args.out}/before.ppm, after.ppm, coverage.pgm")


def _dispatch(args):
    if args.command == "selftest":
        from . import selftest

        return 0 if selftest.run(quick=args.quick, log=_log) else 1
    if args.command == "describe":
        if not os.path.exists(args.path):
            raise ConfigError(f"no such file: {args.path}")
        _log(pipeline.describe(args.path))
        return 0
    if args.command == "laser-preview":
        _laser_preview(args)
        return 0
    cfg = load_config(args.config, args.set)
    if args.command == "ptn-eval":
        ds = pipeline.load_scenes(args.out, args.label)
        model = pipeline.load_ptn(args.out, args.label)
        path = args.csv or os.path.join(args.out, "ptn", f"{args.label}.csv")
        miou = pipeline.write_ptn_eval(path, model, ds.test)
        _log(f"{args.label}: held-out mIOU {miou:.4f} -> {path}")
        return 0
    if args.command == "classify-bench":
        datasets = [pipeline.load_scenes(args.out, lab) for lab in cfg["scene.classes"]]
        s, v = pipeline.load_classifiers(cfg, args.out)
        path = args.csv or os.path.join(args.out, "models", "classifiers.csv")
        pipeline.write_bench(path, s + v, *pipeline.classifier_crops(datasets, "test"))
        _log(f"wrote {path}")
        return 0
    STAGES[args.command](cfg, args.out, log=_log)
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit with status 2
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"ela: configuration error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, TrainingFailure, FloatingPointError) as exc:
        print(f"ela: numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
