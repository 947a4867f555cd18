"""Report tables built only from artifacts in the run directory.

Tables (CSV): miou, asr, latency, confusion, curves; plus ``summary.txt``.
Every deterministic number can be regenerated from the raw CSVs; latency
is kept in its own table because it is a wall-clock measurement.
"""
from __future__ import annotations

import os

import numpy as np

from . import pipeline, storage
from .config import RunConfig


def _na(x, spec=".4f"):
    return "n/a" if x is None or x != x else format(x, spec)


def miou_table(cfg, out):
    rows = []
    for label in cfg["attack.classes"]:
        path = os.path.join(out, "ptn", f"{label}.csv")
        if not os.path.exists(path):
            rows.append([label, "n/a", "n/a", "0"])
            continue
        header, body = storage.read_csv(path)
        ious = np.array([float(r[header.index("iou")]) for r in body])
        rows.append([label, _na(ious.mean() if len(ious) else None), _na(ious.min() if len(ious) else None), str(len(ious))])
    return ["class", "miou", "min_iou", "frames"], rows


def _summary(out, label, method):
    path = os.path.join(pipeline.method_dir(out, label, method), "summary.json")
    return storage.read_json(path) if os.path.exists(path) else None


def asr_table(cfg, out, verify=False):
    """ASR per class x method x victim; ``verified`` compares trace labels with re-evaluated frames."""
    rows = []
    for label in cfg["attack.classes"]:
        for method in pipeline.METHODS:
            s = _summary(out, label, method)
            if s is None:
                rows.append([label, method, "-", "n/a", "n/a", "0", "n/a"])
                continue
            from_trace = pipeline.trace_asr(out, label, method)
            redone = pipeline.recompute_asr(cfg, out, label, method) if verify and s["frames"] else None
            for k, victim in enumerate(s["victims"]):
                asr = s["asr"][victim]
                if redone is None:
                    check = "n/a"
                else:
                    check = "yes" if redone[k] == asr and from_trace[k] == asr else "NO"
                rows.append([label, method, victim, _na(asr), _na(s["surrogate_asr"]), str(s["frames"]), check])
    return ["class", "method", "victim", "asr", "surrogate_asr", "frames", "verified"], rows


def latency_table(cfg, out):
    rows = []
    for label in cfg["attack.classes"]:
        for method in pipeline.METHODS[:-1]:
            path = os.path.join(pipeline.method_dir(out, label, method), "latency.csv")
            if not os.path.exists(path):
                rows.append([label, method, "n/a", "n/a", "n/a"])
                continue
            header, body = storage.read_csv(path)
            ms = np.array([float(r[header.index("ms")]) for r in body])
            if len(ms) == 0:
                rows.append([label, method, "n/a", "n/a", "n/a"])
                continue
            rows.append([label, method, f"{np.median(ms):.2f}", f"{np.percentile(ms, 95):.2f}", f"{ms.mean():.2f}"])
    return ["class", "method", "median_ms", "p95_ms", "mean_ms"], rows


def confusion_table(cfg, out, method="agent", top=2):
    """Most frequent wrong victim labels among successful attacks."""
    rows = []
    for label in cfg["attack.classes"]:
        s = _summary(out, label, method)
        if s is None:
            continue
        for victim in s["victims"]:
            counts = list(s["mistaken_labels"][victim].items())
            counts.sort(key=lambda kv: (-kv[1], kv[0]))
            if not counts:
                rows.append([label, victim, "1", "n/a", "0"])
            for rank, (wrong, n) in enumerate(counts[:top], 1):
                rows.append([label, victim, str(rank), wrong, str(n)])
    return ["class", "victim", "rank", "label", "count"], rows


def curves_table(cfg, out):
    rows = []
    for label in cfg["attack.classes"]:
        path = os.path.join(out, "agent", f"{label}.csv")
        if not os.path.exists(path):
            continue
        _, body = storage.read_csv(path)
        rows += [[label] + r for r in body]
    return ["class", "epoch", "mean_reward", "mean_steps", "train_asr"], rows


def oracle_summary(cfg, out):
    """(class, sampled frames, reachable frames, agent successes among reachable)."""
    rows = []
    for label in cfg["attack.classes"]:
        path = os.path.join(out, "oracle", f"{label}.csv")
        if not os.path.exists(path):
            continue
        header, body = storage.read_csv(path)
        reachable = {r[0] for r in body if r[header.index("exists")] == "1"}
        won = 0
        tpath = os.path.join(pipeline.method_dir(out, label, "agent"), "trace.csv")
        if os.path.exists(tpath):
            th, tb = storage.read_csv(tpath)
            won = sum(1 for r in tb if r[0] in reachable and r[th.index("success")] == "1")
        rows.append([label, str(len(body)), str(len(reachable)), str(won)])
    return ["class", "sampled", "reachable", "agent_success"], rows


def _text_table(header, rows):
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)] if rows else [len(h) for h in header]
    line = lambda r: "  ".join(str(x).ljust(w) for x, w in zip(r, widths)).rstrip()
    return "\n".join([line(header), line(["-" * w for w in widths])] + [line(r) for r in rows])


def write_report(cfg: RunConfig, out, log=None, verify=True):
    rd = os.path.join(out, "report")
    os.makedirs(rd, exist_ok=True)
    pipeline.write_config(cfg, rd)
    tables = {
        "miou": miou_table(cfg, out),
        "asr": asr_table(cfg, out, verify),
        "latency": latency_table(cfg, out),
        "confusion": confusion_table(cfg, out),
        "curves": curves_table(cfg, out),
    }
    for name, (header, rows) in tables.items():
        storage.write_csv(os.path.join(rd, f"{name}.csv"), header, rows)
    oracle = oracle_summary(cfg, out)
    storage.write_csv(os.path.join(rd, "oracle.csv"), *oracle)

    parts = [f"run config hash {cfg.hash()}, root seed {cfg['seed']}"]
    parts.append("perception (held-out mIOU)\n" + _text_table(*tables["miou"]))
    parts.append("attack success rate per victim\n" + _text_table(*tables["asr"]))
    parts.append("most frequent mistaken labels (agent)\n" + _text_table(*tables["confusion"]))
    head, rows = tables["curves"]
    curve_rows = []
    for label in cfg["attack.classes"]:
        sel = [r for r in rows if r[0] == label]
        if len(sel) < 2:
            continue
        steps = [float(r[3]) for r in sel]
        rew = [float(r[2]) for r in sel]
        k = min(10, len(sel))
        curve_rows.append(
            [label, f"{np.mean(steps[:k]):.3f}", f"{np.mean(steps[-k:]):.3f}", f"{np.mean(rew[:k]):.3f}", f"{np.mean(rew[-k:]):.3f}"]
        )
    parts.append(
        "training curves (first vs last 10 epochs)\n"
        + _text_table(["class", "steps_first", "steps_last", "reward_first", "reward_last"], curve_rows)
    )
    parts.append("grid oracle reachability\n" + _text_table(*oracle))
    consts = cfg.reward_config().as_meta()
    parts.append("reward constants\n" + "\n".join(f"  {k} = {v}" for k, v in sorted(consts.items())))
    parts.append("latency is reported in latency.csv (wall clock, excludes disk I/O and victim evaluation)")
    with open(os.path.join(rd, "summary.txt"), "w") as fh:
        fh.write("\n\n".join(parts) + "\n")
    if log is not None:
        log(f"report written to {rd}")
    return tables
