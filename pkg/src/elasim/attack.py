"""Attack orchestration: per-frame targets, the agent loop, and the baselines.

Inside decision loops only a small pixel window around the sign is
composited and cropped; the result equals compositing the whole frame and
cropping afterwards, bit for bit, because both paths run the same
elementwise arithmetic on absolute pixel coordinates.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import classify, laser, seeding
from .scene import quantize

# ---------------------------------------------------------------------------
# per-frame attack targets


@dataclass
class FrameTarget:
    frame_id: str
    label: int  # index into the class list
    window: tuple  # (x0, y0, x1, y1) in frame pixels
    pixels: np.ndarray  # float32 (h, w, 3) clean window
    mask: np.ndarray  # bool (h, w) sign mask inside the window
    anchor: tuple  # beam anchor (column, row), frame coordinates
    geometry: object  # perceived geometry driving state, anchor and surrogate crop
    taps: tuple  # surrogate crop matrices over the window
    frame_size: tuple  # (width, height)
    victim_geometry: object = None
    victim_taps: tuple = None
    skipped: str = ""
    mask_rows: np.ndarray = None
    mask_cols: np.ndarray = None

    def __post_init__(self):
        self.mask_rows, self.mask_cols = np.nonzero(self.mask)


def _union(a, b):
    return (min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def make_target(frame, perceived, label_index, frame_id=None):
    """Bundle what the decision loop needs for one frame.

    ``perceived`` is the PTN geometry (or ground truth for oracle runs). The
    window covers the crop taps of both geometries and the sign mask.
    """
    image = frame.image
    H, W = image.shape[:2]
    fid = frame_id or frame.frame_id
    gt = frame.geometry
    inside = 0 <= perceived.x_center < W and 0 <= perceived.y_center < H
    skipped = "" if inside else "perceived sign centre outside the frame"
    try:
        win = classify.crop_window(perceived, W, H)
        classify.crop_box(perceived)
    except ValueError as exc:  # pragma: no cover - decoder keeps boxes sane
        win, skipped = (0, 0, W, H), str(exc)
    win = _union(win, classify.crop_window(gt, W, H))
    jj, ii = np.nonzero(frame.mask)
    if len(ii):
        win = _union(win, (int(ii.min()), int(jj.min()), int(ii.max()) + 1, int(jj.max()) + 1))
    x0, y0, x1, y1 = win
    taps = None
    if not skipped:
        try:
            taps = classify.crop_matrices(perceived, W, H, win)
        except ValueError as exc:
            skipped = str(exc)
    return FrameTarget(
        fid,
        int(label_index),
        win,
        np.asarray(image[y0:y1, x0:x1], dtype=np.float32),
        np.asarray(frame.mask[y0:y1, x0:x1], dtype=bool),
        (float(perceived.x_center), float(perceived.y_center)),
        perceived,
        taps,
        (W, H),
        gt,
        classify.crop_matrices(gt, W, H, win),
        skipped,
    )


def composite_window(target, phis, omegas, lams, beta=laser.DEFAULT_BETA):
    """Composite a batch of beams into the target window and capture to 8 bits.

    Returns float32 (n, h, w, 3). Only mask pixels change; their arithmetic
    mirrors :func:`laser.composite` followed by :func:`scene.quantize`, and
    the clean window is already 8-bit so the rest is left as is.
    """
    phis = np.atleast_1d(np.asarray(phis, dtype=np.float64))
    omegas = np.atleast_1d(np.asarray(omegas, dtype=np.float64))
    lams = np.atleast_1d(np.asarray(lams, dtype=np.float64))
    n = len(phis)
    out = np.repeat(target.pixels[None], n, axis=0)
    if beta == 0.0 or len(target.mask_rows) == 0:
        return out
    x0, y0 = target.window[0], target.window[1]
    jj, ii = target.mask_rows, target.mask_cols
    i = (ii + x0).astype(np.float64)[None, :]
    j = (jj + y0).astype(np.float64)[None, :]
    ax, ay = target.anchor
    sin = np.array([math.sin(p) for p in phis])[:, None]
    cos = np.array([math.cos(p) for p in phis])[:, None]
    d = np.abs((i - ax) * sin - (j - ay) * cos)
    cov = laser.coverage_from_distance(d, omegas[:, None])
    rgb = np.stack([laser.wavelength_to_rgb(l) for l in lams])[:, None, :]
    add = beta * cov[..., None] * rgb
    lit = np.clip(target.pixels[jj, ii][None] + add, 0.0, 1.0).astype(np.float32)
    out[:, jj, ii] = quantize(lit)
    return out


def surrogate_features(target, windows):
    return classify.to_features(classify.crop_batch(windows, target.taps))


def victim_features(target, windows):
    return classify.to_features(classify.crop_batch(windows, target.victim_taps))


def score_params(target, surrogates, phis, omegas, lams, beta, rule="ALL", chunk=512):
    """Surrogate true-class probs (n, m), top-1 labels (n, m) and success flags (n,)."""
    phis = np.atleast_1d(phis)
    omegas = np.atleast_1d(omegas)
    lams = np.atleast_1d(lams)
    probs, tops, ok = [], [], []
    for s in range(0, len(phis), chunk):
        win = composite_window(target, phis[s : s + chunk], omegas[s : s + chunk], lams[s : s + chunk], beta)
        p, t, k = classify.ensemble_scores(surrogates, surrogate_features(target, win), target.label, rule)
        probs.append(p)
        tops.append(t)
        ok.append(k)
    return np.concatenate(probs), np.concatenate(tops), np.concatenate(ok)


def grid_triples(shape=(36, 12, 31)):
    """Flattened (phi, omega, wavelength) arrays of the discretized parameter box."""
    phis, omegas, lams = laser.param_grid(*shape)
    P, O, L = np.meshgrid(phis, omegas, lams, indexing="ij")
    return P.ravel(), O.ravel(), L.ravel()


# ---------------------------------------------------------------------------
# traces


@dataclass
class AttackConfig:
    beta: float = laser.DEFAULT_BETA
    rule: str = "ALL"
    n_max: int = 10
    mode: str = "mean"  # policy mode at inference; "sample" draws from the policy
    queries: int = 200  # random-search budget
    eot_fraction: float = 0.1
    grid: tuple = (36, 12, 31)
    fine_grid: tuple = (72, 24, 61)
    chunk: int = 512


@dataclass
class TraceRow:
    frame_id: str
    label: str
    steps: int
    params: laser.LaserParams
    success: bool  # every surrogate fooled (per the success rule)
    victim_labels: tuple  # class names, one per victim
    ms: float  # perception + decision + composite, no disk I/O
    geometry: tuple = ()
    step_ms: tuple = ()
    skipped: str = ""

    @property
    def misclassified(self):
        return tuple(v != self.label for v in self.victim_labels)


@dataclass
class AttackTrace:
    method: str
    label: str
    rows: list = field(default_factory=list)
    n_victims: int = 0

    def asr(self, victim=None):
        """Fraction of frames whose victim label is wrong; NaN for an empty trace."""
        if not self.rows:
            return float("nan")
        if victim is None:
            return [self.asr(k) for k in range(self.n_victims)]
        return float(np.mean([r.misclassified[victim] for r in self.rows]))

    def surrogate_asr(self):
        return float(np.mean([r.success for r in self.rows])) if self.rows else float("nan")

    def latencies(self):
        return np.array([r.ms for r in self.rows])

    def mean_latency(self):
        return float(np.mean(self.latencies())) if self.rows else float("nan")

    def csv_rows(self):
        header = ["frame_id", "steps", "phi", "omega", "lambda", "success", "victim_label", "ms", "true_label"]
        body = [
            [
                r.frame_id,
                str(r.steps),
                repr(r.params.phi),
                repr(r.params.omega),
                repr(r.params.wavelength),
                str(int(r.success)),
                ";".join(r.victim_labels),
                f"{r.ms:.3f}",
                r.label,
            ]
            for r in self.rows
        ]
        return header, body


def mistaken_labels(trace, victim=0):
    """Counts of wrong victim labels over the successful frames of a trace."""
    counts = {}
    for r in trace.rows:
        v = r.victim_labels[victim]
        if v != r.label:
            counts[v] = counts.get(v, 0) + 1
    return dict(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))


def _victim_labels(victims, image, geom, label_index):
    return tuple(victims[k].classes[classify.victim_eval(v, image, geom, label_index)[0]] for k, v in enumerate(victims))


def _final_frame(frame, params, anchor, beta):
    return quantize(laser.composite(frame.image, frame.mask, params, anchor, beta))


# ---------------------------------------------------------------------------
# the agent loop


def attack_frame(frame, ptn, policy, surrogates, victims, cfg=None, prev_params=None, label_index=None, rng=None):
    """Perception, up to ``n_max`` decisions, and the final composite for one frame.

    Returns ``(adversarial image, TraceRow)``. Victims are locked during the
    loop and queried once on the finished frame.
    """
    from .agent import make_state, policy_act, random_initial_params
    from .percept import ptn_forward

    cfg = cfg or AttackConfig()
    li = classify.SIGN_CLASSES.index(frame.label) if label_index is None else label_index
    if prev_params is None:
        if rng is None:
            raise ValueError("the first frame needs an rng for its random initial parameters")
        prev_params = random_initial_params(rng)
    params = prev_params
    step_ms = []
    with classify.locked(victims):
        t0 = time.perf_counter()
        geom = ptn_forward(ptn, frame.observation)
        target = make_target(frame, geom, li)
        W, H = target.frame_size
        steps, success = 0, False
        if not target.skipped:
            while steps < cfg.n_max:
                ts = time.perf_counter()
                act, _, _ = policy_act(policy, make_state(geom, params, W, H), cfg.mode, rng)
                params = act.params
                _, _, ok = score_params(target, surrogates, [params.phi], [params.omega], [params.wavelength], cfg.beta, cfg.rule)
                steps += 1
                success = bool(ok[0])
                step_ms.append(1e3 * (time.perf_counter() - ts))
                if success:
                    break
            adv = _final_frame(frame, params, target.anchor, cfg.beta)
        else:
            adv = frame.image.copy()
        ms = 1e3 * (time.perf_counter() - t0)
    row = TraceRow(
        frame.frame_id,
        frame.label,
        steps,
        params,
        success,
        _victim_labels(victims, adv, frame.geometry, li),
        ms,
        (geom.x_center, geom.y_center, geom.a, geom.b, geom.delta),
        tuple(step_ms),
        target.skipped,
    )
    return adv, row


def attack_route(frames, ptn, policy, surrogates, victims, cfg=None, seed=0, keep_frames=True):
    """Attack frames in order, carrying the final parameters of each frame into the next."""
    cfg = cfg or AttackConfig()
    if len(frames) < 5:
        raise ValueError("a route needs at least five frames")
    rng = seeding.rng(seed, "attack", frames[0].label, frames[0].route)
    trace = AttackTrace("agent", frames[0].label, n_victims=len(victims))
    images = []
    prev = None
    for frame in frames:
        adv, row = attack_frame(frame, ptn, policy, surrogates, victims, cfg, prev, rng=rng)
        prev = row.params
        trace.rows.append(row)
        if keep_frames:
            images.append(adv)
    return trace, images


# ---------------------------------------------------------------------------
# baselines


def _frame_rng(seed, method, frame):
    return seeding.rng(seed, "baseline", method, frame.label, frame.route, frame.t)


def baseline_random_search(frames, ptn, surrogates, victims, queries=200, cfg=None, seed=0, method="random-search"):
    """Per frame, ``queries`` uniform draws; keep the one with the lowest mean surrogate confidence.

    Draws come from a per-frame stream shared with :func:`baseline_random`,
    so one query reproduces it exactly and larger budgets extend the same
    sequence of candidates.
    """
    from .percept import ptn_forward

    cfg = cfg or AttackConfig()
    if queries < 1:
        raise ValueError("query budget must be at least 1")
    trace = AttackTrace(method, frames[0].label if frames else "", n_victims=len(victims))
    images = []
    for frame in frames:
        li = classify.SIGN_CLASSES.index(frame.label)
        rng = _frame_rng(seed, "random", frame)
        draws = [laser.random_params(rng) for _ in range(queries)]
        with classify.locked(victims):
            t0 = time.perf_counter()
            geom = ptn_forward(ptn, frame.observation)
            target = make_target(frame, geom, li)
            best, success = draws[0], False
            if not target.skipped and queries > 1:
                P = np.array([d.phi for d in draws])
                O = np.array([d.omega for d in draws])
                L = np.array([d.wavelength for d in draws])
                probs, _, ok = score_params(target, surrogates, P, O, L, cfg.beta, cfg.rule, cfg.chunk)
                k = int(np.argmin(probs.mean(axis=1)))
                best, success = draws[k], bool(ok[k])
            elif not target.skipped:
                _, _, ok = score_params(target, surrogates, [best.phi], [best.omega], [best.wavelength], cfg.beta, cfg.rule)
                success = bool(ok[0])
            adv = _final_frame(frame, best, target.anchor, cfg.beta) if not target.skipped else frame.image.copy()
            ms = 1e3 * (time.perf_counter() - t0)
        trace.rows.append(
            TraceRow(frame.frame_id, frame.label, queries, best, success, _victim_labels(victims, adv, frame.geometry, li), ms, skipped=target.skipped)
        )
        images.append(adv)
    return trace, images


def baseline_random(frames, ptn, surrogates, victims, cfg=None, seed=0):
    """One uniform draw per frame."""
    return baseline_random_search(frames, ptn, surrogates, victims, 1, cfg, seed, method="random")


def eot_subsample(train_frames, fraction, seed):
    n = max(1, int(round(len(train_frames) * fraction)))
    idx = np.sort(seeding.rng(seed, "eot", "subsample").choice(len(train_frames), n, replace=False))
    return [train_frames[k] for k in idx]


def eot_objective(targets, surrogates, cfg, triples):
    """Mean success and mean true-class confidence of every triple over ``targets``."""
    P, O, L = triples
    success = np.zeros(len(P))
    conf = np.zeros(len(P))
    for tg in targets:
        probs, _, ok = score_params(tg, surrogates, P, O, L, cfg.beta, cfg.rule, cfg.chunk)
        success += ok
        conf += probs.mean(axis=1)
    return success / len(targets), conf / len(targets)


def baseline_static_eot(train_frames, test_frames, ptn, surrogates, victims, cfg=None, seed=0):
    """Grid-search one beam over a train subsample, then apply it to every test frame.

    Returns ``(params, objective, trace, images)``. The objective is mean
    surrogate success; ties go to the lower mean true-class confidence.
    """
    from .percept import ptn_forward

    cfg = cfg or AttackConfig()
    subset = eot_subsample(train_frames, cfg.eot_fraction, seed)
    targets = []
    for f in subset:
        tg = make_target(f, ptn_forward(ptn, f.observation), classify.SIGN_CLASSES.index(f.label))
        if not tg.skipped:
            targets.append(tg)
    triples = grid_triples(cfg.grid)
    success, conf = eot_objective(targets, surrogates, cfg, triples)
    k = int(np.lexsort((conf, -success))[0])
    params = laser.LaserParams(float(triples[0][k]), float(triples[1][k]), float(triples[2][k]))
    trace = AttackTrace("static-eot", test_frames[0].label if test_frames else "", n_victims=len(victims))
    images = []
    for frame in test_frames:
        li = classify.SIGN_CLASSES.index(frame.label)
        with classify.locked(victims):
            t0 = time.perf_counter()
            target = make_target(frame, ptn_forward(ptn, frame.observation), li)
            ok = False
            if not target.skipped:
                _, _, s = score_params(target, surrogates, [params.phi], [params.omega], [params.wavelength], cfg.beta, cfg.rule)
                ok = bool(s[0])
                adv = _final_frame(frame, params, target.anchor, cfg.beta)
            else:
                adv = frame.image.copy()
            ms = 1e3 * (time.perf_counter() - t0)
        trace.rows.append(
            TraceRow(frame.frame_id, frame.label, 1, params, ok, _victim_labels(victims, adv, frame.geometry, li), ms, skipped=target.skipped)
        )
        images.append(adv)
    return params, float(success[k]), trace, images


def clean_trace(frames, victims, label="clean"):
    """Victim labels on unattacked frames."""
    trace = AttackTrace(label, frames[0].label if frames else "", n_victims=len(victims))
    for frame in frames:
        li = classify.SIGN_CLASSES.index(frame.label)
        trace.rows.append(
            TraceRow(frame.frame_id, frame.label, 0, laser.LaserParams(0.0, laser.OMEGA_MIN, laser.LAMBDA_MIN), False, _victim_labels(victims, frame.image, frame.geometry, li), 0.0)
        )
    return trace


# ---------------------------------------------------------------------------
# brute-force oracle


@dataclass
class OracleResult:
    frame_id: str
    exists: bool  # some grid triple fools the surrogates
    params: laser.LaserParams  # first successful triple, else the lowest-confidence one
    victim_fooled: tuple
    evaluated: int


def oracle_grid(frame, surrogates, victims, cfg=None, fine=True, order=None, label_index=None):
    """Exhaustive grid scan on the ground-truth geometry and anchor.

    Stops at the first chunk holding a success. ``order`` optionally
    permutes the scan order of the grid triples.
    """
    cfg = cfg or AttackConfig()
    li = classify.SIGN_CLASSES.index(frame.label) if label_index is None else label_index
    target = make_target(frame, frame.geometry, li)
    P, O, L = grid_triples(cfg.fine_grid if fine else cfg.grid)
    if order is not None:
        P, O, L = P[order], O[order], L[order]
    best_k, best_conf, found, evaluated = 0, np.inf, False, 0
    with classify.locked(victims):
        if cfg.beta > 0.0:
            for s in range(0, len(P), cfg.chunk):
                sl = slice(s, s + cfg.chunk)
                probs, _, ok = score_params(target, surrogates, P[sl], O[sl], L[sl], cfg.beta, cfg.rule, cfg.chunk)
                evaluated += len(ok)
                if ok.any():
                    k = int(np.flatnonzero(ok)[0])
                    best_k, found = s + k, True
                    break
                m = probs.mean(axis=1)
                if m.min() < best_conf:
                    best_conf, best_k = float(m.min()), s + int(np.argmin(m))
    params = laser.LaserParams(float(P[best_k]), float(O[best_k]), float(L[best_k]))
    adv = _final_frame(frame, params, target.anchor, cfg.beta)
    fooled = tuple(classify.victim_eval(v, adv, frame.geometry, li)[1] for v in victims)
    return OracleResult(frame.frame_id, found, params, fooled, evaluated)
