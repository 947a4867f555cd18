"""Perception: sign masks, IOU, and the perspective transformation network (PTN).

The PTN maps the attacker-view vehicle box to the victim-view sign ellipse.
It is trained either by differentiating a sigmoid-relaxed mask against the
ground-truth mask (``mask-mse``) or by regressing the five parameters
directly (``param-mse``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn, seeding
from .errors import NumericError, ShapeError
from .scene import SignGeometry, canonical_geometry

OCTAGON_APOTHEM = math.cos(math.pi / 8)
_OCT_NORMALS = np.array([[math.cos(k * math.pi / 4), math.sin(k * math.pi / 4)] for k in range(8)])


def _pixel_grid(n_rows, n_cols, step=1.0, offset=0.0):
    j = np.arange(n_rows, dtype=np.float64)[:, None] * step + offset
    i = np.arange(n_cols, dtype=np.float64)[None, :] * step + offset
    return i, j


def _params(geom):
    """Accept a SignGeometry or a raw ``(xc, yc, a, b, delta[, shape])`` sequence."""
    if isinstance(geom, SignGeometry):
        return (geom.x_center, geom.y_center, geom.a, geom.b, geom.delta, geom.shape)
    vals = tuple(geom)
    if len(vals) == 5:
        vals = vals + ("circle",)
    return tuple(float(v) for v in vals[:5]) + (vals[5],)


def _shape(geom):
    return _params(geom)[5]


def _canonical_coords(geom, i, j):
    """(u / a, v / b): coordinates in the frame where the ellipse is the unit circle."""
    _check_axes(geom)
    g = canonical_geometry(*_params(geom))
    c, s = math.cos(g.delta), math.sin(g.delta)
    dx = i - g.x_center
    dy = j - g.y_center
    u = dx * c - dy * s
    v = dx * s + dy * c
    return u / g.a, v / g.b, u, v, g


def _check_axes(geom):
    _, _, a, b, *_ = _params(geom)
    if not (a > 0 and b > 0):
        raise ValueError(f"semi-axes must be positive, got a={a}, b={b}")


def quadratic_form(geom, i, j):
    _check_axes(geom)
    _, _, u, v, g = _canonical_coords(geom, i, j)
    return u * u / (g.a * g.a) + v * v / (g.b * g.b)


def render_mask(geom, n_rows, n_cols):
    """Hard ellipse mask: 1 where the rotated quadratic form is <= 1."""
    _check_axes(geom)
    i, j = _pixel_grid(n_rows, n_cols)
    return quadratic_form(geom, i, j) <= 1.0


def octagon_level(q1, q2):
    """Polygon gauge of the canonical octagon: <= 1 inside, == 1 on the outline."""
    proj = q1[..., None] * _OCT_NORMALS[:, 0] + q2[..., None] * _OCT_NORMALS[:, 1]
    return proj.max(axis=-1) / OCTAGON_APOTHEM


def render_octagon_mask(geom, n_rows, n_cols):
    """Affine image of the flat-top regular octagon inscribed in the ellipse.

    Point-in-convex-polygon test: a pixel is inside when it lies behind all
    eight edge lines in canonical coordinates.
    """
    _check_axes(geom)
    i, j = _pixel_grid(n_rows, n_cols)
    q1, q2, *_ = _canonical_coords(geom, i, j)
    return octagon_level(q1, q2) <= 1.0


def shape_mask(geom, n_rows, n_cols):
    if _shape(geom) == "octagon":
        return render_octagon_mask(geom, n_rows, n_cols)
    return render_mask(geom, n_rows, n_cols)


def _sigmoid(x):
    # the exp(x) / (1 + exp(x)) branch keeps far-outside pixels strictly positive
    e = np.exp(-np.abs(x))
    r = 1.0 / (1.0 + e)
    return np.where(x >= 0, r, e * r)


def soft_mask(geom, n_rows, n_cols, tau):
    """Sigmoid relaxation of the hard mask, ``sigmoid((1 - Q) / tau)``.

    Q is the squared shape gauge (the ellipse quadratic form for circle
    signs), computed on image-normalized coordinates; it is scale invariant,
    so normalization does not change its value.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    _check_axes(geom)
    i, j = _pixel_grid(n_rows, n_cols)
    scale = float(max(n_rows, n_cols))
    xc, yc, a, b, delta, shape = _params(geom)
    g = (xc / scale, yc / scale, a / scale, b / scale, delta, shape)
    q1, q2, *_ = _canonical_coords(g, i / scale, j / scale)
    if shape == "octagon":
        Q = octagon_level(q1, q2) ** 2
    else:
        Q = q1 * q1 + q2 * q2
    return _sigmoid((1.0 - Q) / tau)


def iou(m1, m2):
    m1 = np.asarray(m1, dtype=bool)
    m2 = np.asarray(m2, dtype=bool)
    if m1.shape != m2.shape:
        raise ShapeError(f"mask shapes differ: {m1.shape} vs {m2.shape}")
    union = np.count_nonzero(m1 | m2)
    if union == 0:
        return 1.0
    return np.count_nonzero(m1 & m2) / union


# ---------------------------------------------------------------------------
# perspective transformation network


@dataclass
class DecoderRanges:
    """Output ranges of the PTN head, in victim-image pixels."""

    width: float = 128.0
    height: float = 128.0
    b_min: float = 1.0
    b_max: float = 48.0
    residual_max: float = 16.0

    def as_meta(self):
        return {k: repr(float(v)) for k, v in vars(self).items()}

    @classmethod
    def from_meta(cls, meta):
        return cls(**{k: float(meta[k]) for k in vars(cls())})


@dataclass
class PTNModel:
    net: nn.DenseNet
    ranges: DecoderRanges
    attacker_size: tuple = (160, 120)
    # affine standardization applied after dividing the box by the attacker image size
    in_mean: np.ndarray = field(default_factory=lambda: np.full(4, 0.5))
    in_scale: np.ndarray = field(default_factory=lambda: np.ones(4))
    shape: str = "circle"

    def normalize(self, boxes):
        boxes = np.asarray(boxes, dtype=np.float64)
        w, h = self.attacker_size
        size = np.array([w, h, w, h], dtype=np.float64)
        return (boxes / size - self.in_mean) / self.in_scale

    def copy(self):
        return PTNModel(
            self.net.copy(), self.ranges, self.attacker_size, self.in_mean.copy(), self.in_scale.copy(), self.shape
        )


def create_ptn(rng, hidden=(64, 64), ranges=None, attacker_size=(160, 120), shape="circle"):
    sizes = [4, *hidden, 5]
    acts = ["relu"] * len(hidden) + ["identity"]
    return PTNModel(nn.DenseNet.create(sizes, acts, rng), ranges or DecoderRanges(), tuple(attacker_size), shape=shape)


def decode(raw, ranges):
    """Map raw head outputs (..., 5) to ``(xc, yc, a, b, delta)`` arrays.

    Ordered decoding keeps ``a >= b > 0`` and ``delta`` in ``[0, pi)`` for any
    finite input.
    """
    raw = np.asarray(raw, dtype=np.float64)
    s = _sigmoid(raw)
    xc = ranges.width * s[..., 0]
    yc = ranges.height * s[..., 1]
    b = ranges.b_min + (ranges.b_max - ranges.b_min) * s[..., 3]
    a = b + ranges.residual_max * s[..., 2]
    delta = np.mod(math.pi * s[..., 4], math.pi)
    return np.stack([xc, yc, a, b, delta], axis=-1), s


def _decode_jacobian(s, ranges):
    """d(xc, yc, a, b, delta) / d raw, as a (..., 5, 5) block with rows = outputs."""
    ds = s * (1.0 - s)
    J = np.zeros(s.shape[:-1] + (5, 5))
    J[..., 0, 0] = ranges.width * ds[..., 0]
    J[..., 1, 1] = ranges.height * ds[..., 1]
    J[..., 2, 2] = ranges.residual_max * ds[..., 2]
    J[..., 2, 3] = (ranges.b_max - ranges.b_min) * ds[..., 3]
    J[..., 3, 3] = (ranges.b_max - ranges.b_min) * ds[..., 3]
    J[..., 4, 4] = math.pi * ds[..., 4]
    return J


def _to_geometry(p, shape):
    xc, yc, a, b, delta = (float(v) for v in p)
    if not a >= b:  # guard against rounding when the residual underflows
        a = b
    delta = delta if delta < math.pi else 0.0
    return SignGeometry(xc, yc, a, b, delta, shape)


def ptn_forward(model, obs):
    """Predict the victim-view sign geometry from one attacker-view box."""
    box = obs.as_array() if hasattr(obs, "as_array") else np.asarray(obs, dtype=np.float64)
    if box.shape != (4,):
        raise ShapeError(f"expected a 4-vector box, got shape {box.shape}")
    raw = nn.forward(model.net, model.normalize(box))
    p, _ = decode(raw, model.ranges)
    return _to_geometry(p, model.shape)


def ptn_predict(model, boxes):
    """Batched prediction: (n, 4) boxes -> (n, 5) parameter rows."""
    raw = nn.forward(model.net, model.normalize(np.atleast_2d(boxes)))
    return decode(raw, model.ranges)[0]


# ---------------------------------------------------------------------------
# training


@dataclass
class PTNConfig:
    mode: str = "mask-mse"
    tau: float = 0.05
    tau_start: float = 0.5  # soft-mask temperature is annealed geometrically down to ``tau``
    lr: float = 2e-3
    lr_final: float = 2e-4
    epochs: int = 200
    batch: int = 32
    grid: int = 64  # side of the downsampled loss grid
    hidden: tuple = (64, 64)
    jitter: float = 0.25  # uniform +- px noise on training boxes; keeps the map smooth off the route manifold


@dataclass
class PTNTrainResult:
    model: PTNModel
    loss_curve: list
    initial_loss: float
    final_loss: float


def _coarse_grid(n_rows, n_cols, grid):
    """Pixel coordinates of coarse cell centres and the block factor."""
    fy, fx = n_rows // grid, n_cols // grid
    if fy * grid != n_rows or fx * grid != n_cols:
        raise ShapeError(f"image {n_rows}x{n_cols} is not a multiple of the {grid} loss grid")
    j = (np.arange(grid, dtype=np.float64) * fy + (fy - 1) / 2.0)[:, None]
    i = (np.arange(grid, dtype=np.float64) * fx + (fx - 1) / 2.0)[None, :]
    return i, j, fy, fx


def downsample_mask(mask, grid):
    """Block-average a hard mask onto a ``grid`` x ``grid`` target."""
    m = np.asarray(mask, dtype=np.float64)
    n_rows, n_cols = m.shape
    fy, fx = n_rows // grid, n_cols // grid
    return m.reshape(grid, fy, grid, fx).mean(axis=(1, 3))


def _gauge_and_partials(p, i, j, shape):
    """Squared shape gauge Q on the pixel grid and its partials in the canonical frame.

    ``p`` is (n, 5); ``i``/``j`` broadcast against (n, rows, cols). Returns
    Q, dQ/dq1, dQ/dq2 and the rotated offsets (u, v).
    """
    xc, yc, a, b, d = (p[:, k, None, None] for k in range(5))
    c, s = np.cos(d), np.sin(d)
    dx = i - xc
    dy = j - yc
    u = dx * c - dy * s
    v = dx * s + dy * c
    q1, q2 = u / a, v / b
    if shape == "octagon":
        # the 8 support lines fold onto |q1|, |q2| and the diagonal (|q1| + |q2|) / sqrt 2
        a1, a2 = np.abs(q1), np.abs(q2)
        r = (a1 + a2) * math.sqrt(0.5)
        g = np.maximum(np.maximum(a1, a2), r)
        w1 = np.where(g == r, math.sqrt(0.5), np.where(a1 >= a2, 1.0, 0.0))
        w2 = np.where(g == r, math.sqrt(0.5), np.where(a1 >= a2, 0.0, 1.0))
        g = g / OCTAGON_APOTHEM
        coef = 2.0 * g / OCTAGON_APOTHEM
        return g * g, coef * w1 * np.sign(q1), coef * w2 * np.sign(q2), u, v
    return q1 * q1 + q2 * q2, 2.0 * q1, 2.0 * q2, u, v


def mask_loss(params, targets, i, j, tau, shape="circle", with_grad=True):
    """Soft-mask MSE per sample and its gradient with respect to the parameters.

    ``params`` is (n, 5), ``targets`` is (n, rows, cols). Returns the mean
    loss over the batch and (n, 5) gradients of that mean.
    """
    Q, P1, P2, u, v = _gauge_and_partials(params, i, j, shape)
    M = _sigmoid((1.0 - Q) / tau)
    err = M - targets
    n, n_pix = len(params), targets.shape[1] * targets.shape[2]
    loss = float(np.sum(err * err)) / (n * n_pix)
    if not with_grad:
        return loss, None
    # dL/dQ = 2 err / (n P) * dM/dQ, with dM/dQ = -M (1 - M) / tau
    gQ = (2.0 / (n * n_pix)) * err * (-M * (1.0 - M) / tau)
    A = gQ * P1
    B = gQ * P2
    # q1 = u / a and q2 = v / b; reduce over pixels before the chain rule to the five parameters
    a, b, d = params[:, 2], params[:, 3], params[:, 4]
    c, s = np.cos(d), np.sin(d)
    sA, sB = A.sum(axis=(1, 2)), B.sum(axis=(1, 2))
    sAu, sAv = (A * u).sum(axis=(1, 2)), (A * v).sum(axis=(1, 2))
    sBu, sBv = (B * u).sum(axis=(1, 2)), (B * v).sum(axis=(1, 2))
    grad = np.stack(
        [
            -c / a * sA - s / b * sB,
            s / a * sA - c / b * sB,
            -sAu / (a * a),
            -sBv / (b * b),
            -sAv / a + sBu / b,
        ],
        axis=-1,
    )
    return loss, grad


def _param_scale(ranges):
    return np.array([ranges.width, ranges.height, ranges.residual_max, ranges.b_max, math.pi])


def param_loss(params, gt, ranges):
    """Range-normalized squared error on the five parameters (delta wraps modulo pi)."""
    scale = _param_scale(ranges)
    diff = params - gt
    # the ellipse is symmetric under delta -> delta + pi; compare on the circle of period pi
    diff[:, 4] = (diff[:, 4] + math.pi / 2) % math.pi - math.pi / 2
    z = diff / scale
    n = len(params)
    return float(np.sum(z * z)) / n, 2.0 * z / scale / n


def _frame_arrays(frames):
    boxes = np.array([f.observation.as_array() for f in frames])
    gt = np.array([f.geometry.as_array() for f in frames])
    return boxes, gt


def ptn_train(frames, config=None, seed=0, shape=None, attacker_size=(160, 120), log=None):
    """Fit a PTN on training frames; returns the model and its per-epoch loss curve."""
    cfg = config or PTNConfig()
    if len(frames) == 0:
        raise ValueError("no training frames")
    if cfg.mode not in ("mask-mse", "param-mse"):
        raise ValueError(f"unknown PTN training mode {cfg.mode!r}")
    shape = shape or frames[0].geometry.shape
    n_rows, n_cols = frames[0].mask.shape
    ranges = DecoderRanges(width=float(n_cols), height=float(n_rows))
    model = create_ptn(seeding.rng(seed, "ptn", "init"), cfg.hidden, ranges, attacker_size, shape)
    boxes, gt = _frame_arrays(frames)
    w, h = attacker_size
    unit = boxes / np.array([w, h, w, h])
    model.in_mean = unit.mean(axis=0)
    model.in_scale = unit.std(axis=0) + 1e-6

    i, j, _, _ = _coarse_grid(n_rows, n_cols, cfg.grid)
    targets = np.stack([downsample_mask(f.mask, cfg.grid) for f in frames])

    def epoch_loss(tau):
        p = ptn_predict(model, boxes)
        if cfg.mode == "mask-mse":
            return mask_loss(p, targets, i, j, tau, shape, with_grad=False)[0]
        return param_loss(p, gt, ranges)[0]

    params = model.net.params()
    state = nn.OptimState.for_params(params, lr=cfg.lr)
    order_rng = seeding.rng(seed, "ptn", "order")
    jitter_rng = seeding.rng(seed, "ptn", "jitter")
    n = len(frames)
    initial = epoch_loss(cfg.tau)
    curve = []
    for epoch in range(cfg.epochs):
        frac = epoch / max(cfg.epochs - 1, 1)
        tau = cfg.tau_start * (cfg.tau / cfg.tau_start) ** frac
        state.lr = cfg.lr * (cfg.lr_final / cfg.lr) ** frac
        perm = order_rng.permutation(n)
        for start in range(0, n, cfg.batch):
            idx = perm[start : start + cfg.batch]
            box = boxes[idx]
            if cfg.jitter > 0:
                box = box + jitter_rng.uniform(-cfg.jitter, cfg.jitter, box.shape)
            x = model.normalize(box)
            raw, cache = nn.forward(model.net, x, return_cache=True)
            p, s = decode(raw, ranges)
            if cfg.mode == "mask-mse":
                _, gp = mask_loss(p, targets[idx], i, j, tau, shape)
            else:
                _, gp = param_loss(p, gt[idx], ranges)
            graw = np.einsum("nk,nkl->nl", gp, _decode_jacobian(s, ranges))
            grads, _ = nn.backward(model.net, x, graw, cache)
            nn.optimizer_step(params, grads, state)
        loss = epoch_loss(cfg.tau)
        if not math.isfinite(loss):
            raise NumericError(f"PTN loss diverged at epoch {epoch}")
        curve.append(loss)
        if log is not None:
            log(epoch, loss, tau)
    return PTNTrainResult(model, curve, initial, curve[-1] if curve else initial)


# ---------------------------------------------------------------------------
# evaluation and checkpoints


def evaluate_miou(predict, frames):
    """Mean IOU of predicted hard masks against ground truth.

    ``predict`` is a PTNModel or any callable ``frame -> SignGeometry``.
    """
    if len(frames) == 0:
        raise ValueError("need at least one test frame")
    if isinstance(predict, PTNModel):
        model = predict
        boxes, _ = _frame_arrays(frames)
        rows = ptn_predict(model, boxes)
        geoms = [_to_geometry(r, model.shape) for r in rows]
    else:
        geoms = [predict(f) for f in frames]
    scores = []
    for f, g in zip(frames, geoms):
        n_rows, n_cols = f.mask.shape
        scores.append(iou(shape_mask(g, n_rows, n_cols), f.mask))
    return float(np.mean(scores)), scores, geoms


def save_ptn(path, model, extra=None):
    meta = {"kind": "ptn", "shape": model.shape}
    meta.update({f"range.{k}": v for k, v in model.ranges.as_meta().items()})
    meta["attacker_size"] = f"{model.attacker_size[0]}x{model.attacker_size[1]}"
    meta["in_mean"] = nn.floats_to_text(model.in_mean)
    meta["in_scale"] = nn.floats_to_text(model.in_scale)
    meta.update(extra or {})
    nn.save(path, model.net, meta)


def load_ptn(path):
    net, meta = nn.load(path)
    if meta.get("kind") != "ptn":
        raise ValueError(f"{path} is not a PTN checkpoint")
    ranges = DecoderRanges.from_meta({k[len("range.") :]: v for k, v in meta.items() if k.startswith("range.")})
    w, h = (int(v) for v in meta["attacker_size"].split("x"))
    return PTNModel(
        net, ranges, (w, h), nn.text_to_floats(meta["in_mean"]), nn.text_to_floats(meta["in_scale"]), meta["shape"]
    )
