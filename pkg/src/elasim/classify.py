"""Sign crops and the small dense classifiers used as surrogates and victims."""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import nn, seeding
from .errors import ShapeError, TrainingFailure
from .textures import SIGN_CLASSES

CROP = 32
CROP_PAD = 1.1
MIN_BOX = 4.0

SURROGATE_WIDTHS = (256, 192, 320)
VICTIM_WIDTHS = (288, 224)
SUCCESS_RULES = ("ALL", "ANY", "MAJORITY")


# ---------------------------------------------------------------------------
# crops


def crop_box(geom):
    """Padded axis-aligned box of the sign ellipse: (x_center, y_center, half_w, half_h)."""
    hx, hy = geom.half_extents()
    return geom.x_center, geom.y_center, CROP_PAD * hx, CROP_PAD * hy


def _axis_samples(center, half, n):
    """Integer base index, fractional weights and per-sample integer offsets.

    The centre is split into ``floor(center)`` and a fractional remainder so
    that shifting the centre by a whole pixel shifts every tap by exactly one.
    """
    base = math.floor(center)
    t = (center - base) + half * ((2.0 * np.arange(n) + 1.0) / n - 1.0)
    f = np.floor(t)
    return base + f.astype(np.int64), t - f


def crop_window(geom, width, height):
    """Integer pixel window ``(x0, y0, x1, y1)`` holding every bilinear tap of the crop."""
    xc, yc, hw, hh = crop_box(geom)
    xi, _ = _axis_samples(xc, hw, CROP)
    yi, _ = _axis_samples(yc, hh, CROP)
    x0 = int(np.clip(xi[0], 0, width - 1))
    x1 = int(np.clip(xi[-1] + 1, 0, width - 1)) + 1
    y0 = int(np.clip(yi[0], 0, height - 1))
    y1 = int(np.clip(yi[-1] + 1, 0, height - 1)) + 1
    return x0, y0, x1, y1


def crop_sign(image, geom, origin=(0, 0), full_size=None):
    """Bilinear 32x32 resample of the padded sign box.

    ``image`` may be a sub-window of the frame whose top-left pixel is
    ``origin`` in frame coordinates; ``full_size`` = (width, height) of the
    frame is then used for border clamping.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"expected an (H, W, C) image, got {image.shape}")
    xc, yc, hw, hh = crop_box(geom)
    if 2 * hw < MIN_BOX or 2 * hh < MIN_BOX:
        raise ValueError(f"crop box {2 * hw:.2f}x{2 * hh:.2f} px is degenerate")
    W, H = full_size or (image.shape[1], image.shape[0])
    xi, fx = _axis_samples(xc, hw, CROP)
    yi, fy = _axis_samples(yc, hh, CROP)
    ox, oy = origin
    x0 = np.clip(xi, 0, W - 1) - ox
    x1 = np.clip(xi + 1, 0, W - 1) - ox
    y0 = np.clip(yi, 0, H - 1) - oy
    y1 = np.clip(yi + 1, 0, H - 1) - oy
    fx = fx[None, :, None]
    fy = fy[:, None, None]
    top = image[y0[:, None], x0[None, :]] * (1 - fx) + image[y0[:, None], x1[None, :]] * fx
    bot = image[y1[:, None], x0[None, :]] * (1 - fx) + image[y1[:, None], x1[None, :]] * fx
    return top * (1 - fy) + bot * fy


def crop_matrices(geom, width, height, window):
    """Separable bilinear weights ``(Ry (32, h), Rx (32, w))`` over a pixel window.

    ``Ry @ channel @ Rx.T`` reproduces :func:`crop_sign` up to float rounding
    and is much faster for large batches.
    """
    xc, yc, hw, hh = crop_box(geom)
    if 2 * hw < MIN_BOX or 2 * hh < MIN_BOX:
        raise ValueError(f"crop box {2 * hw:.2f}x{2 * hh:.2f} px is degenerate")
    x0, y0, x1, y1 = window

    def weights(center, half, size, lo, hi):
        idx, frac = _axis_samples(center, half, CROP)
        R = np.zeros((CROP, hi - lo))
        rows = np.arange(CROP)
        np.add.at(R, (rows, np.clip(idx, 0, size - 1) - lo), 1.0 - frac)
        np.add.at(R, (rows, np.clip(idx + 1, 0, size - 1) - lo), frac)
        return R

    return weights(yc, hh, height, y0, y1), weights(xc, hw, width, x0, x1)


def crop_batch(windows, matrices):
    """Crops (n, 32, 32, C) of a batch of (n, h, w, C) windows, in float32."""
    Ry, Rx = (m.astype(np.float32) for m in matrices)
    w = np.asarray(windows, dtype=np.float32)
    tmp = np.einsum("yh,nhwc->nywc", Ry, w, optimize=True)
    return np.einsum("nywc,xw->nyxc", tmp, Rx, optimize=True)


def to_features(crops):
    """Flatten crops to network inputs centred on zero."""
    crops = np.asarray(crops)
    return crops.reshape(crops.shape[:-3] + (-1,)) * 2.0 - 1.0


# ---------------------------------------------------------------------------
# classifiers


@dataclass
class ClassifierConfig:
    hidden2: int = 128
    lr: float = 1e-3
    epochs: int = 30
    batch: int = 64
    min_accuracy: float = 0.98


@dataclass
class Classifier:
    net: nn.DenseNet
    classes: tuple = SIGN_CLASSES
    seed: int = 0
    role: str = "surrogate"
    accuracy: float = float("nan")
    _fast: list = field(default=None, repr=False, compare=False)
    calls: int = field(default=0, repr=False, compare=False)
    locked: bool = field(default=False, repr=False, compare=False)

    @property
    def width(self):
        return self.net.layers[0].n_out

    def fast_layers(self):
        """float32 copies of the weights for batched inference."""
        if self._fast is None:
            self._fast = [
                (l.weight.T.astype(np.float32), l.bias.astype(np.float32), l.activation) for l in self.net.layers
            ]
        return self._fast

    def logits(self, features):
        if self.locked:
            raise RuntimeError(f"{self.role} model queried while locked")
        self.calls += 1
        h = np.asarray(features, dtype=np.float32)
        for w, b, act in self.fast_layers():
            h = h @ w + b
            if act == "relu":
                np.maximum(h, 0.0, out=h)
        return h

    def probs(self, features):
        return nn.softmax(self.logits(features).astype(np.float64))

    def predict(self, crops):
        return np.argmax(self.logits(to_features(crops)), axis=-1)


@contextmanager
def locked(models):
    """Make any query to ``models`` raise for the duration of the block."""
    for m in models:
        m.locked = True
    try:
        yield
    finally:
        for m in models:
            m.locked = False


def create_classifier(width, seed, role="surrogate", hidden2=128, n_classes=len(SIGN_CLASSES)):
    rng = seeding.rng(seed, "classifier", role, width)
    net = nn.DenseNet.create([CROP * CROP * 3, width, hidden2, n_classes], ["relu", "relu", "identity"], rng)
    return Classifier(net, SIGN_CLASSES[:n_classes], seed, role)


def accuracy(model, crops, labels):
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(model.predict(crops) == np.asarray(labels)))


def train_classifier(crops, labels, width, seed, role="surrogate", config=None, test=None, log=None):
    """Minibatch softmax training in float64.

    ``test`` = (crops, labels) enables the accuracy floor check; a model
    that misses it raises :class:`TrainingFailure` carrying the accuracy.
    """
    cfg = config or ClassifierConfig()
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=len(SIGN_CLASSES))
    present = counts[counts > 0]
    if len(present) < 2:
        raise ValueError("need at least two classes")
    model = create_classifier(width, seed, role, cfg.hidden2)
    x_all = to_features(crops).astype(np.float64)
    params = model.net.params()
    state = nn.OptimState.for_params(params, lr=cfg.lr)
    order = seeding.rng(seed, "classifier", role, width, "order")
    n = len(labels)
    for epoch in range(cfg.epochs):
        perm = order.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch):
            idx = perm[start : start + cfg.batch]
            out, cache = nn.forward(model.net, x_all[idx], return_cache=True)
            loss, g = nn.softmax_xent(out, labels[idx])
            grads, _ = nn.backward(model.net, x_all[idx], g, cache)
            nn.optimizer_step(params, grads, state)
            total += loss * len(idx)
        model._fast = None
        if log is not None:
            log(epoch, total / n)
    model._fast = None
    if test is not None:
        model.accuracy = accuracy(model, *test)
        if model.accuracy < cfg.min_accuracy:
            raise TrainingFailure(
                f"{role} width {width}: held-out accuracy {model.accuracy:.4f} < {cfg.min_accuracy}",
                metric=model.accuracy,
            )
    return model


def check_disjoint(surrogates, victims):
    """Surrogates and victims may share neither a seed nor a first-layer width."""
    s_seeds = {m.seed for m in surrogates}
    s_widths = {m.width for m in surrogates}
    for v in victims:
        if v.seed in s_seeds or v.width in s_widths:
            raise ValueError(f"victim (seed {v.seed}, width {v.width}) overlaps a surrogate")


# ---------------------------------------------------------------------------
# ensemble scoring


@dataclass
class EnsembleScore:
    true_probs: np.ndarray  # per surrogate, probability of the true class
    labels: np.ndarray  # per surrogate top-1 index
    success: bool


def success_flags(fooled, rule="ALL"):
    """Combine per-model fooled flags (..., n_models) with a success rule."""
    fooled = np.asarray(fooled, dtype=bool)
    if rule == "ALL":
        return fooled.all(axis=-1)
    if rule == "ANY":
        return fooled.any(axis=-1)
    if rule == "MAJORITY":
        return fooled.sum(axis=-1) * 2 > fooled.shape[-1]
    raise ValueError(f"unknown success rule {rule!r}")


def ensemble_scores(surrogates, features, true_label, rule="ALL"):
    """Batched scoring: true-class probs (n, m), top-1 labels (n, m), success (n,)."""
    if not surrogates:
        raise ValueError("need at least one surrogate")
    probs, tops = [], []
    for model in surrogates:
        logits = model.logits(features)
        tops.append(np.argmax(logits, axis=-1))
        probs.append(nn.softmax(logits.astype(np.float64))[..., true_label])
    probs = np.stack(probs, axis=-1)
    tops = np.stack(tops, axis=-1)
    return probs, tops, success_flags(tops != true_label, rule)


def ensemble_eval(surrogates, crop, true_label, rule="ALL"):
    probs, tops, ok = ensemble_scores(surrogates, to_features(crop)[None], true_label, rule)
    return EnsembleScore(probs[0], tops[0], bool(ok[0]))


def victim_eval(victim, image, geom, true_label):
    """Top-1 label of the victim on the GT-geometry crop, and whether it is wrong."""
    crop = crop_sign(image, geom)
    label = int(victim.predict(crop[None])[0])
    return label, label != true_label


# ---------------------------------------------------------------------------
# checkpoints


def save_classifier(path, model):
    meta = {
        "kind": "classifier",
        "role": model.role,
        "seed": str(model.seed),
        "classes": ",".join(model.classes),
        "accuracy": repr(float(model.accuracy)),
    }
    nn.save(path, model.net, meta)


def load_classifier(path):
    net, meta = nn.load(path)
    if meta.get("kind") != "classifier":
        raise ValueError(f"{path} is not a classifier checkpoint")
    return Classifier(net, tuple(meta["classes"].split(",")), int(meta["seed"]), meta["role"], float(meta["accuracy"]))
