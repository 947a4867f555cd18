"""Minimal dense-network substrate.

Row-batched forward/backward passes over plain numpy arrays, an
adaptive-moment optimizer, softmax cross-entropy, diagonal Gaussian policy
densities, central-difference gradient checking and the ``ELAN`` checkpoint
format. Everything here runs in float64.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

ACTIVATIONS = ("relu", "tanh", "identity")
_ACT_TAG = {name: i for i, name in enumerate(ACTIVATIONS)}

MAGIC = b"ELAN"
FORMAT_VERSION = 1

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
HALF_LOG_2PIE = 0.5 * math.log(2.0 * math.pi * math.e)


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"bad layer shapes {self.weight.shape} / {self.bias.shape}")
        if self.activation not in _ACT_TAG:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self):
        return self.weight.shape[1]

    @property
    def n_out(self):
        return self.weight.shape[0]


class DenseNet:
    """A chain of dense layers.

    Parameters are exposed as a flat list ``[W0, b0, W1, b1, ...]`` of the
    live arrays, so optimizers update the network in place.
    """

    def __init__(self, layers):
        self.layers = list(layers)
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.n_out != nxt.n_in:
                raise ShapeError(f"layer chain broken: {prev.n_out} -> {nxt.n_in}")

    @classmethod
    def create(cls, sizes, activations, rng):
        """He init for relu layers, Xavier (Glorot normal) otherwise; zero biases."""
        if isinstance(activations, str):
            activations = [activations] * (len(sizes) - 2) + ["identity"]
        if len(activations) != len(sizes) - 1:
            raise ShapeError("need one activation per layer")
        layers = []
        for n_in, n_out, act in zip(sizes[:-1], sizes[1:], activations):
            if act == "relu":
                std = math.sqrt(2.0 / n_in)
            else:
                std = math.sqrt(2.0 / (n_in + n_out))
            layers.append(Layer(rng.normal(0.0, std, size=(n_out, n_in)), np.zeros(n_out), act))
        return cls(layers)

    @property
    def in_dim(self):
        return self.layers[0].n_in

    @property
    def out_dim(self):
        return self.layers[-1].n_out

    @property
    def sizes(self):
        return [self.in_dim] + [layer.n_out for layer in self.layers]

    def params(self):
        out = []
        for layer in self.layers:
            out.extend([layer.weight, layer.bias])
        return out

    @property
    def n_params(self):
        return sum(p.size for p in self.params())

    def copy(self):
        return DenseNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def set_params(self, values):
        for dst, src in zip(self.params(), values):
            dst[...] = src

    def flat_params(self):
        return np.concatenate([p.ravel() for p in self.params()])

    def __call__(self, x):
        return forward(self, x)

    def __repr__(self):
        acts = ",".join(l.activation for l in self.layers)
        return f"DenseNet({'->'.join(map(str, self.sizes))}, [{acts}])"


def _activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def forward(net, x, return_cache=False):
    """Evaluate ``net`` on a vector or a (batch, in) matrix."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.in_dim or x.ndim > 2:
        raise ShapeError(f"input shape {x.shape} does not match in-dim {net.in_dim}")
    acts = [x]
    h = x
    for layer in net.layers:
        h = _activate(h @ layer.weight.T + layer.bias, layer.activation)
        acts.append(h)
    if return_cache:
        return h, acts
    return h


def backward(net, x, output_grad, cache=None):
    """Backpropagate ``output_grad`` through ``net`` at input ``x``.

    Returns ``(param_grads, input_grad)``; param grads follow the order of
    ``net.params()`` and are summed over the batch.
    """
    if cache is None:
        _, cache = forward(net, x, return_cache=True)
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != cache[-1].shape:
        raise ShapeError(f"output grad shape {g.shape} != output shape {cache[-1].shape}")
    grads = []
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        out = cache[k + 1]
        if layer.activation == "relu":
            g = g * (out > 0.0)
        elif layer.activation == "tanh":
            g = g * (1.0 - out * out)
        inp = cache[k]
        if g.ndim == 1:
            gw = np.outer(g, inp)
            gb = g.copy()
        else:
            gw = g.T @ inp
            gb = g.sum(axis=0)
        grads.append(gb)
        grads.append(gw)
        g = g @ layer.weight
    grads.reverse()
    return grads, g


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimState:
    m: list
    v: list
    step: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            0,
            lr,
            beta1,
            beta2,
            eps,
        )


def optimizer_step(params, grads, state):
    """One Adam update, applied to ``params`` in place.

    Parameters with an all-zero gradient and zero moments stay unchanged.
    Raises :class:`NumericError` (with ``index``) on a non-finite gradient.
    """
    if state.lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state disagree in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ShapeError(f"grad {i} shape {g.shape} != param shape {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {i}", index=i)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_grad_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = [g * scale for g in grads]
    return grads, total


# ---------------------------------------------------------------------------
# losses and densities


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_xent(logits, label):
    """Cross-entropy loss and its logit gradient.

    Works on a single logit vector with an integer label, or on a
    (batch, C) matrix with an integer label array (mean loss, mean gradient).
    """
    logits = np.asarray(logits, dtype=np.float64)
    n_cls = logits.shape[-1]
    if n_cls < 2:
        raise ValueError("need at least two classes")
    labels = np.asarray(label)
    if np.any(labels < 0) or np.any(labels >= n_cls):
        raise ValueError(f"label out of range for {n_cls} classes")
    logp = log_softmax(logits)
    p = np.exp(logp)
    if logits.ndim == 1:
        loss = -float(logp[int(labels)])
        grad = p.copy()
        grad[int(labels)] -= 1.0
        return loss, grad
    idx = np.arange(logits.shape[0])
    loss = -float(np.mean(logp[idx, labels]))
    grad = p.copy()
    grad[idx, labels] -= 1.0
    return loss, grad / logits.shape[0]


def gaussian_logprob_entropy(mean, log_std, sample):
    """Log-density of ``sample`` under a diagonal Gaussian, and its entropy.

    Batched inputs (rows) give per-row log-probs; entropy depends on
    ``log_std`` only.
    """
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    sample = np.asarray(sample, dtype=np.float64)
    if mean.shape[-1] != log_std.shape[-1] or sample.shape[-1] != mean.shape[-1]:
        raise ShapeError("mean, log_std and sample must share the last dimension")
    z = (sample - mean) * np.exp(-log_std)
    logprob = np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=-1)
    entropy = np.sum(log_std + HALF_LOG_2PIE, axis=-1)
    if np.ndim(entropy) == 0:
        entropy = float(entropy)
    if np.ndim(logprob) == 0:
        logprob = float(logprob)
    return logprob, entropy


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    passed: bool
    tolerance: float = 1e-4
    n_checked: int = 0


def _rel_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(net, loss_fn, x, analytic=None, h=1e-5, tol=1e-4, n_probe=None, rng=None):
    """Compare backprop gradients against central finite differences.

    ``loss_fn(output) -> (loss, d loss / d output)``. ``analytic`` may be
    supplied (e.g. a deliberately corrupted gradient); otherwise it is
    computed with :func:`backward`. With ``n_probe`` only that many randomly
    chosen parameter entries are probed.
    """
    out = forward(net, x)
    loss, dout = loss_fn(out)
    if not np.isfinite(loss):
        raise NumericError("loss is not finite at the probe point")
    if analytic is None:
        analytic, _ = backward(net, x, dout)
    flat_analytic = np.concatenate([g.ravel() for g in analytic])
    params = net.params()
    offsets = np.cumsum([0] + [p.size for p in params])
    total = offsets[-1]
    if n_probe is None or n_probe >= total:
        probe = np.arange(total)
    else:
        rng = rng if rng is not None else np.random.default_rng(0)
        probe = np.sort(rng.choice(total, size=n_probe, replace=False))
    worst, worst_idx = 0.0, -1
    for flat_idx in probe:
        k = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        p = params[k].reshape(-1)
        j = flat_idx - offsets[k]
        old = p[j]
        p[j] = old + h
        lp, _ = loss_fn(forward(net, x))
        p[j] = old - h
        lm, _ = loss_fn(forward(net, x))
        p[j] = old
        numeric = (lp - lm) / (2.0 * h)
        err = _rel_error(flat_analytic[flat_idx], numeric)
        if err > worst:
            worst, worst_idx = err, int(flat_idx)
    return GradCheckReport(worst, worst_idx, worst < tol, tol, len(probe))


# ---------------------------------------------------------------------------
# checkpoints


def _encode_meta(meta):
    lines = []
    for key in sorted(meta):
        value = str(meta[key])
        if "\n" in value or "=" in key:
            raise ValueError(f"metadata entry {key!r} not representable")
        lines.append(f"{key}={value}")
    return "\n".join(lines).encode("utf-8")


def _decode_meta(blob):
    meta = {}
    for line in blob.decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    return meta


def dumps(net, meta=None):
    """Serialize ``net`` (and an optional flat str->str header) to bytes."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(net.layers)))
    for layer in net.layers:
        buf.write(struct.pack("<IIB", layer.n_in, layer.n_out, _ACT_TAG[layer.activation]))
        buf.write(np.ascontiguousarray(layer.weight, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    blob = _encode_meta(meta or {})
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    return buf.getvalue()


def loads(data):
    """Inverse of :func:`dumps`; returns ``(net, meta)``."""
    if data[:4] != MAGIC:
        raise ValueError("not an ELAN checkpoint")
    version, n_layers = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 12
    layers = []
    for _ in range(n_layers):
        n_in, n_out, tag = struct.unpack_from("<IIB", data, pos)
        pos += 9
        w = np.frombuffer(data, dtype="<f8", count=n_in * n_out, offset=pos).reshape(n_out, n_in)
        pos += 8 * n_in * n_out
        b = np.frombuffer(data, dtype="<f8", count=n_out, offset=pos)
        pos += 8 * n_out
        layers.append(Layer(w.astype(np.float64), b.astype(np.float64), ACTIVATIONS[tag]))
    (n_meta,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = _decode_meta(data[pos : pos + n_meta])
    return DenseNet(layers), meta


def save(path, net, meta=None):
    with open(path, "wb") as fh:
        fh.write(dumps(net, meta))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def describe(path):
    """Human-readable summary of a checkpoint header."""
    with open(path, "rb") as fh:
        data = fh.read()
    net, meta = loads(data)
    version = struct.unpack_from("<I", data, 4)[0]
    lines = [
        f"file: {path}",
        f"format: ELAN v{version}",
        f"layers: {len(net.layers)}",
    ]
    for i, layer in enumerate(net.layers):
        lines.append(f"  [{i}] {layer.n_in} -> {layer.n_out} {layer.activation}")
    lines.append(f"parameters: {net.n_params}")
    for key in sorted(meta):
        value = meta[key]
        if len(value) > 60:
            value = value[:57] + "..."
        lines.append(f"meta {key} = {value}")
    return "\n".join(lines)


def floats_to_text(values):
    """Exact text encoding of a float vector (hex floats, comma separated)."""
    return ",".join(float(v).hex() for v in np.ravel(values))


def text_to_floats(text):
    if not text:
        return np.zeros(0)
    return np.array([float.fromhex(v) for v in text.split(",")])
