"""Finite-difference checks for every differentiable op and the focal loss."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .metrics import FocalConfig, focal_loss
from .rng import rng_stream
from .vit import LoRAConfig, ViTConfig, lora_linear_forward

TOLERANCE = 1e-3


def _weights(rng, shape) -> Tensor:
    # Random projection turning any output into a scalar with non-trivial upstream gradient.
    return Tensor(rng.standard_normal(shape))


def _scalarize(y: Tensor, w: Tensor) -> Tensor:
    return ad.tsum(ad.mul(y, w))


def _shape(rng, rank: int, lo: int = 2, hi: int = 5) -> tuple:
    return tuple(int(v) for v in rng.integers(lo, hi, size=rank))


def _unary(op, positive=False):
    def build(rng):
        shape = _shape(rng, int(rng.integers(1, 4)))
        x = rng.uniform(0.5, 2.0, shape) if positive else rng.standard_normal(shape)
        w = _weights(rng, shape)
        return (lambda t: _scalarize(op(t), w)), x

    return build


def _binary(op):
    def build(rng):
        shape = _shape(rng, int(rng.integers(1, 4)))
        other = Tensor(rng.standard_normal(shape))
        w = _weights(rng, shape)
        if rng.random() < 0.5:
            return (lambda t: _scalarize(op(t, other), w)), rng.standard_normal(shape)
        return (lambda t: _scalarize(op(other, t), w)), rng.standard_normal(shape)

    return build


def _pow(rng):
    e = float(rng.choice([2.0, 3.0, 0.5, -1.0, 1.7]))
    shape = _shape(rng, 2)
    w = _weights(rng, shape)
    return (lambda t: _scalarize(ad.pow_scalar(t, e), w)), rng.uniform(0.5, 2.0, shape)


def _reshape(rng):
    shape = _shape(rng, 3)
    target = (shape[0] * shape[1], shape[2])
    w = _weights(rng, target)
    return (lambda t: _scalarize(ad.reshape(t, target), w)), rng.standard_normal(shape)


def _transpose(rng):
    shape = _shape(rng, 3)
    axes = tuple(int(a) for a in rng.permutation(3))
    w = _weights(rng, tuple(shape[a] for a in axes))
    return (lambda t: _scalarize(ad.transpose(t, axes), w)), rng.standard_normal(shape)


def _broadcast(rng):
    a, b = _shape(rng, 2)
    src = (1, b) if rng.random() < 0.5 else (a, 1)
    target = (int(rng.integers(1, 4)), a, b)
    w = _weights(rng, target)
    return (lambda t: _scalarize(ad.broadcast_to(t, target), w)), rng.standard_normal(src)


def _concat(rng):
    a, b = _shape(rng, 2)
    other = Tensor(rng.standard_normal((int(rng.integers(1, 4)), b)))
    w = _weights(rng, (a + other.shape[0], b))
    return (lambda t: _scalarize(ad.concat([t, other], axis=0), w)), rng.standard_normal((a, b))


def _getitem(rng):
    shape = _shape(rng, 2, 3, 6)
    if rng.random() < 0.5:
        idx = (slice(1, None), slice(0, 2))
        out_shape = (shape[0] - 1, 2)
    else:
        idx = rng.integers(0, shape[0], size=4)
        out_shape = (4, shape[1])
    w = _weights(rng, out_shape)
    return (lambda t: _scalarize(ad.getitem(t, idx), w)), rng.standard_normal(shape)


def _pick(rng):
    n, c = _shape(rng, 2)
    index = rng.integers(0, c, size=n)
    w = _weights(rng, (n,))
    return (lambda t: _scalarize(ad.pick(t, index), w)), rng.standard_normal((n, c))


def _tsum(rng):
    shape = _shape(rng, 3)
    axis = int(rng.integers(0, 3))
    w = _weights(rng, shape[:axis] + shape[axis + 1 :])
    return (lambda t: _scalarize(ad.tsum(t, axis=axis), w)), rng.standard_normal(shape)


def _mean(rng):
    shape = _shape(rng, 3)
    axis = int(rng.integers(0, 3))
    w = _weights(rng, shape[:axis] + (1,) + shape[axis + 1 :])
    return (lambda t: _scalarize(ad.mean(t, axis=axis, keepdims=True), w)), rng.standard_normal(shape)


def _matmul(rng):
    bsz, m, k, n = _shape(rng, 4)
    w = _weights(rng, (bsz, m, n))
    case = int(rng.integers(0, 3))
    if case == 0:
        other = Tensor(rng.standard_normal((bsz, k, n)))
        return (lambda t: _scalarize(ad.matmul(t, other), w)), rng.standard_normal((bsz, m, k))
    if case == 1:
        other = Tensor(rng.standard_normal((bsz, m, k)))
        return (lambda t: _scalarize(ad.matmul(other, t), w)), rng.standard_normal((bsz, k, n))
    other = Tensor(rng.standard_normal((bsz, m, k)))
    return (lambda t: _scalarize(ad.matmul(other, t), w)), rng.standard_normal((k, n))


def _linear(rng):
    bsz, n, din, dout = _shape(rng, 4)
    x = Tensor(rng.standard_normal((bsz, n, din)))
    wt = Tensor(rng.standard_normal((dout, din)))
    b = Tensor(rng.standard_normal(dout))
    w = _weights(rng, (bsz, n, dout))
    which = int(rng.integers(0, 3))
    if which == 0:
        return (lambda t: _scalarize(ad.linear(t, wt, b), w)), x.data
    if which == 1:
        return (lambda t: _scalarize(ad.linear(x, t, b), w)), wt.data
    return (lambda t: _scalarize(ad.linear(x, wt, t), w)), b.data


def _softmax_like(op):
    def build(rng):
        shape = _shape(rng, 2)
        axis = int(rng.integers(0, 2))
        w = _weights(rng, shape)
        return (lambda t: _scalarize(op(t, axis=axis), w)), rng.standard_normal(shape) * 2.0

    return build


def _layer_norm(rng):
    n, d = _shape(rng, 2, 3, 7)
    x = Tensor(rng.standard_normal((n, d)))
    gamma = Tensor(rng.uniform(0.5, 1.5, d))
    beta = Tensor(rng.standard_normal(d))
    w = _weights(rng, (n, d))
    which = int(rng.integers(0, 3))
    if which == 0:
        return (lambda t: _scalarize(ad.layer_norm(t, gamma, beta), w)), x.data
    if which == 1:
        return (lambda t: _scalarize(ad.layer_norm(x, t, beta), w)), gamma.data
    return (lambda t: _scalarize(ad.layer_norm(x, gamma, t), w)), beta.data


def _focal(rng):
    bsz = int(rng.integers(2, 9))
    labels = rng.integers(0, 2, size=bsz)
    labels[0], labels[-1] = 0, 1
    gamma = float(rng.choice([0.0, 2.0]))
    cfg = FocalConfig(alpha=0.25, gamma=gamma)
    return (lambda t: focal_loss(t, labels, cfg)), rng.standard_normal((bsz, 2)) * 2.0


def _lora_linear(rng):
    cfg = LoRAConfig(rank=2, alpha=4.0, dropout=0.0)
    n, din, dout = _shape(rng, 3, 3, 6)
    weight = Tensor(rng.standard_normal((dout, din)))
    a = Tensor(rng.standard_normal((2, din)))
    b = Tensor(rng.standard_normal((dout, 2)))
    w = _weights(rng, (n, dout))
    return (lambda t: _scalarize(lora_linear_forward(t, weight, (a, b), cfg, training=False), w)), rng.standard_normal(
        (n, din)
    )


def _attention(rng):
    # scaled dot-product attention composed from primitives
    bsz, n, d = 2, int(rng.integers(2, 5)), int(rng.integers(2, 5))
    k = Tensor(rng.standard_normal((bsz, n, d)))
    v = Tensor(rng.standard_normal((bsz, n, d)))
    w = _weights(rng, (bsz, n, d))

    def f(q):
        scores = ad.matmul(q, ad.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(d))
        return _scalarize(ad.matmul(ad.softmax(scores, axis=-1), v), w)

    return f, rng.standard_normal((bsz, n, d))


CASES: dict[str, Callable] = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "neg": _unary(ad.neg),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, positive=True),
    "pow_scalar": _pow,
    "gelu": _unary(ad.gelu),
    "reshape": _reshape,
    "transpose": _transpose,
    "broadcast_to": _broadcast,
    "concat": _concat,
    "getitem": _getitem,
    "pick": _pick,
    "tsum": _tsum,
    "mean": _mean,
    "matmul": _matmul,
    "linear": _linear,
    "softmax": _softmax_like(ad.softmax),
    "log_softmax": _softmax_like(ad.log_softmax),
    "layer_norm": _layer_norm,
    "lora_linear": _lora_linear,
    "attention": _attention,
    "focal_loss": _focal,
}


def dropout_check(rng: np.random.Generator) -> float:
    """Dropout is stochastic, so its backward is checked against the drawn mask.

    The mask is recovered from one forward pass, then the finite differences of
    the same masked map are compared with the recorded gradient.
    """
    shape = _shape(rng, 2)
    x = rng.uniform(0.5, 2.0, shape) * rng.choice([-1.0, 1.0], shape)
    w = rng.standard_normal(shape)
    p = float(rng.uniform(0.1, 0.7))
    t = Tensor(x, requires_grad=True)
    y = ad.dropout(t, p, rng, training=True)
    mask = y.data.astype(np.float64) / t.data.astype(np.float64)
    _scalarize(y, Tensor(w)).backward()
    h = 1e-5
    fd = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.reshape(-1)[i] = h
        fd.reshape(-1)[i] = ((w * mask * (x + e)).sum() - (w * mask * (x - e)).sum()) / (2 * h)
    auto = t.grad.astype(np.float64)
    scale = max(np.abs(auto).max(), np.abs(fd).max())
    return 0.0 if scale == 0 else float(np.abs(auto - fd).max() / scale)


@dataclass
class OpResult:
    op: str
    instances: int
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE

    def to_dict(self) -> dict:
        return {"op": self.op, "instances": self.instances, "max_rel_error": self.max_rel_error, "passed": self.passed}


def run_suite(instances: int = 20, seed: int = 0) -> tuple[list[OpResult], float]:
    """Check every op on ``instances`` random inputs; returns per-op results and wall time."""
    start = time.perf_counter()
    results = []
    for k, (name, build) in enumerate(CASES.items()):
        worst = 0.0
        for i in range(instances):
            f, x = build(rng_stream(seed, "gradsuite", k, i))
            worst = max(worst, grad_check(f, x))
        results.append(OpResult(name, instances, worst))
    worst = max(dropout_check(rng_stream(seed, "gradsuite_dropout", i)) for i in range(instances))
    results.append(OpResult("dropout", instances, worst))
    return results, time.perf_counter() - start
