"""AdamW with decoupled weight decay, warmup-cosine schedule, global-norm clipping."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError, NumericError


@dataclass
class OptimConfig:
    base_lr: float = 1e-4
    weight_decay: float = 0.1
    eps: float = 1e-7
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float = 1.0
    warmup_frac: float = 0.10
    warmup_start_lr: float = 8.47e-7
    final_lr: float = 0.0

    def __post_init__(self):
        problems = []
        if not 0.0 < self.warmup_frac < 1.0:
            problems.append("warmup_frac must be in (0, 1)")
        if not 0.0 <= self.warmup_start_lr <= self.base_lr:
            problems.append("warmup_start_lr must be in [0, base_lr]")
        if not 0.0 <= self.final_lr <= self.base_lr:
            problems.append("final_lr must be in [0, base_lr]")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                problems.append(f"{name} must be in [0, 1)")
        if self.eps <= 0 or self.clip_norm <= 0 or self.weight_decay < 0:
            problems.append("eps and clip_norm must be positive, weight_decay non-negative")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        return cls(**d)


def warmup_steps(total: int, cfg: OptimConfig) -> int:
    return math.ceil(cfg.warmup_frac * total)


def lr_at_step(t: int, total: int, cfg: OptimConfig) -> float:
    """Linear warmup to ``base_lr`` over the first ceil(frac*T) steps, then cosine to ``final_lr``."""
    if total < 1:
        raise ContractError(f"total steps must be >= 1, got {total}")
    if not 0 <= t <= total:
        raise ContractError(f"step {t} outside [0, {total}]")
    w = warmup_steps(total, cfg)
    if t < w:
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * t / w
    if total == w:
        return cfg.base_lr
    progress = (t - w) / (total - w)
    return cfg.final_lr + (cfg.base_lr - cfg.final_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def _named(items) -> list[tuple[str, Tensor]]:
    if isinstance(items, Mapping):
        return list(items.items())
    if isinstance(items, Tensor):
        items = [items]
    return [(str(i), t) for i, t in enumerate(items)]


def global_grad_norm(params) -> float:
    sq = 0.0
    for name, t in _named(params):
        if t.grad is None:
            continue
        if not np.all(np.isfinite(t.grad)):
            raise NumericError(f"non-finite gradient in {name}")
        g = t.grad.astype(np.float64)
        sq += float(np.dot(g.ravel(), g.ravel()))
    return math.sqrt(sq)


def clip_grad_norm(params, max_norm: float = 1.0) -> float:
    """Scale all grads in place so their joint L2 norm is at most ``max_norm``; returns the scale."""
    norm = global_grad_norm(params)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for _, t in _named(params):
        if t.grad is not None:
            t.grad = (t.grad * np.float32(scale)).astype(t.grad.dtype, copy=False)
    return scale


@dataclass
class OptimState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params, state: OptimState, lr: float, cfg: OptimConfig) -> None:
    """One AdamW update on every parameter that has a gradient.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)
    """
    if lr < 0:
        raise ContractError("learning rate must be non-negative")
    state.t += 1
    t = state.t
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    f32 = np.float32
    for name, p in _named(params):
        g = p.grad
        if g is None or not p.requires_grad:
            continue
        if g.shape != p.shape:
            raise DimensionError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = f32(b1) * m + f32(1.0 - b1) * g
        v = f32(b2) * v + f32(1.0 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / f32(c1)
        v_hat = v / f32(c2)
        update = m_hat / (np.sqrt(v_hat) + f32(cfg.eps)) + f32(cfg.weight_decay) * p.data
        p.data = (p.data - f32(lr) * update).astype(p.data.dtype, copy=False)


class AdamW:
    """Thin stateful wrapper binding named parameters to :func:`adamw_step`."""

    def __init__(self, params: Mapping[str, Tensor] | Iterable[Tensor], cfg: OptimConfig):
        self.params = dict(_named(params))
        self.cfg = cfg
        self.state = OptimState()

    def trainable(self) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if p.requires_grad}

    def step(self, lr: float) -> None:
        adamw_step(self.trainable(), self.state, lr, self.cfg)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
