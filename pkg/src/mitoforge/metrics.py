"""Focal loss, confusion matrix, balanced accuracy and rotation TTA."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError, UndefinedMetricError

TTA_ROTATIONS = (0, 1, 2, 3)  # quarter turns, averaged in this order


@dataclass
class FocalConfig:
    alpha: float | None = 0.25
    gamma: float = 2.0
    positive_class: int = 1

    def __post_init__(self):
        if self.alpha is not None and not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"focal alpha must be in (0, 1) or None, got {self.alpha}")
        if self.gamma < 0:
            raise ConfigError(f"focal gamma must be >= 0, got {self.gamma}")
        if self.positive_class not in (0, 1):
            raise ConfigError("positive_class must be 0 or 1")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "gamma": self.gamma, "positive_class": self.positive_class}

    @classmethod
    def from_dict(cls, d: dict) -> "FocalConfig":
        return cls(**d)


def _check_labels(labels, n: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ContractError(f"labels must be 1-D, got shape {labels.shape}")
    if n is not None and labels.shape[0] != n:
        raise ContractError(f"{labels.shape[0]} labels for {n} samples")
    if labels.size and not np.isin(labels, (0, 1)).all():
        raise ContractError(f"labels must be 0 or 1, got {sorted(set(labels.tolist()) - {0, 1})}")
    return labels.astype(np.int64)


def focal_loss(logits: Tensor, labels, cfg: FocalConfig | None = None) -> Tensor:
    """Mean over the batch of -alpha_t (1 - p_t)^gamma log p_t.

    ``alpha_t`` is ``alpha`` for ``positive_class`` and ``1 - alpha`` otherwise;
    ``alpha=None`` weights both classes by 1.
    """
    cfg = cfg or FocalConfig()
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise DimensionError(f"focal_loss expects (B, 2) logits, got {logits.shape}")
    labels = _check_labels(labels, logits.shape[0])
    logp_t = ad.pick(ad.log_softmax(logits, axis=1), labels)
    per_sample = logp_t
    if cfg.gamma != 0:
        p_t = ad.exp(logp_t)
        per_sample = ad.mul(ad.pow_scalar(1.0 - p_t, cfg.gamma), logp_t)
    if cfg.alpha is not None:
        weights = np.where(labels == cfg.positive_class, cfg.alpha, 1.0 - cfg.alpha)
        per_sample = ad.mul(per_sample, Tensor(weights, dtype=logits.data.dtype))
    return -ad.mean(per_sample)


def confusion_matrix(preds, labels) -> np.ndarray:
    """2x2 counts indexed [true][pred]."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ContractError(f"{preds.shape[0] if preds.ndim else 0} predictions for {labels.shape} labels")
    labels = _check_labels(labels)
    preds = _check_labels(preds)
    cm = np.zeros((2, 2), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def balanced_accuracy(confusion) -> float:
    """Unweighted mean of the per-class recalls."""
    cm = np.asarray(confusion, dtype=np.int64)
    rows = cm.sum(axis=1)
    if (rows == 0).any():
        empty = [int(i) for i in np.flatnonzero(rows == 0)]
        raise UndefinedMetricError(f"no samples of true class {empty}; balanced accuracy undefined")
    return float(np.mean(np.diag(cm) / rows))


def predict_labels(logits) -> np.ndarray:
    """Argmax over classes; ties resolve to class 0."""
    logits = np.asarray(logits)
    return (logits[..., 1] > logits[..., 0]).astype(np.int64)


def softmax_np(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class EvalReport:
    confusion: np.ndarray
    balanced_accuracy: float
    per_domain: dict = field(default_factory=dict)
    n: int = 0

    def to_dict(self) -> dict:
        return {
            "confusion": [[int(v) for v in row] for row in np.asarray(self.confusion)],
            "balanced_accuracy": float(self.balanced_accuracy),
            "per_domain": {k: (None if v is None else float(v)) for k, v in sorted(self.per_domain.items())},
            "n": int(self.n),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(np.asarray(d["confusion"], dtype=np.int64), d["balanced_accuracy"], dict(d["per_domain"]), d["n"])


def build_report(preds, labels, domains: Sequence[str] | None = None) -> EvalReport:
    """Pooled confusion/BA plus per-domain BA (None where a domain lacks a class)."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    cm = confusion_matrix(preds, labels)
    per_domain: dict = {}
    if domains is not None:
        domains = np.asarray(domains)
        for dom in sorted(set(domains.tolist())):
            sel = domains == dom
            try:
                per_domain[dom] = balanced_accuracy(confusion_matrix(preds[sel], labels[sel]))
            except UndefinedMetricError:
                per_domain[dom] = None
    return EvalReport(cm, balanced_accuracy(cm), per_domain, int(labels.size))


def rotate_quarter(img: np.ndarray, k: int) -> np.ndarray:
    """Rotate an (H, W, C) image by k clockwise quarter turns."""
    return np.ascontiguousarray(np.rot90(img, k=-k, axes=(0, 1)))


def tta_logits(
    images: Sequence[np.ndarray],
    forward: Callable[[np.ndarray], np.ndarray],
    preprocess: Callable[[np.ndarray], np.ndarray],
    rotations: Sequence[int] = TTA_ROTATIONS,
) -> np.ndarray:
    """Mean logits over rotated views for a batch of (H, W, 3) images."""
    total = None
    for k in rotations:
        batch = np.stack([preprocess(rotate_quarter(img, k)) for img in images])
        out = np.asarray(forward(batch), dtype=np.float64)
        total = out if total is None else total + out
    return (total / len(rotations)).astype(np.float32)


def tta_predict(img: np.ndarray, model, preprocess, rotations: Sequence[int] = TTA_ROTATIONS) -> np.ndarray:
    """Logits of one image averaged over its quarter-turn rotations (model in eval mode)."""

    def forward(batch):
        with ad.no_grad():
            return model.forward(batch, training=False).data

    return tta_logits([img], forward, preprocess, rotations)[0]
