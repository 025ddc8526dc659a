"""Training, evaluation, cross-validation and linear probing."""
from __future__ import annotations

import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, build_pipeline, normalize_imagenet, resize_bilinear
from .autodiff import Tensor
from .checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint
from .data import SampleRecord, load_image, stratified_kfold
from .errors import ConfigError, ContractError
from .metrics import EvalReport, FocalConfig, build_report, focal_loss, predict_labels, tta_logits
from .optim import AdamW, OptimConfig, clip_grad_norm, global_grad_norm, lr_at_step
from .rng import rng_stream
from .stain import StainProfilePool
from .vit import MODES, LoRAConfig, ViTConfig, ViTLoRAModel, lora_merge

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    mode: str = "lora_frozen_backbone"
    vit: ViTConfig = field(default_factory=ViTConfig)
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    focal: FocalConfig = field(default_factory=FocalConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    init_checkpoint: str | None = None
    eval_tta: bool = False
    eval_batch_size: int = 64
    probe_epochs: int = 30
    # Recorded for provenance only; all arithmetic runs in float32.
    mixed_precision: str = "fp16"

    def validate(self) -> None:
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.eval_batch_size < 1:
            problems.append("eval_batch_size must be >= 1")
        if self.probe_epochs < 1:
            problems.append("probe_epochs must be >= 1")
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}")
        try:
            self.augment.validate()
        except ConfigError as exc:
            problems.append(str(exc))
        if problems:
            raise ConfigError("invalid train config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "mode": self.mode,
            "vit": self.vit.to_dict(),
            "lora": self.lora.to_dict(),
            "optim": self.optim.to_dict(),
            "focal": self.focal.to_dict(),
            "augment": self.augment.to_dict(),
            "init_checkpoint": self.init_checkpoint,
            "eval_tta": self.eval_tta,
            "eval_batch_size": self.eval_batch_size,
            "probe_epochs": self.probe_epochs,
            "mixed_precision": self.mixed_precision,
            "compute_dtype": "float32",
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d.pop("compute_dtype", None)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        nested = {
            "vit": ViTConfig,
            "lora": LoRAConfig,
            "optim": OptimConfig,
            "focal": FocalConfig,
        }
        kwargs = {}
        for k, v in d.items():
            if k in nested:
                base = getattr(cls(), k).to_dict() if k != "vit" else ViTConfig().to_dict()
                extra = set(v) - set(base)
                if extra:
                    raise ConfigError(f"unknown keys in {k}: {sorted(extra)}")
                base.update(v)
                try:
                    kwargs[k] = nested[k].from_dict(base)
                except TypeError as exc:
                    raise ConfigError(f"{k}: {exc}") from exc
            elif k == "augment":
                kwargs[k] = AugmentConfig.from_dict(v)
            else:
                kwargs[k] = v
        return cls(**kwargs)


@dataclass
class TrainResult:
    last_checkpoint: Path
    best_checkpoint: Path
    runlog: list[dict]
    total_steps: int
    lr_trace: list[float]


# -- data helpers --------------------------------------------------------------------------
def load_crops(records: Sequence[SampleRecord], image_size: int) -> list[np.ndarray]:
    """Decode every record's image, resizing to ``image_size`` when needed."""
    out = []
    for r in records:
        img = load_image(r.path)
        if img.shape[:2] != (image_size, image_size):
            img = resize_bilinear(img, image_size, image_size)
        out.append(img)
    return out


def _map_ordered(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _require_trainable(records: Sequence[SampleRecord], what: str) -> None:
    if not records:
        raise ContractError(f"{what} manifest is empty")
    labels = {r.label for r in records}
    if labels != {0, 1}:
        raise ContractError(f"{what} set contains a single class {sorted(labels)}; both classes are required")


# -- model construction ----------------------------------------------------------------------
def build_model(cfg: TrainConfig) -> ViTLoRAModel:
    """Fresh or checkpoint-initialised model with the trainability mask of ``cfg.mode``."""
    if cfg.init_checkpoint:
        model = load_checkpoint(cfg.init_checkpoint, expected=cfg.vit)
    else:
        model = ViTLoRAModel.init(cfg.vit, None, seed=cfg.seed)
    if cfg.mode == "lora_frozen_backbone":
        if model.lora is not None:
            model = lora_merge(model)
        model.attach_lora(cfg.lora, seed=cfg.seed)
    model.set_mode(cfg.mode)
    return model


# -- evaluation --------------------------------------------------------------------------------
def model_logits(
    model: ViTLoRAModel, crops: Sequence[np.ndarray], tta: bool = False, batch_size: int = 64
) -> np.ndarray:
    """Eval-mode logits for uint8 crops, optionally averaged over the four quarter turns."""

    def forward(batch):
        with ad.no_grad():
            return model.forward(batch, training=False).data

    rotations = (0, 1, 2, 3) if tta else (0,)
    outs = []
    for start in range(0, len(crops), batch_size):
        chunk = crops[start : start + batch_size]
        outs.append(tta_logits(chunk, forward, normalize_imagenet, rotations))
    if not outs:
        return np.zeros((0, model.config.n_classes), dtype=np.float32)
    return np.concatenate(outs)


def evaluate_model(
    model: ViTLoRAModel,
    crops: Sequence[np.ndarray],
    records: Sequence[SampleRecord],
    tta: bool = False,
    batch_size: int = 64,
) -> EvalReport:
    logits = model_logits(model, crops, tta, batch_size)
    labels = np.array([r.label for r in records], dtype=np.int64)
    return build_report(predict_labels(logits), labels, [r.domain for r in records])


def evaluate(
    checkpoint: str | os.PathLike,
    records: Sequence[SampleRecord],
    tta: bool = False,
    batch_size: int = 64,
) -> EvalReport:
    """Pooled and per-domain balanced accuracy of a checkpoint on a manifest."""
    model = load_checkpoint(checkpoint)
    crops = load_crops(records, model.config.image_size)
    return evaluate_model(model, crops, records, tta, batch_size)


# -- training -------------------------------------------------------------------------------------
def train(
    cfg: TrainConfig,
    train_records: Sequence[SampleRecord],
    val_records: Sequence[SampleRecord] | None,
    pool: StainProfilePool | None,
    out_dir: str | os.PathLike,
    workers: int = 1,
    model: ViTLoRAModel | None = None,
) -> TrainResult:
    """Run the full recipe; writes per-epoch, best and last checkpoints plus a JSON-lines run log."""
    cfg.validate()
    _require_trainable(train_records, "training")
    if val_records is not None and not val_records:
        raise ContractError("validation manifest is empty (use no-val mode instead)")
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    atomic_write_bytes(out / "run_config.json", (json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n").encode())

    if model is None:
        model = build_model(cfg)
    else:
        model.set_mode(cfg.mode)
    size = cfg.vit.image_size
    crops = load_crops(train_records, size)
    labels = np.array([r.label for r in train_records], dtype=np.int64)
    val_crops = load_crops(val_records, size) if val_records else None
    pipeline = build_pipeline(cfg.augment, pool, cfg.seed)

    n = len(train_records)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    opt = AdamW(model.params, cfg.optim)
    trainable = {k: v for k, v in model.params.items() if v.requires_grad}

    runlog: list[dict] = []
    lr_trace: list[float] = []
    best_ba = -1.0
    best_path = ckpt_dir / "best.ckpt"
    last_path = ckpt_dir / "last.ckpt"
    step = 0
    log_path = out / "runlog.jsonl"
    log_lines: list[str] = []
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = rng_stream(cfg.seed, "shuffle", epoch).permutation(n)
        loss_sum = 0.0
        norms = []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            batch = np.stack(_map_ordered(lambda i: pipeline(crops[i], int(i), epoch), idx, workers))
            logits = model.forward(batch, training=True, rng=rng_stream(cfg.seed, "dropout", step))
            loss = focal_loss(logits, labels[idx], cfg.focal)
            opt.zero_grad()
            loss.backward()
            norms.append(global_grad_norm(trainable))
            clip_grad_norm(trainable, cfg.optim.clip_norm)
            lr = lr_at_step(step, total, cfg.optim)
            opt.step(lr)
            lr_trace.append(lr)
            loss_sum += loss.item() * len(idx)
            step += 1
        entry = {
            "epoch": epoch + 1,
            "train_loss": loss_sum / n,
            "val_balanced_accuracy": None,
            "lr": lr_trace[-1],
            "grad_norm_preclip_mean": float(np.mean(norms)),
            "grad_norm_preclip_max": float(np.max(norms)),
            "steps": step,
        }
        if val_crops is not None:
            report = evaluate_model(model, val_crops, val_records, cfg.eval_tta, cfg.eval_batch_size)
            entry["val_balanced_accuracy"] = report.balanced_accuracy
        extra = {"epoch": epoch + 1, "val_balanced_accuracy": entry["val_balanced_accuracy"]}
        save_checkpoint(model, ckpt_dir / f"epoch_{epoch + 1:03d}.ckpt", extra)
        save_checkpoint(model, last_path, extra)
        if val_crops is None or entry["val_balanced_accuracy"] > best_ba:
            if val_crops is not None:
                best_ba = entry["val_balanced_accuracy"]
            save_checkpoint(model, best_path, extra)
        entry["wall_time_s"] = time.perf_counter() - t0
        runlog.append(entry)
        log_lines.append(json.dumps(entry, sort_keys=True))
        atomic_write_bytes(log_path, ("\n".join(log_lines) + "\n").encode())
        log.info(
            "epoch %d/%d loss %.4f val_ba %s lr %.3g",
            epoch + 1,
            cfg.epochs,
            entry["train_loss"],
            entry["val_balanced_accuracy"],
            entry["lr"],
        )
    return TrainResult(last_path, best_path, runlog, total, lr_trace)


# -- cross-validation -----------------------------------------------------------------------------
def fold_seed(seed: int, fold: int) -> int:
    return int(rng_stream(seed, "fold_seed", fold).integers(0, 2**31 - 1))


def cross_validate(
    cfg: TrainConfig,
    records: Sequence[SampleRecord],
    out_dir: str | os.PathLike,
    k: int = 4,
    holdout_datasets: Sequence[str] = (),
    pool: StainProfilePool | None = None,
    workers: int = 1,
) -> dict:
    """k independent trainings; each evaluated on its validation fold and the held-out datasets."""
    plan = stratified_kfold(records, k, cfg.seed, holdout_datasets)
    holdout = [records[i] for i in plan.holdout_indices]
    folds = []
    for f in range(k):
        fcfg = TrainConfig.from_dict(cfg.to_dict())
        fcfg.seed = fold_seed(cfg.seed, f)
        train_recs = [records[i] for i in plan.train_indices(f)]
        val_recs = [records[i] for i in plan.val_indices(f)]
        result = train(fcfg, train_recs, val_recs, pool, Path(out_dir) / f"fold_{f}", workers)
        entry = {
            "fold": f,
            "seed": fcfg.seed,
            "val": evaluate(result.last_checkpoint, val_recs, cfg.eval_tta, cfg.eval_batch_size).to_dict(),
        }
        if holdout:
            entry["holdout"] = evaluate(result.last_checkpoint, holdout, cfg.eval_tta, cfg.eval_batch_size).to_dict()
        folds.append(entry)
    summary = {"folds": folds, "k": k, "std": "population"}
    for key in ("val", "holdout"):
        vals = [fo[key]["balanced_accuracy"] for fo in folds if key in fo]
        if vals:
            summary[f"{key}_ba_mean"] = float(np.mean(vals))
            summary[f"{key}_ba_std"] = float(np.std(vals))
    return summary


# -- linear probing --------------------------------------------------------------------------------
def extract_features(model: ViTLoRAModel, crops: Sequence[np.ndarray], batch_size: int = 64) -> np.ndarray:
    feats = []
    with ad.no_grad():
        for start in range(0, len(crops), batch_size):
            batch = np.stack([normalize_imagenet(c) for c in crops[start : start + batch_size]])
            feats.append(model.features(batch, training=False).data)
    return np.concatenate(feats)


def train_linear_head(
    feats: np.ndarray, labels: np.ndarray, cfg: TrainConfig, epochs: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Fit a fresh linear classifier on fixed features with the focal loss and AdamW schedule."""
    epochs = epochs or cfg.probe_epochs
    n, d = feats.shape
    init = rng_stream(cfg.seed, "probe_init")
    w = Tensor(init.standard_normal((2, d)) * 0.01, requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    params = {"weight": w, "bias": b}
    opt = AdamW(params, cfg.optim)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = epochs * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        order = rng_stream(cfg.seed, "probe_shuffle", epoch).permutation(n)
        for s in range(steps_per_epoch):
            idx = order[s * cfg.batch_size : (s + 1) * cfg.batch_size]
            logits = ad.linear(Tensor(feats[idx]), w, b)
            loss = focal_loss(logits, labels[idx], cfg.focal)
            opt.zero_grad()
            loss.backward()
            clip_grad_norm(params, cfg.optim.clip_norm)
            opt.step(lr_at_step(step, total, cfg.optim))
            step += 1
    return w.data.copy(), b.data.copy()


def linear_probe(
    checkpoint: str | os.PathLike | ViTLoRAModel,
    train_records: Sequence[SampleRecord],
    test_records: Sequence[SampleRecord],
    cfg: TrainConfig | None = None,
) -> float:
    """Balanced accuracy of a linear classifier trained on frozen classification-token features."""
    cfg = cfg or TrainConfig()
    _require_trainable(train_records, "probe training")
    model = checkpoint if isinstance(checkpoint, ViTLoRAModel) else load_checkpoint(checkpoint)
    size = model.config.image_size
    f_train = extract_features(model, load_crops(train_records, size), cfg.eval_batch_size)
    f_test = extract_features(model, load_crops(test_records, size), cfg.eval_batch_size)
    y_train = np.array([r.label for r in train_records], dtype=np.int64)
    y_test = np.array([r.label for r in test_records], dtype=np.int64)
    w, b = train_linear_head(f_train, y_train, cfg)
    logits = f_test @ w.T + b
    return build_report(predict_labels(logits), y_test).balanced_accuracy
