"""Command-line entry point: ``mitoforge <subcommand> [flags]``.

JSON results go to stdout and logs to stderr. Exit status is 0 on success,
1 for invalid input (flags, configs, manifests, checkpoints) and 2 for
failures while running.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, FormatError, MitoforgeError

log = logging.getLogger("mitoforge")

VALIDATION_ERRORS = (ConfigError, ContractError, DimensionError, FormatError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _available_cores() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _emit(payload) -> None:
    sys.stdout.write(json.dumps(_jsonable(payload), sort_keys=True) + "\n")
    sys.stdout.flush()


def _resolve_seed(flag: int | None, file_value: int | None = None) -> int:
    """Flag, then config file, then MITOFORGE_SEED, then 0."""
    if flag is not None:
        return flag
    if file_value is not None:
        return int(file_value)
    env = os.environ.get("MITOFORGE_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise ConfigError(f"MITOFORGE_SEED must be an integer, got {env!r}") from exc


def _read_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


def _holdouts(values) -> list[str]:
    out = []
    for v in values or ():
        out.extend(s for s in v.split(",") if s)
    return out


def _load_pool(path: str | None):
    from .stain import StainProfilePool

    return StainProfilePool.load(path) if path else None


# -- subcommands ---------------------------------------------------------------------------------
def cmd_synth_data(args) -> int:
    from .data import dataset_stats, parse_manifest, synth_generate

    seed = _resolve_seed(args.seed)
    manifest = synth_generate(
        args.n, args.atypical_frac, args.domains, seed, args.out, args.domain_offset, args.dataset
    )
    _emit({"manifest": manifest, "seed": seed, "stats": dataset_stats(parse_manifest(manifest))})
    return 0


def cmd_stain_fit(args) -> int:
    from .data import load_image, parse_manifest
    from .stain import build_pool

    seed = _resolve_seed(args.seed)
    records = parse_manifest(args.manifest)
    pool = build_pool(((r.domain, load_image(r.path)) for r in records), args.per_domain, seed)
    if not pool.domains:
        raise ContractError("no domain yielded a usable stain reference")
    pool.save(args.out)
    _emit({"pool": args.out, "seed": seed, "references": {d: len(p) for d, p in pool.domains.items()}})
    return 0


def cmd_cv_split(args) -> int:
    from .data import parse_manifest, stratified_kfold

    plan = stratified_kfold(parse_manifest(args.manifest), args.k, _resolve_seed(args.seed), _holdouts(args.holdout))
    _emit(plan.to_dict())
    return 0


def _train_config(args):
    from .train import TrainConfig

    file_cfg = _read_json(args.config) if args.config else {}
    cfg = TrainConfig.from_dict(file_cfg)
    cfg.seed = _resolve_seed(args.seed, file_cfg.get("seed"))
    for flag, attr in (("epochs", "epochs"), ("batch_size", "batch_size"), ("mode", "mode")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, value)
    if getattr(args, "init_checkpoint", None):
        cfg.init_checkpoint = args.init_checkpoint
    if getattr(args, "tta", False):
        cfg.eval_tta = True
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    from .data import parse_manifest
    from .train import train

    cfg = _train_config(args)
    if args.no_val and args.val_manifest:
        raise ConfigError("--no-val and --val-manifest are mutually exclusive")
    if not args.no_val and not args.val_manifest:
        raise ConfigError("--val-manifest is required unless --no-val is given")
    train_records = parse_manifest(args.manifest)
    val_records = None if args.no_val else parse_manifest(args.val_manifest)
    result = train(cfg, train_records, val_records, _load_pool(args.stain_pool), args.out, args.workers)
    _emit(
        {
            "config": cfg.to_dict(),
            "last_checkpoint": result.last_checkpoint,
            "best_checkpoint": result.best_checkpoint,
            "total_steps": result.total_steps,
            "final": result.runlog[-1],
        }
    )
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import atomic_write_bytes
    from .data import parse_manifest
    from .train import evaluate

    report = evaluate(args.checkpoint, parse_manifest(args.manifest), args.tta, args.batch_size)
    if args.out:
        atomic_write_bytes(args.out, (report.to_json() + "\n").encode())
    _emit(report.to_dict())
    return 0


def cmd_predict(args) -> int:
    from .augment import normalize_imagenet, resize_bilinear
    from .checkpoint import load_checkpoint
    from .data import load_image
    from .metrics import TTA_ROTATIONS, softmax_np, tta_predict

    model = load_checkpoint(args.checkpoint)
    img = load_image(args.image)
    size = model.config.image_size
    if img.shape[:2] != (size, size):
        img = resize_bilinear(img, size, size)
    logits = tta_predict(img, model, normalize_imagenet, TTA_ROTATIONS if args.tta else (0,))
    prob = float(softmax_np(logits)[1])
    label = "atypical" if logits[1] > logits[0] else "normal"
    _emit({"logits": [float(v) for v in logits], "prob_atypical": prob, "label": label})
    return 0


def cmd_augment_preview(args) -> int:
    from .augment import AugmentConfig, build_pipeline
    from .checkpoint import atomic_write_bytes
    from .data import load_image, parse_manifest, save_png

    if bool(args.image) == bool(args.manifest):
        raise ConfigError("give exactly one of --image or --manifest")
    cfg = AugmentConfig.from_dict(_read_json(args.config)) if args.config else AugmentConfig()
    cfg.validate()
    seed = _resolve_seed(args.seed)
    if args.image:
        sources = [(args.image, load_image(args.image))] * args.rows
    else:
        records = parse_manifest(args.manifest)[: args.rows]
        if len(records) < args.rows:
            raise ContractError(f"manifest has {len(records)} rows, preview needs {args.rows}")
        sources = [(str(r.path), load_image(r.path)) for r in records]
    shapes = {img.shape for _, img in sources}
    if len(shapes) != 1:
        raise ContractError(f"preview images must share one shape, got {sorted(shapes)}")
    pipeline = build_pipeline(cfg, _load_pool(args.stain_pool), seed)
    h, w, _ = sources[0][1].shape
    sheet = np.zeros((args.rows * h, args.cols * w, 3), dtype=np.uint8)
    cells = []
    for r, (path, img) in enumerate(sources):
        for c in range(args.cols):
            out, params = pipeline.augment(img, r, c)
            sheet[r * h : (r + 1) * h, c * w : (c + 1) * w] = out
            cells.append({"row": r, "col": c, "source": path, "index": r, "epoch": c, "params": params})
    out_png = Path(args.out)
    save_png(sheet, out_png)
    sidecar = out_png.with_suffix(".json")
    meta = {"seed": seed, "rows": args.rows, "cols": args.cols, "config": cfg.to_dict(), "cells": cells}
    atomic_write_bytes(sidecar, (json.dumps(_jsonable(meta), indent=2, sort_keys=True) + "\n").encode())
    _emit({"sheet": out_png, "sidecar": sidecar, "cells": len(cells)})
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import TOLERANCE, run_suite

    results, seconds = run_suite(args.instances, _resolve_seed(args.seed))
    ok = all(r.passed for r in results)
    _emit({"passed": ok, "tolerance": TOLERANCE, "seconds": seconds, "ops": [r.to_dict() for r in results]})
    for r in results:
        if not r.passed:
            log.error("%s: relative error %.3g exceeds %.0e", r.op, r.max_rel_error, TOLERANCE)
    return 0 if ok else 2


def cmd_stats(args) -> int:
    from .data import dataset_stats, dedup_exact, parse_manifest

    records = parse_manifest(args.manifest)
    payload = {"stats": dataset_stats(records)}
    if args.dedup:
        kept, dropped = dedup_exact(records)
        payload["duplicates_removed"] = dropped
        payload["stats_after_dedup"] = dataset_stats(kept)
    _emit(payload)
    return 0


def cmd_cross_validate(args) -> int:
    from .data import parse_manifest
    from .train import cross_validate

    cfg = _train_config(args)
    summary = cross_validate(
        cfg, parse_manifest(args.manifest), args.out, args.k, _holdouts(args.holdout), _load_pool(args.stain_pool), args.workers
    )
    summary["config"] = cfg.to_dict()
    _emit(summary)
    return 0


def cmd_probe(args) -> int:
    from .data import parse_manifest
    from .train import linear_probe

    cfg = _train_config(args)
    ba = linear_probe(args.checkpoint, parse_manifest(args.manifest), parse_manifest(args.test_manifest), cfg)
    _emit({"balanced_accuracy": ba, "config": cfg.to_dict()})
    return 0


# -- parser ----------------------------------------------------------------------------------------
def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _add_train_flags(p, with_io: bool = True) -> None:
    from .vit import MODES

    p.add_argument("--config", help="JSON TrainConfig overlay; flags take precedence")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--init-checkpoint")
    p.add_argument("--tta", action="store_true", help="evaluate with four-rotation TTA")
    if with_io:
        p.add_argument("--workers", type=_positive_int, default=_available_cores())
        p.add_argument("--stain-pool", help="stain profile pool JSON from stain-fit")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mitoforge", description="Atypical-mitosis classification toolkit.")
    parser.add_argument("--log-level", default="INFO", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="render a synthetic labelled crop set")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--atypical-frac", type=float, default=0.2)
    p.add_argument("--domains", type=_positive_int, default=3)
    p.add_argument("--domain-offset", type=int, default=0)
    p.add_argument("--dataset", default="synthetic")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("stain-fit", help="fit per-domain Macenko reference profiles")
    p.add_argument("--manifest", required=True)
    p.add_argument("--per-domain", type=_positive_int, default=10)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stain_fit)

    p = sub.add_parser("cv-split", help="stratified k-fold plan with optional held-out datasets")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=_positive_int, default=4)
    p.add_argument("--seed", type=int)
    p.add_argument("--holdout", action="append", help="dataset name; repeat or comma-separate")
    p.set_defaults(func=cmd_cv_split)

    p = sub.add_parser("train", help="train a classifier")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--no-val", action="store_true", help="train without validation; keeps the last checkpoint")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="balanced accuracy of a checkpoint on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tta", action="store_true")
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.add_argument("--out", help="also write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="classify one image")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tta", action="store_true")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("augment-preview", help="contact sheet of augmented samples")
    p.add_argument("--image")
    p.add_argument("--manifest")
    p.add_argument("--rows", type=_positive_int, default=4)
    p.add_argument("--cols", type=_positive_int, default=6)
    p.add_argument("--config", help="JSON AugmentConfig")
    p.add_argument("--stain-pool")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="PNG path; the sidecar gets a .json suffix")
    p.set_defaults(func=cmd_augment_preview)

    p = sub.add_parser("gradcheck", help="finite-difference check of every autodiff op")
    p.add_argument("--instances", type=_positive_int, default=20)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("stats", help="per-dataset class counts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--dedup", action="store_true", help="also report counts after exact deduplication")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("cross-validate", help="k independent trainings over a stratified fold plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=_positive_int, default=4)
    p.add_argument("--holdout", action="append")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_cross_validate)

    p = sub.add_parser("probe", help="linear probe on frozen classification-token features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    _add_train_flags(p, with_io=False)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return 1
    logging.basicConfig(
        stream=sys.stderr, level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    except (MitoforgeError, OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
