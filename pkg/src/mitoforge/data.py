"""Manifests, duplicate removal, stratified folds, dataset statistics and a synthetic crop generator."""
from __future__ import annotations

import csv
import hashlib
import io
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .checkpoint import atomic_write_bytes
from .errors import ContractError, ManifestError
from .rng import rng_stream

LABELS = {"normal": 0, "atypical": 1, "0": 0, "1": 1}
LABEL_NAMES = ("normal", "atypical")
MANIFEST_COLUMNS = ("path", "label", "domain", "dataset")


@dataclass(frozen=True)
class SampleRecord:
    path: str
    label: int
    domain: str
    dataset: str

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ContractError(f"label must be 0 or 1, got {self.label!r}")
        if not self.path:
            raise ContractError("record path is empty")


def parse_manifest(path: str | os.PathLike) -> list[SampleRecord]:
    """Read a ``path,label,domain,dataset`` CSV; relative paths resolve against the manifest's folder."""
    path = Path(path)
    root = path.parent
    records: list[SampleRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ManifestError("empty file, expected header path,label,domain,dataset", line=1)
        header = [h.strip().lower() for h in header]
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"missing column(s) {missing}", line=1)
        col = {c: header.index(c) for c in MANIFEST_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < len(header):
                raise ManifestError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            raw_label = row[col["label"]].strip().lower()
            if raw_label not in LABELS:
                raise ManifestError(f"unknown label {row[col['label']]!r} (expected normal/atypical)", line=lineno)
            rel = row[col["path"]].strip()
            if not rel:
                raise ManifestError("empty path", line=lineno)
            full = rel if os.path.isabs(rel) else str(root / rel)
            records.append(
                SampleRecord(full, LABELS[raw_label], row[col["domain"]].strip(), row[col["dataset"]].strip())
            )
    return records


def write_manifest(records: Sequence[SampleRecord], path: str | os.PathLike, relative_to: str | None = None) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for r in records:
        p = os.path.relpath(r.path, relative_to) if relative_to else r.path
        writer.writerow([p, LABEL_NAMES[r.label], r.domain, r.dataset])
    atomic_write_bytes(path, buf.getvalue().encode("utf-8"))


def load_image(path: str | os.PathLike) -> np.ndarray:
    """Decode an image file to (H, W, 3) uint8 RGB."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def save_png(img: np.ndarray, path: str | os.PathLike) -> None:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(img, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def _pixel_key(img: np.ndarray) -> bytes:
    return np.asarray(img.shape, dtype="<u4").tobytes() + np.ascontiguousarray(img).tobytes()


def dedup_exact(records: Sequence[SampleRecord]) -> tuple[list[SampleRecord], int]:
    """Drop records whose decoded pixels exactly repeat an earlier record's."""
    seen: dict[bytes, list[bytes]] = {}
    kept: list[SampleRecord] = []
    removed = 0
    for rec in records:
        key = _pixel_key(load_image(rec.path))
        digest = hashlib.blake2b(key, digest_size=8).digest()
        bucket = seen.setdefault(digest, [])
        if any(prev == key for prev in bucket):
            removed += 1
            continue
        bucket.append(key)
        kept.append(rec)
    return kept, removed


@dataclass
class FoldPlan:
    k: int
    assignments: dict[int, int]
    holdout: tuple[str, ...] = ()
    holdout_indices: list[int] = field(default_factory=list)
    seed: int = 0

    def val_indices(self, fold: int) -> list[int]:
        return sorted(i for i, f in self.assignments.items() if f == fold)

    def train_indices(self, fold: int) -> list[int]:
        return sorted(i for i, f in self.assignments.items() if f != fold)

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "holdout": list(self.holdout),
            "holdout_indices": list(self.holdout_indices),
            "folds": [self.val_indices(f) for f in range(self.k)],
        }


def stratified_kfold(
    records: Sequence[SampleRecord], k: int = 4, seed: int = 0, holdout_datasets: Iterable[str] = ()
) -> FoldPlan:
    """Per-class seeded shuffle, then one round-robin sweep across folds continuing over classes."""
    if k < 2:
        raise ContractError(f"k must be >= 2, got {k}")
    holdout = tuple(sorted(set(holdout_datasets)))
    held = [i for i, r in enumerate(records) if r.dataset in holdout]
    pool = [i for i, r in enumerate(records) if r.dataset not in holdout]
    by_class = {c: [i for i in pool if records[i].label == c] for c in (0, 1)}
    for c, idx in by_class.items():
        if len(idx) < k:
            raise ContractError(f"class {LABEL_NAMES[c]} has {len(idx)} non-holdout samples, fewer than k={k}")
    assignments: dict[int, int] = {}
    cursor = 0
    for c in (0, 1):
        idx = np.asarray(by_class[c])
        perm = idx[rng_stream(seed, "kfold", c).permutation(len(idx))]
        for i in perm:
            assignments[int(i)] = cursor % k
            cursor += 1
    return FoldPlan(k, dict(sorted(assignments.items())), holdout, held, seed)


def dataset_stats(records: Sequence[SampleRecord]) -> dict:
    """Class counts per dataset and overall, with atypical fractions."""

    def summary(normal: int, atypical: int) -> dict:
        total = normal + atypical
        return {
            "normal": normal,
            "atypical": atypical,
            "total": total,
            "atypical_fraction": atypical / total if total else 0.0,
        }

    counts: dict[str, Counter] = {}
    for r in records:
        counts.setdefault(r.dataset, Counter())[r.label] += 1
    per = {name: summary(c[0], c[1]) for name, c in sorted(counts.items())}
    n_norm = sum(v["normal"] for v in per.values())
    n_aty = sum(v["atypical"] for v in per.values())
    return {"datasets": per, "total": summary(n_norm, n_aty)}


# -- synthetic H&E-like crops ------------------------------------------------------------
SYNTH_SIZE = 128

# (hematoxylin OD vector, eosin OD vector, background eosin level)
_PALETTES = [
    ((0.650, 0.704, 0.286), (0.072, 0.990, 0.105), 0.35),
    ((0.560, 0.760, 0.330), (0.200, 0.930, 0.300), 0.50),
    ((0.740, 0.620, 0.300), (0.050, 0.960, 0.150), 0.22),
    ((0.480, 0.780, 0.400), (0.120, 0.960, 0.250), 0.42),
    ((0.700, 0.680, 0.330), (0.300, 0.920, 0.120), 0.30),
    ((0.600, 0.650, 0.460), (0.020, 0.980, 0.200), 0.55),
]


def domain_palette(domain_index: int) -> tuple[np.ndarray, float]:
    """Stain matrix (3x2, unit columns) and background eosin level for a synthetic domain."""
    if domain_index < len(_PALETTES):
        h, e, bg = _PALETTES[domain_index]
        h, e = np.asarray(h), np.asarray(e)
    else:
        rng = rng_stream(0, "synth_palette", domain_index)
        h = np.asarray(_PALETTES[0][0]) + rng.uniform(-0.25, 0.25, 3)
        e = np.asarray(_PALETTES[0][1]) + rng.uniform(-0.25, 0.25, 3)
        h, e = np.clip(h, 0.02, None), np.clip(e, 0.02, None)
        bg = float(rng.uniform(0.2, 0.6))
    s = np.stack([h / np.linalg.norm(h), e / np.linalg.norm(e)], axis=1)
    return s, float(bg)


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return n / (n.std() + 1e-12)


def _soft(dist: np.ndarray) -> np.ndarray:
    # dist < 0 inside the shape; ~1px soft edge.
    return 1.0 / (1.0 + np.exp(np.clip(dist / 0.8, -50, 50)))


def blob_mask(label: int, rng: np.random.Generator, size: int = SYNTH_SIZE) -> np.ndarray:
    """Soft mask of the mitotic figure.

    Normal figures are near-round discs. Atypical ones are elongated or multi-lobed
    and carry a few small detached chromatin fragments.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    cy, cx = c + rng.uniform(-3, 3), c + rng.uniform(-3, 3)
    if label == 0:
        r = rng.uniform(13.0, 18.0)
        ratio = rng.uniform(1.0, 1.15)
        th = rng.uniform(0, math.pi)
        u = (xx - cx) * math.cos(th) + (yy - cy) * math.sin(th)
        v = -(xx - cx) * math.sin(th) + (yy - cy) * math.cos(th)
        return _soft((np.sqrt((u / ratio) ** 2 + v**2) - r / math.sqrt(ratio)))
    if rng.random() < 0.5:
        a, b = rng.uniform(30.0, 40.0), rng.uniform(7.0, 10.0)
        th = rng.uniform(0, math.pi)
        u = (xx - cx) * math.cos(th) + (yy - cy) * math.sin(th)
        v = -(xx - cx) * math.sin(th) + (yy - cy) * math.cos(th)
        rho = np.sqrt((u / a) ** 2 + (v / b) ** 2)
        mask = _soft((rho - 1.0) * b)
    else:
        n_lobes = int(rng.integers(3, 6))
        base = rng.uniform(0, 2 * math.pi)
        mask = np.zeros((size, size))
        for j in range(n_lobes):
            ang = base + 2 * math.pi * j / n_lobes + rng.uniform(-0.3, 0.3)
            d = rng.uniform(20.0, 27.0)
            ly, lx = cy + d * math.sin(ang), cx + d * math.cos(ang)
            r = rng.uniform(8.0, 11.0)
            mask = np.maximum(mask, _soft(np.sqrt((yy - ly) ** 2 + (xx - lx) ** 2) - r))
    # lagging chromosome fragments scattered around the figure
    for _ in range(int(rng.integers(3, 7))):
        ang = rng.uniform(0, 2 * math.pi)
        d = rng.uniform(24.0, 36.0)
        fy, fx = cy + d * math.sin(ang), cx + d * math.cos(ang)
        mask = np.maximum(mask, _soft(np.sqrt((yy - fy) ** 2 + (xx - fx) ** 2) - rng.uniform(2.5, 4.0)))
    return mask


def render_crop(label: int, domain_index: int, rng: np.random.Generator, size: int = SYNTH_SIZE) -> np.ndarray:
    """Beer-Lambert rendering of one synthetic crop."""
    stains, bg = domain_palette(domain_index)
    eosin = bg * np.clip(1.0 + 0.25 * _smooth_noise(rng, size, 4.0), 0.2, None)
    hema = np.clip(0.06 + 0.03 * _smooth_noise(rng, size, 2.0), 0.0, None)
    mask = blob_mask(label, rng, size)
    chrom = rng.uniform(0.9, 1.3) * np.clip(1.0 + 0.12 * _smooth_noise(rng, size, 1.5), 0.3, None)
    hema = hema + mask * chrom
    eosin = eosin * (1.0 - 0.6 * mask)
    od = hema[..., None] * stains[:, 0] + eosin[..., None] * stains[:, 1]
    rgb = 255.0 * np.power(10.0, -od) + rng.normal(0.0, 2.0, od.shape)
    return np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)


def synth_generate(
    n: int,
    atypical_frac: float,
    n_domains: int,
    seed: int,
    out_dir: str | os.PathLike,
    domain_offset: int = 0,
    dataset: str = "synthetic",
    manifest_name: str = "manifest.csv",
) -> Path:
    """Write ``n`` PNG crops plus a manifest; exactly round(n * atypical_frac) are atypical."""
    if n < 1:
        raise ContractError("n must be >= 1")
    if not 0.0 < atypical_frac < 1.0:
        raise ContractError("atypical_frac must be in (0, 1)")
    if n_domains < 1:
        raise ContractError("n_domains must be >= 1")
    out = Path(out_dir)
    img_dir = out / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {img_dir}: {exc}") from exc
    n_aty = int(math.floor(n * atypical_frac + 0.5))
    labels = np.zeros(n, dtype=np.int64)
    labels[:n_aty] = 1
    labels = labels[rng_stream(seed, "synth_labels").permutation(n)]
    domains = rng_stream(seed, "synth_domains").integers(0, n_domains, n)
    records = []
    for i in range(n):
        d = int(domains[i]) + domain_offset
        img = render_crop(int(labels[i]), d, rng_stream(seed, "synth_crop", i))
        rel = f"images/{dataset}_{i:05d}.png"
        save_png(img, out / rel)
        records.append(SampleRecord(str(out / rel), int(labels[i]), f"domain{d}", dataset))
    manifest = out / manifest_name
    write_manifest(records, manifest, relative_to=str(out))
    return manifest
