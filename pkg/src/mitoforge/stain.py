"""Macenko stain estimation, normalization and multi-reference stain transfer.

Optical density uses log10 with incident light 255 and intensities floored at 1.
Stain matrices are 3x2 with unit, non-negative columns, hematoxylin first.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractError, DegenerateInputError, FormatError, NumericError

log = logging.getLogger(__name__)

OD_THRESHOLD = 0.15
ANGLE_PERCENTILE = 1.0
MIN_TISSUE_FRACTION = 0.005
CONC_PERCENTILE = 99.0
# Smallest second/first eigenvalue ratio accepted as a genuine two-stain cloud.
MIN_PLANE_RATIO = 1e-3


def rgb_to_od(img: np.ndarray) -> np.ndarray:
    """(H, W, 3) or (N, 3) uint8 -> (N, 3) float64 optical density."""
    px = np.asarray(img).reshape(-1, 3).astype(np.float64)
    return -np.log10(np.maximum(px, 1.0) / 255.0)


def od_to_rgb(od: np.ndarray, shape: tuple | None = None) -> np.ndarray:
    rgb = np.clip(np.floor(255.0 * np.power(10.0, -np.asarray(od, dtype=np.float64)) + 0.5), 0, 255)
    rgb = rgb.astype(np.uint8)
    return rgb.reshape(shape) if shape is not None else rgb


def jacobi_eigh(a: np.ndarray, tol: float = 1e-15, max_sweeps: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a small symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in descending order and the matching unit eigenvectors
    as columns.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n) or not np.allclose(a, a.T, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ContractError("jacobi_eigh needs a square symmetric matrix")
    v = np.eye(n)
    scale = max(np.abs(a).max(), np.finfo(float).tiny)
    for _ in range(max_sweeps):
        off = math.sqrt(sum(a[i, j] ** 2 for i in range(n) for j in range(n) if i != j))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
                v = v @ rot
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], v[:, order]


def _tissue_mask(od: np.ndarray, beta: float) -> np.ndarray:
    return np.linalg.norm(od, axis=1) > beta


def _orient(vec: np.ndarray) -> np.ndarray:
    if vec.sum() < 0:
        vec = -vec
    vec = np.clip(vec, 0.0, None)
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise DegenerateInputError("stain direction collapsed to zero after sign correction")
    return vec / norm


def order_hematoxylin_first(s: np.ndarray) -> np.ndarray:
    """Put the column with the larger blue OD component first."""
    if s[2, 1] > s[2, 0]:
        return s[:, ::-1].copy()
    return s


def estimate_stain_matrix(
    img: np.ndarray, beta: float = OD_THRESHOLD, angle_percentile: float = ANGLE_PERCENTILE
) -> np.ndarray:
    """Macenko: extreme angles of tissue OD in its top-2 eigenplane -> 3x2 stain matrix."""
    od = rgb_to_od(img)
    tissue = od[_tissue_mask(od, beta)]
    if tissue.shape[0] < max(2, MIN_TISSUE_FRACTION * od.shape[0]):
        raise DegenerateInputError(
            f"insufficient tissue: {tissue.shape[0]} of {od.shape[0]} pixels exceed OD {beta}"
        )
    cov = np.cov(tissue, rowvar=False)
    vals, vecs = jacobi_eigh(cov)
    if vals[0] <= 0 or vals[1] <= MIN_PLANE_RATIO * vals[0]:
        raise DegenerateInputError("OD cloud is rank-1 (single stain); cannot separate two stains")
    plane = vecs[:, :2].copy()
    for j in range(2):
        if plane[:, j].sum() < 0:
            plane[:, j] = -plane[:, j]
    proj = tissue @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo = np.percentile(phi, angle_percentile)
    hi = np.percentile(phi, 100.0 - angle_percentile)
    v1 = _orient(plane @ np.array([math.cos(lo), math.sin(lo)]))
    v2 = _orient(plane @ np.array([math.cos(hi), math.sin(hi)]))
    if float(np.dot(v1, v2)) > math.cos(math.radians(0.5)):
        raise DegenerateInputError("extreme stain directions coincide; single-stain image")
    return order_hematoxylin_first(np.stack([v1, v2], axis=1))


def compute_concentrations(od: np.ndarray, stain_matrix: np.ndarray) -> np.ndarray:
    """Least-squares solve OD ~ C S^T for non-negative concentrations, (N, 2)."""
    s = np.asarray(stain_matrix, dtype=np.float64)
    sv = np.linalg.svd(s, compute_uv=False)
    if sv[-1] <= 1e-8 * max(sv[0], 1e-300):
        raise NumericError("stain matrix is rank-deficient")
    conc = np.asarray(od, dtype=np.float64).reshape(-1, 3) @ np.linalg.pinv(s).T
    return np.clip(conc, 0.0, None)


@dataclass
class StainProfile:
    stain_matrix: np.ndarray
    max_conc: np.ndarray
    domain: str = ""
    n_references: int = 1

    def __post_init__(self):
        self.stain_matrix = np.asarray(self.stain_matrix, dtype=np.float64).reshape(3, 2)
        self.max_conc = np.asarray(self.max_conc, dtype=np.float64).reshape(2)
        norms = np.linalg.norm(self.stain_matrix, axis=0)
        if not np.allclose(norms, 1.0, atol=1e-6) or (self.stain_matrix < -1e-12).any():
            raise FormatError("stain_matrix: columns must be unit-norm and non-negative")
        if not (self.max_conc > 0).all():
            raise FormatError("max_conc: both entries must be positive")
        if self.n_references < 1:
            raise FormatError("n_references: must be >= 1")

    def to_dict(self) -> dict:
        return {
            "domain": self.domain,
            "stain_matrix": self.stain_matrix.tolist(),
            "max_conc": self.max_conc.tolist(),
            "n_references": int(self.n_references),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StainProfile":
        try:
            return cls(d["stain_matrix"], d["max_conc"], d["domain"], int(d["n_references"]))
        except KeyError as exc:
            raise FormatError(f"stain profile missing field {exc}") from exc


def fit_profile(
    img: np.ndarray,
    beta: float = OD_THRESHOLD,
    angle_percentile: float = ANGLE_PERCENTILE,
    domain: str = "",
) -> StainProfile:
    s = estimate_stain_matrix(img, beta, angle_percentile)
    od = rgb_to_od(img)
    conc = compute_concentrations(od[_tissue_mask(od, beta)], s)
    max_conc = np.percentile(conc, CONC_PERCENTILE, axis=0)
    if not (max_conc > 0).all():
        raise DegenerateInputError("a stain has zero 99th-percentile concentration")
    return StainProfile(s, max_conc, domain, 1)


def aggregate_profiles(profiles) -> StainProfile:
    """Mean of unit stain vectors (re-normalized) and mean max concentrations."""
    profiles = list(profiles)
    if not profiles:
        raise ContractError("aggregate_profiles needs at least one profile")
    domains = {p.domain for p in profiles}
    if len(domains) != 1:
        raise ContractError(f"profiles span several domains: {sorted(domains)}")
    if len(profiles) == 1:
        p = profiles[0]
        return StainProfile(p.stain_matrix.copy(), p.max_conc.copy(), p.domain, p.n_references)
    # Sorting the stacked values makes the float sums independent of list order.
    mats = np.sort(np.stack([p.stain_matrix for p in profiles]), axis=0)
    concs = np.sort(np.stack([p.max_conc for p in profiles]), axis=0)
    mean_s = mats.sum(axis=0) / len(profiles)
    mean_s = mean_s / np.linalg.norm(mean_s, axis=0, keepdims=True)
    return StainProfile(
        order_hematoxylin_first(mean_s), concs.sum(axis=0) / len(profiles), profiles[0].domain, len(profiles)
    )


def normalize_to_profile(
    img: np.ndarray,
    target: StainProfile,
    beta: float = OD_THRESHOLD,
    angle_percentile: float = ANGLE_PERCENTILE,
    source: StainProfile | None = None,
) -> np.ndarray:
    """Re-render ``img`` with the target's stain vectors and concentration scale."""
    img = np.asarray(img)
    if source is None:
        source = fit_profile(img, beta, angle_percentile)
    od = rgb_to_od(img)
    conc = compute_concentrations(od, source.stain_matrix)
    conc = conc * (target.max_conc / source.max_conc)
    return od_to_rgb(conc @ target.stain_matrix.T, img.shape)


class StainProfilePool:
    """Per-domain lists of reference profiles."""

    def __init__(self, domains: dict[str, list[StainProfile]] | None = None):
        self.domains: dict[str, list[StainProfile]] = {}
        for name, profiles in sorted((domains or {}).items()):
            if not profiles:
                raise ContractError(f"domain {name!r} has no profiles")
            self.domains[name] = list(profiles)

    def __len__(self) -> int:
        return len(self.domains)

    def __bool__(self) -> bool:
        return bool(self.domains)

    def names(self) -> list[str]:
        return sorted(self.domains)

    def to_dict(self) -> dict:
        return {name: [p.to_dict() for p in self.domains[name]] for name in self.names()}

    def save(self, path: str | os.PathLike) -> None:
        from .checkpoint import atomic_write_bytes

        atomic_write_bytes(path, (json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n").encode("utf-8"))

    @classmethod
    def from_dict(cls, d: dict) -> "StainProfilePool":
        if not isinstance(d, dict):
            raise FormatError("stain pool must be a JSON object mapping domain -> profiles")
        return cls({name: [StainProfile.from_dict(p) for p in plist] for name, plist in d.items()})

    @classmethod
    def load(cls, path: str | os.PathLike) -> "StainProfilePool":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(data)


def sample_references(pool: StainProfilePool, rng: np.random.Generator) -> tuple[str, list[StainProfile]]:
    """Uniform domain, uniform reference count k, then k profiles without replacement."""
    if not pool:
        raise ContractError("stain pool is empty")
    names = pool.names()
    domain = names[int(rng.integers(len(names)))]
    refs = pool.domains[domain]
    k = int(rng.integers(1, len(refs) + 1))
    chosen = sorted(int(i) for i in rng.choice(len(refs), size=k, replace=False))
    return domain, [refs[i] for i in chosen]


def sample_stain_augmentation(
    img: np.ndarray, pool: StainProfilePool, rng: np.random.Generator
) -> np.ndarray:
    """Stain-transfer ``img`` to a randomly aggregated reference; identity on degenerate input."""
    _, refs = sample_references(pool, rng)
    target = aggregate_profiles(refs)
    try:
        return normalize_to_profile(img, target)
    except (DegenerateInputError, NumericError) as exc:
        log.debug("stain augmentation skipped: %s", exc)
        return np.array(img, copy=True)


def build_pool(samples, per_domain: int = 10, seed: int = 0) -> StainProfilePool:
    """Fit up to ``per_domain`` reference profiles per domain from ``(domain, image)`` pairs.

    Candidates are visited in a seeded order; crops whose stains cannot be
    estimated are skipped.
    """
    import zlib

    from .rng import rng_stream

    grouped: dict[str, list[np.ndarray]] = {}
    for domain, img in samples:
        grouped.setdefault(domain, []).append(img)
    domains = {}
    for domain, imgs in sorted(grouped.items()):
        order = rng_stream(seed, "stain_pool", zlib.crc32(domain.encode("utf-8"))).permutation(len(imgs))
        profiles = []
        for i in order:
            try:
                p = fit_profile(imgs[int(i)], domain=domain)
            except (DegenerateInputError, NumericError):
                continue
            profiles.append(p)
            if len(profiles) == per_domain:
                break
        if profiles:
            domains[domain] = profiles
        else:
            log.warning("domain %s: no usable stain reference", domain)
    return StainProfilePool(domains)
