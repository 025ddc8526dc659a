"""Online augmentation stack and preprocessing for 8-bit RGB crops.

Images are ``(H, W, 3)`` uint8 arrays. Each random transform is split into a
parameter sampler (``sample_*``) and a deterministic ``apply``-style function,
so the pipeline can record exactly what it drew for every sample.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Any

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError, DegenerateInputError, NumericError
from .rng import rng_stream
from .stain import StainProfilePool, aggregate_profiles, normalize_to_profile, sample_references

log = logging.getLogger(__name__)

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)
LUMA = np.array([0.299, 0.587, 0.114])

# Standard JPEG (Annex K) quantization tables.
JPEG_LUMA_Q = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)
JPEG_CHROMA_Q = np.array(
    [
        [17, 18, 24, 47, 99, 99, 99, 99],
        [18, 21, 26, 66, 99, 99, 99, 99],
        [24, 26, 56, 99, 99, 99, 99, 99],
        [47, 66, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
        [99, 99, 99, 99, 99, 99, 99, 99],
    ],
    dtype=np.float64,
)


def _dct_matrix(n: int = 8) -> np.ndarray:
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    m = np.sqrt(2.0 / n) * np.cos(np.pi * (2 * x + 1) * k / (2 * n))
    m[0] /= np.sqrt(2.0)
    return m


DCT8 = _dct_matrix()


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(x, dtype=np.float64) + 0.5), 0, 255).astype(np.uint8)


# -- configuration -------------------------------------------------------------------
@dataclass
class StainAugConfig:
    enabled: bool = True
    p: float = 0.5


@dataclass
class ColorJitterConfig:
    enabled: bool = True
    p: float = 0.5
    brightness: tuple = (0.8, 1.2)
    contrast: tuple = (0.8, 1.2)
    saturation: tuple = (0.8, 1.2)


@dataclass
class JpegConfig:
    enabled: bool = True
    p: float = 0.5
    quality: tuple = (30, 90)


@dataclass
class BlurConfig:
    enabled: bool = True
    p: float = 0.5
    radius: tuple = (0, 3)


@dataclass
class AffineConfig:
    enabled: bool = True
    p: float = 0.5
    rotation: tuple = (-15.0, 15.0)
    scale: tuple = (0.9, 1.1)
    translate: float = 0.1
    shear: tuple = (-5.0, 5.0)


@dataclass
class D4Config:
    enabled: bool = True
    p: float = 0.5


@dataclass
class CoarseDropoutConfig:
    enabled: bool = True
    p: float = 0.5
    max_boxes: int = 2
    size: tuple = (8, 32)


@dataclass
class BlackBorderConfig:
    enabled: bool = True
    p: float = 0.5
    side_p: float = 0.5
    width: tuple = (1, 24)


_SECTIONS = {
    "stain": StainAugConfig,
    "color_jitter": ColorJitterConfig,
    "jpeg": JpegConfig,
    "blur": BlurConfig,
    "affine": AffineConfig,
    "d4": D4Config,
    "coarse_dropout": CoarseDropoutConfig,
    "black_border": BlackBorderConfig,
}
ORDER = tuple(_SECTIONS)


@dataclass
class AugmentConfig:
    stain: StainAugConfig = field(default_factory=StainAugConfig)
    color_jitter: ColorJitterConfig = field(default_factory=ColorJitterConfig)
    jpeg: JpegConfig = field(default_factory=JpegConfig)
    blur: BlurConfig = field(default_factory=BlurConfig)
    affine: AffineConfig = field(default_factory=AffineConfig)
    d4: D4Config = field(default_factory=D4Config)
    coarse_dropout: CoarseDropoutConfig = field(default_factory=CoarseDropoutConfig)
    black_border: BlackBorderConfig = field(default_factory=BlackBorderConfig)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        cfg = cls()
        for name in ORDER:
            getattr(cfg, name).enabled = False
        return cfg

    def validate(self) -> None:
        """Raise one ConfigError listing every problem found."""
        problems: list[str] = []
        for name in ORDER:
            sec = getattr(self, name)
            if not 0.0 <= sec.p <= 1.0:
                problems.append(f"{name}.p={sec.p} outside [0, 1]")
            for f in fields(sec):
                val = getattr(sec, f.name)
                if isinstance(val, (tuple, list)):
                    if len(val) != 2 or val[0] > val[1]:
                        problems.append(f"{name}.{f.name}={list(val)} is not a non-empty [lo, hi] range")
        cj = self.color_jitter
        for rname in ("brightness", "contrast", "saturation"):
            if getattr(cj, rname)[0] < 0:
                problems.append(f"color_jitter.{rname} factors must be >= 0")
        if not (1 <= self.jpeg.quality[0] and self.jpeg.quality[1] <= 100):
            problems.append("jpeg.quality must lie in [1, 100]")
        if self.blur.radius[0] < 0:
            problems.append("blur.radius must be >= 0")
        if not 0 <= self.coarse_dropout.max_boxes <= 2:
            problems.append(f"coarse_dropout.max_boxes={self.coarse_dropout.max_boxes} must be in [0, 2]")
        if self.coarse_dropout.size[0] < 1:
            problems.append("coarse_dropout.size must be >= 1")
        if self.black_border.width[0] < 0:
            problems.append("black_border.width must be >= 0")
        if not 0.0 <= self.black_border.side_p <= 1.0:
            problems.append("black_border.side_p outside [0, 1]")
        if self.affine.scale[0] <= 0:
            problems.append("affine.scale must be positive")
        if not 0.0 <= self.affine.translate < 1.0:
            problems.append("affine.translate must be in [0, 1)")
        if problems:
            raise ConfigError("invalid augmentation config: " + "; ".join(problems))

    def to_dict(self) -> dict:
        out = {}
        for name in ORDER:
            sec = asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in sec.items()}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        unknown = set(d) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown augmentation sections: {sorted(unknown)}")
        kwargs = {}
        for name, sec_cls in _SECTIONS.items():
            sec = dict(d.get(name, {}))
            valid = {f.name for f in fields(sec_cls)}
            bad = set(sec) - valid
            if bad:
                raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
            kwargs[name] = sec_cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in sec.items()})
        return cls(**kwargs)


# -- geometric -------------------------------------------------------------------------
def d4_transform(img: np.ndarray, element: int) -> np.ndarray:
    """Element e in 0..7: e % 4 clockwise quarter turns, preceded by a horizontal flip if e >= 4.

    One clockwise quarter turn maps out[i][j] = in[N-1-j][i].
    """
    img = np.asarray(img)
    if img.shape[0] != img.shape[1]:
        raise ContractError(f"D4 transforms need a square image, got {img.shape[:2]}")
    if not 0 <= element < 8:
        raise ContractError(f"D4 element must be in 0..7, got {element}")
    out = img[:, ::-1] if element >= 4 else img
    return np.ascontiguousarray(np.rot90(out, k=-(element % 4), axes=(0, 1)))


def d4_compose(a: int, b: int) -> int:
    """Element equal to applying ``b`` then ``a``."""
    probe = np.arange(9).reshape(3, 3)
    target = d4_transform(d4_transform(probe, b), a)
    for e in range(8):
        if np.array_equal(d4_transform(probe, e), target):
            return e
    raise AssertionError("D4 is not closed")  # unreachable


def affine_warp(
    img: np.ndarray,
    angle: float = 0.0,
    scale: float = 1.0,
    translate: tuple = (0.0, 0.0),
    shear: float = 0.0,
) -> np.ndarray:
    """Clockwise rotation (degrees), isotropic scale, shear (degrees) and pixel translation
    about the image centre; inverse-mapped bilinear sampling with black fill."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    if angle == 0.0 and scale == 1.0 and shear == 0.0 and translate[0] == 0.0 and translate[1] == 0.0:
        return img.copy()
    th = math.radians(angle)
    sh = math.radians(shear)
    # Forward map in (x, y) with y pointing down, so positive angles turn clockwise on screen.
    rot = np.array([[math.cos(th), -math.sin(th)], [math.sin(th), math.cos(th)]])
    shr = np.array([[1.0, math.tan(sh)], [0.0, 1.0]])
    fwd = scale * rot @ shr
    inv = np.linalg.inv(fwd)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    u = xx - cx - translate[0]
    v = yy - cy - translate[1]
    src_x = inv[0, 0] * u + inv[0, 1] * v + cx
    src_y = inv[1, 0] * u + inv[1, 1] * v + cy
    # Snap coordinates that are integral up to rounding (e.g. exact quarter turns).
    for arr in (src_x, src_y):
        r = np.round(arr)
        near = np.abs(arr - r) < 1e-9
        arr[near] = r[near]
    out = np.empty(img.shape, dtype=np.float64)
    for c in range(img.shape[2]):
        out[..., c] = ndimage.map_coordinates(
            img[..., c].astype(np.float64), [src_y, src_x], order=1, mode="constant", cval=0.0
        )
    return to_uint8(out)


def sample_affine_params(rng: np.random.Generator, cfg: AffineConfig, size: tuple) -> dict:
    h, w = size
    return {
        "angle": float(rng.uniform(*cfg.rotation)),
        "scale": float(rng.uniform(*cfg.scale)),
        "translate": (
            float(rng.uniform(-cfg.translate, cfg.translate) * w),
            float(rng.uniform(-cfg.translate, cfg.translate) * h),
        ),
        "shear": float(rng.uniform(*cfg.shear)),
    }


def random_affine(img: np.ndarray, rng: np.random.Generator, cfg: AffineConfig) -> np.ndarray:
    return affine_warp(img, **sample_affine_params(rng, cfg, img.shape[:2]))


# -- photometric ---------------------------------------------------------------------------
def adjust_color(img: np.ndarray, brightness: float = 1.0, contrast: float = 1.0, saturation: float = 1.0) -> np.ndarray:
    """Brightness, then contrast (toward mean luma), then saturation (toward per-pixel luma)."""
    if brightness == 1.0 and contrast == 1.0 and saturation == 1.0:
        return np.array(img, copy=True)
    x = np.asarray(img, dtype=np.float64)
    x = np.clip(x * brightness, 0.0, 255.0)
    mean_luma = float((x @ LUMA).mean())
    x = np.clip(contrast * x + (1.0 - contrast) * mean_luma, 0.0, 255.0)
    luma = (x @ LUMA)[..., None]
    x = np.clip(saturation * x + (1.0 - saturation) * luma, 0.0, 255.0)
    return to_uint8(x)


def sample_color_params(rng: np.random.Generator, cfg: ColorJitterConfig) -> dict:
    return {
        "brightness": float(rng.uniform(*cfg.brightness)),
        "contrast": float(rng.uniform(*cfg.contrast)),
        "saturation": float(rng.uniform(*cfg.saturation)),
    }


def color_jitter(img: np.ndarray, rng: np.random.Generator, cfg: ColorJitterConfig) -> np.ndarray:
    return adjust_color(img, **sample_color_params(rng, cfg))


def disk_kernel(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    k = (xx * xx + yy * yy <= r * r).astype(np.float64)
    return k / k.sum()


def blur_disk(img: np.ndarray, radius: int) -> np.ndarray:
    """Convolve each channel with a normalized disk; edges clamp to the border pixel."""
    if radius <= 0:
        return np.array(img, copy=True)
    k = disk_kernel(radius)
    x = np.asarray(img, dtype=np.float64)
    out = np.empty_like(x)
    for c in range(x.shape[2]):
        out[..., c] = ndimage.correlate(x[..., c], k, mode="nearest")
    return to_uint8(out)


def defocus_blur(img: np.ndarray, rng: np.random.Generator, cfg: BlurConfig) -> np.ndarray:
    return blur_disk(img, int(rng.integers(cfg.radius[0], cfg.radius[1] + 1)))


def quality_tables(quality: int) -> tuple[np.ndarray, np.ndarray]:
    """IJG quality scaling of the standard tables."""
    q = int(np.clip(quality, 1, 100))
    scale = 5000.0 / q if q < 50 else 200.0 - 2.0 * q
    tabs = []
    for base in (JPEG_LUMA_Q, JPEG_CHROMA_Q):
        t = np.floor((base * scale + 50.0) / 100.0)
        tabs.append(np.clip(t, 1.0, 255.0))
    return tabs[0], tabs[1]


def rgb_to_ycbcr(x: np.ndarray) -> np.ndarray:
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(x: np.ndarray) -> np.ndarray:
    y, cb, cr = x[..., 0], x[..., 1] - 128.0, x[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def jpeg_compress(img: np.ndarray, quality: int) -> np.ndarray:
    """In-memory baseline-JPEG round trip: 8x8 DCT, quantize, dequantize, inverse DCT (4:4:4)."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    ph, pw = -h % 8, -w % 8
    x = np.pad(img.astype(np.float64), ((0, ph), (0, pw), (0, 0)), mode="edge")
    ycc = rgb_to_ycbcr(x) - 128.0
    lq, cq = quality_tables(quality)
    H, W = x.shape[:2]
    out = np.empty_like(ycc)
    for c, table in enumerate((lq, cq, cq)):
        blocks = ycc[..., c].reshape(H // 8, 8, W // 8, 8).transpose(0, 2, 1, 3)
        coef = DCT8 @ blocks @ DCT8.T
        coef = np.round(coef / table) * table
        rec = DCT8.T @ coef @ DCT8
        out[..., c] = rec.transpose(0, 2, 1, 3).reshape(H, W)
    rgb = ycbcr_to_rgb(out + 128.0)[:h, :w]
    return to_uint8(rgb)


def jpeg_artifact(img: np.ndarray, rng: np.random.Generator, cfg: JpegConfig) -> np.ndarray:
    return jpeg_compress(img, int(rng.integers(cfg.quality[0], cfg.quality[1] + 1)))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(255.0**2 / mse)


# -- occlusion -------------------------------------------------------------------------------
def fill_boxes(img: np.ndarray, boxes) -> np.ndarray:
    """Zero each (top, left, height, width) box, clipped to the image."""
    out = np.array(img, copy=True)
    h, w = out.shape[:2]
    for top, left, bh, bw in boxes:
        y0, x0 = max(0, top), max(0, left)
        y1, x1 = min(h, top + bh), min(w, left + bw)
        if y1 > y0 and x1 > x0:
            out[y0:y1, x0:x1] = 0
    return out


def sample_dropout_boxes(rng: np.random.Generator, cfg: CoarseDropoutConfig, size: tuple) -> list:
    h, w = size
    n = int(rng.integers(0, cfg.max_boxes + 1))
    boxes = []
    for _ in range(n):
        bh = int(rng.integers(cfg.size[0], cfg.size[1] + 1))
        bw = int(rng.integers(cfg.size[0], cfg.size[1] + 1))
        cy = int(rng.integers(0, h))
        cx = int(rng.integers(0, w))
        boxes.append((cy - bh // 2, cx - bw // 2, bh, bw))
    return boxes


def coarse_dropout(img: np.ndarray, rng: np.random.Generator, cfg: CoarseDropoutConfig) -> np.ndarray:
    return fill_boxes(img, sample_dropout_boxes(rng, cfg, img.shape[:2]))


def apply_black_border(img: np.ndarray, top: int = 0, bottom: int = 0, left: int = 0, right: int = 0) -> np.ndarray:
    out = np.array(img, copy=True)
    h, w = out.shape[:2]
    if top > 0:
        out[: min(top, h)] = 0
    if bottom > 0:
        out[max(0, h - bottom) :] = 0
    if left > 0:
        out[:, : min(left, w)] = 0
    if right > 0:
        out[:, max(0, w - right) :] = 0
    return out


def sample_border_widths(rng: np.random.Generator, cfg: BlackBorderConfig) -> dict:
    widths = {}
    for side in ("top", "bottom", "left", "right"):
        hit = rng.random() < cfg.side_p
        width = int(rng.integers(cfg.width[0], cfg.width[1] + 1))
        widths[side] = width if hit else 0
    return widths


def black_border(img: np.ndarray, rng: np.random.Generator, cfg: BlackBorderConfig) -> np.ndarray:
    return apply_black_border(img, **sample_border_widths(rng, cfg))


# -- resampling / normalisation --------------------------------------------------------------
def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Align-corners bilinear resize, rounded to the nearest intensity."""
    if out_w < 1 or out_h < 1:
        raise ContractError(f"output size must be >= 1, got {out_w}x{out_h}")
    img = np.asarray(img)
    h, w = img.shape[:2]
    ys = np.zeros(out_h) if out_h == 1 else np.arange(out_h) * ((h - 1) / (out_h - 1))
    xs = np.zeros(out_w) if out_w == 1 else np.arange(out_w) * ((w - 1) / (out_w - 1))
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    x = img.astype(np.float64)
    top = x[y0][:, x0] * (1 - wx) + x[y0][:, x1] * wx
    bot = x[y1][:, x0] * (1 - wx) + x[y1][:, x1] * wx
    return to_uint8(top * (1 - wy) + bot * wy)


def normalize_imagenet(img: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) -> float32 (3, H, W) standardized with ImageNet channel statistics."""
    x = np.asarray(img, dtype=np.float32) / np.float32(255.0)
    x = (x - IMAGENET_MEAN) / IMAGENET_STD
    return np.ascontiguousarray(x.transpose(2, 0, 1))


# -- pipeline ----------------------------------------------------------------------------------
class AugmentPipeline:
    """Seeded per-sample augmentation in a fixed order, ending with ImageNet normalization."""

    def __init__(self, cfg: AugmentConfig, pool: StainProfilePool | None, seed: int):
        cfg.validate()
        self.cfg = cfg
        self.pool = pool
        self.seed = int(seed)

    def augment(self, img: np.ndarray, index: int, epoch: int) -> tuple[np.ndarray, dict]:
        """Return the augmented uint8 image and the parameters drawn for it."""
        rng = rng_stream(self.seed, "augment", index, epoch)
        cfg = self.cfg
        out = np.asarray(img)
        params: dict[str, Any] = {}
        size = out.shape[:2]
        for name in ORDER:
            sec = getattr(cfg, name)
            # One gate draw per transform keeps later transforms' draws aligned.
            gate = rng.random()
            if not sec.enabled or gate >= sec.p:
                continue
            if name == "stain":
                if not self.pool:
                    continue
                domain, refs = sample_references(self.pool, rng)
                try:
                    out = normalize_to_profile(out, aggregate_profiles(refs))
                    params[name] = {"domain": domain, "n_references": len(refs)}
                except (DegenerateInputError, NumericError) as exc:
                    log.debug("sample %d epoch %d: stain augmentation skipped (%s)", index, epoch, exc)
                    params[name] = {"domain": domain, "n_references": len(refs), "skipped": True}
            elif name == "color_jitter":
                p = sample_color_params(rng, sec)
                out = adjust_color(out, **p)
                params[name] = p
            elif name == "jpeg":
                q = int(rng.integers(sec.quality[0], sec.quality[1] + 1))
                out = jpeg_compress(out, q)
                params[name] = {"quality": q}
            elif name == "blur":
                r = int(rng.integers(sec.radius[0], sec.radius[1] + 1))
                out = blur_disk(out, r)
                params[name] = {"radius": r}
            elif name == "affine":
                p = sample_affine_params(rng, sec, size)
                out = affine_warp(out, **p)
                params[name] = {**p, "translate": list(p["translate"])}
            elif name == "d4":
                e = int(rng.integers(0, 8))
                out = d4_transform(out, e)
                params[name] = {"element": e}
            elif name == "coarse_dropout":
                boxes = sample_dropout_boxes(rng, sec, size)
                out = fill_boxes(out, boxes)
                params[name] = {"boxes": [list(b) for b in boxes]}
            elif name == "black_border":
                widths = sample_border_widths(rng, sec)
                out = apply_black_border(out, **widths)
                params[name] = widths
        return np.ascontiguousarray(out, dtype=np.uint8), params

    def __call__(self, img: np.ndarray, index: int, epoch: int) -> np.ndarray:
        return normalize_imagenet(self.augment(img, index, epoch)[0])


def build_pipeline(cfg: AugmentConfig, pool: StainProfilePool | None, seed: int) -> AugmentPipeline:
    return AugmentPipeline(cfg, pool, seed)
