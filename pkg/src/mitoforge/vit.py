"""Pre-norm vision transformer with LoRA adapters on attention projections."""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .rng import rng_stream

PROJECTIONS = {"query": "q", "key": "k", "value": "v", "output": "o"}
MODES = ("lora_frozen_backbone", "full_finetune", "linear_probe")
HEAD_DROPOUT = 0.5
LN_EPS = 1e-6


@dataclass
class ViTConfig:
    image_size: int = 128
    patch_size: int = 16
    depth: int = 4
    width: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    n_classes: int = 2

    def __post_init__(self):
        problems = []
        for name in ("image_size", "patch_size", "depth", "width", "heads", "n_classes"):
            if int(getattr(self, name)) < 1:
                problems.append(f"{name} must be >= 1")
        if not problems:
            if self.image_size % self.patch_size:
                problems.append(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
            if self.width % self.heads:
                problems.append(f"width {self.width} not divisible by heads {self.heads}")
        if self.mlp_ratio <= 0:
            problems.append("mlp_ratio must be positive")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid**2 + 1

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch_size**2

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.width * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        return cls(**d)


@dataclass
class LoRAConfig:
    rank: int = 4
    alpha: float = 8.0
    dropout: float = 0.05
    targets: tuple = ("query", "value")

    def __post_init__(self):
        self.targets = tuple(self.targets)
        if self.rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {self.rank}")
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ConfigError(f"LoRA alpha must be finite and positive, got {self.alpha}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"LoRA dropout must be in [0, 1), got {self.dropout}")
        unknown = set(self.targets) - set(PROJECTIONS)
        if unknown or not self.targets:
            raise ConfigError(f"LoRA targets must be a non-empty subset of {sorted(PROJECTIONS)}, got {self.targets}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = list(self.targets)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LoRAConfig":
        return cls(**d)


def _proj_names(layer: int, proj: str) -> tuple[str, str]:
    return f"blocks.{layer}.attn.{proj}.weight", f"blocks.{layer}.attn.{proj}.bias"


def lora_names(layer: int, proj: str) -> tuple[str, str]:
    return f"blocks.{layer}.attn.{proj}.lora_A", f"blocks.{layer}.attn.{proj}.lora_B"


def parameter_shapes(cfg: ViTConfig, lora: LoRAConfig | None = None) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every tensor of a model, without allocating it."""
    d, h = cfg.width, cfg.mlp_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (d, cfg.patch_dim),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (cfg.n_tokens, d),
        "norm.weight": (d,),
        "norm.bias": (d,),
        "head.weight": (cfg.n_classes, d),
        "head.bias": (cfg.n_classes,),
    }
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes[p + "norm1.weight"] = (d,)
        shapes[p + "norm1.bias"] = (d,)
        shapes[p + "norm2.weight"] = (d,)
        shapes[p + "norm2.bias"] = (d,)
        for proj in "qkvo":
            w, b = _proj_names(i, proj)
            shapes[w] = (d, d)
            shapes[b] = (d,)
        shapes[p + "mlp.fc1.weight"] = (h, d)
        shapes[p + "mlp.fc1.bias"] = (h,)
        shapes[p + "mlp.fc2.weight"] = (d, h)
        shapes[p + "mlp.fc2.bias"] = (d,)
        if lora is not None:
            for target in lora.targets:
                a_name, b_name = lora_names(i, PROJECTIONS[target])
                shapes[a_name] = (lora.rank, d)
                shapes[b_name] = (d, lora.rank)
    return dict(sorted(shapes.items()))


def is_lora_name(name: str) -> bool:
    return ".lora_" in name


def is_head_name(name: str) -> bool:
    return name.startswith("head.")


def trainable_by_mode(name: str, mode: str) -> bool:
    if mode == "full_finetune":
        return True
    if mode == "lora_frozen_backbone":
        return is_lora_name(name) or is_head_name(name)
    if mode == "linear_probe":
        return is_head_name(name)
    raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")


def count_params(
    cfg: ViTConfig, lora: LoRAConfig | None, mode: str, include_head: bool = True
) -> int:
    """Trainable parameter count for a configuration (no allocation)."""
    total = 0
    for name, shape in parameter_shapes(cfg, lora).items():
        if not trainable_by_mode(name, mode):
            continue
        if is_head_name(name) and not include_head:
            continue
        total += int(np.prod(shape))
    return total


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, 3, S, S) -> (B, (S/p)^2, 3*p*p), patches in row-major grid order."""
    b, c, hgt, wid = images.shape
    if hgt % patch_size or wid % patch_size:
        raise DimensionError(f"image {hgt}x{wid} is not divisible into {patch_size}px patches")
    gh, gw = hgt // patch_size, wid // patch_size
    x = images.reshape(b, c, gh, patch_size, gw, patch_size)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x.reshape(b, gh * gw, c * patch_size * patch_size))


def lora_linear_forward(
    x: Tensor,
    weight: Tensor,
    adapter: tuple[Tensor, Tensor] | None,
    cfg: LoRAConfig | None,
    training: bool,
    bias: Tensor | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Base linear map plus the scaled low-rank update; dropout only on the adapter input."""
    y = ad.linear(x, weight, bias)
    if adapter is None:
        return y
    if cfg is None:
        raise ConfigError("an adapter needs a LoRAConfig")
    a, b = adapter
    if a.shape[0] != b.shape[1] or a.shape[0] < 1:
        raise ConfigError(f"adapter rank mismatch: A {a.shape}, B {b.shape}")
    xa = ad.dropout(x, cfg.dropout, rng, training)
    update = ad.linear(ad.linear(xa, a), b)
    return y + update * cfg.scaling


class ViTLoRAModel:
    """Weights, adapters, head and trainability mask of the classifier.

    ``params`` maps tensor names to :class:`Tensor`; adapter tensors are named
    ``blocks.{i}.attn.{q|k|v|o}.lora_A`` / ``lora_B``.
    """

    def __init__(
        self,
        config: ViTConfig,
        params: dict[str, Tensor],
        lora: LoRAConfig | None = None,
        mode: str = "full_finetune",
        merged: bool = False,
    ):
        self.config = config
        self.lora = lora
        self.merged = merged
        self.head_dropout = HEAD_DROPOUT
        expected = parameter_shapes(config, lora)
        if set(expected) != set(params):
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise DimensionError(f"parameter names do not match config (missing={missing[:3]}, extra={extra[:3]})")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.params = dict(sorted(params.items()))
        self.mode = mode
        self.set_mode(mode)

    # -- construction ------------------------------------------------------------
    @classmethod
    def init(
        cls,
        config: ViTConfig,
        lora: LoRAConfig | None = None,
        seed: int = 0,
        mode: str = "full_finetune",
    ) -> "ViTLoRAModel":
        params: dict[str, Tensor] = {}
        for name, shape in parameter_shapes(config, None).items():
            rng = rng_stream(seed, "init", _name_index(name))
            if name.endswith(".bias"):
                arr = np.zeros(shape)
            elif "norm" in name:
                arr = np.ones(shape)
            else:
                arr = np.clip(rng.standard_normal(shape), -2.0, 2.0) * 0.02
            params[name] = Tensor(arr)
        model = cls(config, params, None, mode="full_finetune")
        if lora is not None:
            model.attach_lora(lora, seed)
        model.set_mode(mode)
        return model

    def attach_lora(self, lora: LoRAConfig, seed: int = 0) -> None:
        """Add fresh adapters: A ~ N(0, 1/r), B = 0."""
        if self.lora is not None:
            raise ContractError("model already carries LoRA adapters")
        d = self.config.width
        for i in range(self.config.depth):
            for target in lora.targets:
                a_name, b_name = lora_names(i, PROJECTIONS[target])
                rng = rng_stream(seed, "lora_init", _name_index(a_name))
                self.params[a_name] = Tensor(rng.standard_normal((lora.rank, d)) / math.sqrt(lora.rank))
                self.params[b_name] = Tensor(np.zeros((d, lora.rank)))
        self.params = dict(sorted(self.params.items()))
        self.lora = lora
        self.merged = False
        self.set_mode(self.mode)

    def set_mode(self, mode: str) -> None:
        if mode not in MODES:
            raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
        if mode == "lora_frozen_backbone" and self.lora is None:
            raise ContractError("lora_frozen_backbone mode requires LoRA adapters")
        self.mode = mode
        for name, t in self.params.items():
            t.requires_grad = trainable_by_mode(name, mode)

    def copy(self) -> "ViTLoRAModel":
        params = {n: Tensor(t.data) for n, t in self.params.items()}
        return ViTLoRAModel(self.config, params, self.lora, self.mode, self.merged)

    # -- bookkeeping -------------------------------------------------------------
    def trainable_names(self) -> list[str]:
        return [n for n, t in self.params.items() if t.requires_grad]

    def backbone_names(self) -> list[str]:
        return [n for n in self.params if not is_lora_name(n) and not is_head_name(n)]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def total_params(self) -> int:
        return sum(t.size for t in self.params.values())

    # -- forward -------------------------------------------------------------------
    def _adapter(self, layer: int, proj: str):
        if self.lora is None:
            return None
        a_name, b_name = lora_names(layer, proj)
        if a_name not in self.params:
            return None
        return self.params[a_name], self.params[b_name]

    def _proj(self, x: Tensor, layer: int, proj: str, training: bool, rng) -> Tensor:
        w, b = _proj_names(layer, proj)
        return lora_linear_forward(
            x, self.params[w], self._adapter(layer, proj), self.lora, training, self.params[b], rng
        )

    def embed(self, images: np.ndarray) -> Tensor:
        cfg = self.config
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[1] != 3:
            raise DimensionError(f"expected (B, 3, S, S) images, got {images.shape}")
        if images.shape[2] != cfg.image_size or images.shape[3] != cfg.image_size:
            raise DimensionError(
                f"image size {images.shape[2]}x{images.shape[3]} does not match config {cfg.image_size}"
            )
        p = self.params
        bsz = images.shape[0]
        patches = Tensor(extract_patches(images.astype(np.float32, copy=False), cfg.patch_size))
        tokens = ad.linear(patches, p["patch_embed.weight"], p["patch_embed.bias"])
        cls_tok = ad.broadcast_to(ad.reshape(p["cls_token"], (1, 1, cfg.width)), (bsz, 1, cfg.width))
        x = ad.concat([cls_tok, tokens], axis=1)
        pos = ad.broadcast_to(ad.reshape(p["pos_embed"], (1, cfg.n_tokens, cfg.width)), x.shape)
        return x + pos

    def _block(self, x: Tensor, i: int, training: bool, rng) -> Tensor:
        p = self.params
        pre = f"blocks.{i}."
        bsz, n_tok, d = x.shape
        heads = self.config.heads
        dh = d // heads

        h = ad.layer_norm(x, p[pre + "norm1.weight"], p[pre + "norm1.bias"], LN_EPS)

        def split(t: Tensor) -> Tensor:
            return ad.transpose(ad.reshape(t, (bsz, n_tok, heads, dh)), (0, 2, 1, 3))

        q = split(self._proj(h, i, "q", training, rng))
        k = split(self._proj(h, i, "k", training, rng))
        v = split(self._proj(h, i, "v", training, rng))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        attn = ad.softmax(scores, axis=-1)
        o = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (bsz, n_tok, d))
        x = x + self._proj(o, i, "o", training, rng)

        h = ad.layer_norm(x, p[pre + "norm2.weight"], p[pre + "norm2.bias"], LN_EPS)
        h = ad.gelu(ad.linear(h, p[pre + "mlp.fc1.weight"], p[pre + "mlp.fc1.bias"]))
        h = ad.linear(h, p[pre + "mlp.fc2.weight"], p[pre + "mlp.fc2.bias"])
        return x + h

    def features(self, images: np.ndarray, training: bool = False, rng=None) -> Tensor:
        """Final-norm classification-token embedding, shape (B, width)."""
        x = self.embed(images)
        for i in range(self.config.depth):
            x = self._block(x, i, training, rng)
        x = ad.layer_norm(x, self.params["norm.weight"], self.params["norm.bias"], LN_EPS)
        return x[:, 0, :]

    def head(self, feats: Tensor, training: bool = False, rng=None) -> Tensor:
        feats = ad.dropout(feats, self.head_dropout, rng, training)
        return ad.linear(feats, self.params["head.weight"], self.params["head.bias"])

    def forward(self, images: np.ndarray, training: bool = False, rng=None) -> Tensor:
        return self.head(self.features(images, training, rng), training, rng)

    __call__ = forward


def _name_index(name: str) -> int:
    # Stable per-tensor stream index so adding tensors never reshuffles others.
    return zlib.crc32(name.encode("utf-8"))


def patchify(images: np.ndarray, model: ViTLoRAModel) -> Tensor:
    """Token sequence (classification token first, positions added) for one image or a batch."""
    tokens = model.embed(images)
    return tokens[0] if np.asarray(images).ndim == 3 else tokens


def vit_forward(images: np.ndarray, model: ViTLoRAModel, training: bool = False, rng=None) -> Tensor:
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] == 0:
        raise DimensionError(f"vit_forward expects a non-empty (B, 3, S, S) batch, got {images.shape}")
    return model.forward(images, training, rng)


def lora_merge(model: ViTLoRAModel) -> ViTLoRAModel:
    """Fold every adapter into its base weight: W <- W + (alpha/r) B A."""
    if model.merged:
        raise ContractError("model adapters are already merged")
    if model.lora is None:
        raise ContractError("model has no LoRA adapters to merge")
    lora = model.lora
    params = {n: Tensor(t.data) for n, t in model.params.items() if not is_lora_name(n)}
    for i in range(model.config.depth):
        for target in lora.targets:
            proj = PROJECTIONS[target]
            a_name, b_name = lora_names(i, proj)
            w_name, _ = _proj_names(i, proj)
            delta = model.params[b_name].data.astype(np.float64) @ model.params[a_name].data.astype(np.float64)
            merged = params[w_name].data.astype(np.float64) + lora.scaling * delta
            params[w_name] = Tensor(merged)
    mode = "full_finetune" if model.mode == "lora_frozen_backbone" else model.mode
    return ViTLoRAModel(model.config, params, None, mode=mode, merged=True)


def count_trainable_params(model: ViTLoRAModel, include_head: bool = True) -> int:
    return sum(
        t.size
        for n, t in model.params.items()
        if t.requires_grad and (include_head or not is_head_name(n))
    )
