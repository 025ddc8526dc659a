"""Binary checkpoint format.

Layout::

    b"MTFG" | u32 version (=1) | u64 header length | JSON header | payload

The JSON header maps each tensor name to ``{"shape", "dtype": "f32",
"offset", "length"}`` (offsets relative to the payload start) plus a
``__metadata__`` entry with the model configuration. Tensors are stored in
lexicographic name order as little-endian float32.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import FormatError, ShapeError
from .vit import LoRAConfig, ViTConfig, ViTLoRAModel, parameter_shapes

MAGIC = b"MTFG"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
META_KEY = "__metadata__"


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(model: ViTLoRAModel, extra: dict | None = None) -> bytes:
    header: dict = {
        META_KEY: {
            "vit": model.config.to_dict(),
            "lora": None if model.lora is None else model.lora.to_dict(),
            "mode": model.mode,
            "merged": model.merged,
            "extra": extra or {},
        }
    }
    chunks = []
    offset = 0
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name].data, dtype="<f4")
        raw = arr.tobytes()
        header[name] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset, "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def save_checkpoint(model: ViTLoRAModel, path: str | os.PathLike, extra: dict | None = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(model, extra))


def read_header(path: str | os.PathLike) -> dict:
    return _parse(Path(path).read_bytes())[0]


def _parse(buf: bytes) -> tuple[dict, memoryview]:
    if len(buf) < _PREFIX.size:
        raise FormatError("magic: file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError(f"magic: expected {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise FormatError(f"version: unsupported checkpoint version {version}")
    start = _PREFIX.size
    if start + hlen > len(buf):
        raise FormatError(f"header_length: header of {hlen} bytes exceeds file size {len(buf)} (truncated?)")
    try:
        header = json.loads(bytes(buf[start : start + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"header: invalid JSON ({exc})") from exc
    if not isinstance(header, dict) or META_KEY not in header:
        raise FormatError(f"header: missing {META_KEY}")
    return header, memoryview(buf)[start + hlen :]


def load_checkpoint(path: str | os.PathLike, expected: ViTConfig | None = None) -> ViTLoRAModel:
    """Read a checkpoint; with ``expected`` set, stored shapes are checked against it."""
    header, payload = _parse(Path(path).read_bytes())
    meta = header[META_KEY]
    try:
        vit = ViTConfig.from_dict(meta["vit"])
        lora = None if meta["lora"] is None else LoRAConfig.from_dict(meta["lora"])
        mode, merged = meta["mode"], bool(meta["merged"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{META_KEY}: incomplete model metadata ({exc})") from exc

    params: dict[str, Tensor] = {}
    for name in sorted(k for k in header if k != META_KEY):
        entry = header[name]
        try:
            shape = tuple(int(s) for s in entry["shape"])
            offset, length = int(entry["offset"]), int(entry["length"])
            dtype = entry["dtype"]
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{name}: malformed tensor entry ({exc})") from exc
        if dtype != "f32":
            raise FormatError(f"{name}: unsupported dtype {dtype!r}")
        if length != 4 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{name}: byte length {length} disagrees with shape {list(shape)}")
        if offset < 0 or offset + length > len(payload):
            raise FormatError(f"{name}: payload range [{offset}, {offset + length}) exceeds file (truncated?)")
        arr = np.frombuffer(payload[offset : offset + length], dtype="<f4").reshape(shape)
        params[name] = Tensor(arr)

    if expected is not None:
        want = parameter_shapes(expected, lora)
        for name in sorted(set(want) | set(params)):
            got = params[name].shape if name in params else None
            if got != want.get(name):
                raise ShapeError(
                    f"{name}: checkpoint holds {list(got) if got else 'nothing'}, "
                    f"config expects {list(want[name]) if name in want else 'nothing'}"
                )
        vit = expected
    try:
        return ViTLoRAModel(vit, params, lora, mode=mode, merged=merged)
    except Exception as exc:
        raise FormatError(f"tensors: inconsistent with stored config ({exc})") from exc
