import json
import struct

import numpy as np
import pytest

from mitoforge.checkpoint import MAGIC, encode_checkpoint, load_checkpoint, read_header, save_checkpoint
from mitoforge.errors import FormatError, ShapeError
from mitoforge.rng import rng_stream
from mitoforge.vit import LoRAConfig, ViTConfig, ViTLoRAModel

SMALL = ViTConfig(image_size=32, patch_size=16, depth=2, width=16, heads=2)


@pytest.fixture
def model():
    m = ViTLoRAModel.init(SMALL, LoRAConfig(), seed=5, mode="lora_frozen_backbone")
    m.params["blocks.0.attn.v.lora_B"].data[:] = 0.25
    return m


def test_save_load_save_byte_identical(tmp_path, model):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(model, p1, {"epoch": 3})
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2, {"epoch": 3})
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.mode == model.mode and loaded.lora == model.lora
    for name, t in model.params.items():
        assert loaded.params[name].data.tobytes() == t.data.tobytes()


def test_layout_and_ordering(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    raw = path.read_bytes()
    magic, version, hlen = struct.unpack("<4sIQ", raw[:16])
    assert magic == MAGIC and version == 1
    header = json.loads(raw[16 : 16 + hlen])
    names = [k for k in header if k != "__metadata__"]
    offsets = [header[n]["offset"] for n in names]
    assert names == sorted(names)
    assert offsets == sorted(offsets) and offsets[0] == 0
    entry = header["head.weight"]
    assert entry["dtype"] == "f32" and entry["shape"] == [2, 16] and entry["length"] == 2 * 16 * 4
    assert len(raw) == 16 + hlen + sum(header[n]["length"] for n in names)
    assert read_header(path)["__metadata__"]["vit"] == SMALL.to_dict()


def test_encoding_is_deterministic(model):
    assert encode_checkpoint(model) == encode_checkpoint(model.copy())


def test_bad_magic(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(path)


def test_bad_version(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 9)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(path)


def test_truncated_payload_names_tensor(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    path.write_bytes(path.read_bytes()[:-10])
    last = sorted(model.params)[-1]
    with pytest.raises(FormatError, match=last.replace(".", r"\.")):
        load_checkpoint(path)


def test_truncated_header(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    path.write_bytes(path.read_bytes()[:40])
    with pytest.raises(FormatError, match="header"):
        load_checkpoint(path)


def test_shape_mismatch_names_first_tensor(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    other = ViTConfig(image_size=32, patch_size=16, depth=2, width=32, heads=2)
    with pytest.raises(ShapeError) as info:
        load_checkpoint(path, expected=other)
    assert str(info.value).startswith("blocks.0.attn.k.bias")


def test_no_temp_files_left(tmp_path, model):
    save_checkpoint(model, tmp_path / "m.ckpt")
    assert [p.name for p in tmp_path.iterdir()] == ["m.ckpt"]


def test_loaded_model_predicts_identically(tmp_path, model):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    x = rng_stream(0, "ckpt-img").standard_normal((2, 3, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(load_checkpoint(path).forward(x).data, model.forward(x).data)
