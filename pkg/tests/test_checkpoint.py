"""Binary checkpoint format: exact round trips and rejection of damaged files."""

import struct

import numpy as np
import pytest

from freezenmt.checkpoint import (MAGIC, Checkpoint, CheckpointFormatError, load_checkpoint, rng_from_text,
                                  rng_state_text, save_checkpoint)

from conftest import micro_checkpoint


def _trained_like(seed=0):
    ckpt = micro_checkpoint(seed)
    rng = np.random.default_rng(seed)
    for name in ckpt.store.names():
        ckpt.optimizer.m[name][...] = rng.normal(size=ckpt.optimizer.m[name].shape)
        ckpt.optimizer.v[name][...] = rng.random(size=ckpt.optimizer.v[name].shape)
    ckpt.optimizer.step = 17
    ckpt.store["encoder.l1.bias"].trainable = False
    ckpt.metadata.update({"dev_ppl": repr(1.25), "note": "ünïcode", "rng_state": rng_state_text(rng)})
    return ckpt


def test_save_load_save_is_byte_identical(tmp_path):
    ckpt = _trained_like()
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    again = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(again, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert again.config == ckpt.config
    assert again.metadata == ckpt.metadata
    assert again.optimizer.step == 17
    assert again.param_digest() == ckpt.param_digest()
    assert not again.store["encoder.l1.bias"].trainable
    for name in ckpt.store.names():
        assert again.store[name].component == ckpt.store[name].component
        np.testing.assert_array_equal(again.optimizer.v[name], ckpt.optimizer.v[name])


def test_special_values_survive(tmp_path):
    ckpt = micro_checkpoint()
    ckpt.store["softmax.b"].value[:3] = [-0.0, 5e-324, 1.7976931348623157e308]
    again = Checkpoint.from_bytes(ckpt.to_bytes())
    assert again.store["softmax.b"].value.tobytes() == ckpt.store["softmax.b"].value.tobytes()


def test_without_optimizer():
    ckpt = micro_checkpoint()
    ckpt.optimizer = None
    again = Checkpoint.from_bytes(ckpt.to_bytes())
    assert again.optimizer is None
    assert again.to_bytes() == ckpt.to_bytes()


def test_rng_state_round_trip():
    rng = np.random.Generator(np.random.PCG64(42))
    rng.random(5)
    clone = rng_from_text(rng_state_text(rng))
    np.testing.assert_array_equal(clone.random(8), rng.random(8))


def test_header_layout():
    data = micro_checkpoint().to_bytes()
    assert data[:4] == MAGIC
    version, count = struct.unpack("<II", data[4:12])
    assert version == 1
    assert count == len(micro_checkpoint().store.names())


@pytest.mark.parametrize("damage, message", [
    (lambda d: b"XXXX" + d[4:], "magic"),
    (lambda d: d[:4] + struct.pack("<I", 9) + d[8:], "version"),
    (lambda d: d[: len(d) // 2], "truncated"),
    (lambda d: d + b"\0", "trailing"),
    (lambda d: d[:20], "truncated"),
])
def test_damaged_files_are_rejected(damage, message):
    data = _trained_like().to_bytes()
    with pytest.raises(CheckpointFormatError, match=message):
        Checkpoint.from_bytes(damage(data))


def test_bad_component_tag():
    data = bytearray(micro_checkpoint().to_bytes())
    name_len = struct.unpack("<H", data[12:14])[0]
    data[14 + name_len] = 9
    with pytest.raises(CheckpointFormatError, match="component"):
        Checkpoint.from_bytes(bytes(data))


def test_missing_model_config():
    data = micro_checkpoint().to_bytes()
    # replace the metadata block with an empty one
    bad = data[: len(data) - _meta_len(data) - 4] + struct.pack("<I", 0)
    with pytest.raises(CheckpointFormatError, match="model config"):
        Checkpoint.from_bytes(bad)


def _meta_len(data: bytes) -> int:
    # the metadata block is the tail of the file; find its length prefix by scanning back
    for k in range(len(data) - 4, 0, -1):
        (n,) = struct.unpack("<I", data[k : k + 4])
        if k + 4 + n == len(data):
            try:
                data[k + 4 :].decode("utf-8")
            except UnicodeDecodeError:
                continue
            if data[k + 4 :].startswith(b"seed="):
                return n
    raise AssertionError("metadata block not found")


def test_copy_is_deep():
    ckpt = _trained_like()
    clone = ckpt.copy()
    clone.store["softmax.b"].value[0] += 1
    clone.optimizer.m["softmax.b"][0] += 1
    clone.metadata["x"] = "y"
    assert ckpt.param_digest() != clone.param_digest()
    assert ckpt.optimizer.m["softmax.b"][0] != clone.optimizer.m["softmax.b"][0]
    assert "x" not in ckpt.metadata
