from __future__ import annotations

import struct

import numpy as np
import pytest

from lilt_lab import adapters as ad
from lilt_lab import checkpoint, freeze
from lilt_lab.checkpoint import CheckpointFormatError


def sample_arrays(rng):
    return {
        "b.weight": rng.standard_normal((3, 4)).astype(np.float32),
        "a.f64": rng.standard_normal(5),
        "img": rng.integers(0, 255, (2, 2, 3)).astype(np.uint8),
        "ids": np.arange(4, dtype=np.int64),
        "scalar": np.array(1.5, dtype=np.float32),
    }


def test_container_round_trip(rng):
    arrays = sample_arrays(rng)
    buf = checkpoint.encode_container(arrays, {"step": 3, "note": "x"})
    out, meta = checkpoint.decode_container(buf)
    assert meta == {"step": 3, "note": "x"}
    assert set(out) == set(arrays)
    for k, v in arrays.items():
        assert out[k].dtype == v.dtype and out[k].shape == v.shape
        np.testing.assert_array_equal(out[k], v)


def test_encoding_is_canonical(rng):
    arrays = sample_arrays(rng)
    reordered = dict(reversed(list(arrays.items())))
    assert checkpoint.encode_container(arrays, {"a": 1, "b": 2}) == checkpoint.encode_container(reordered, {"b": 2, "a": 1})


def test_bad_magic(rng):
    buf = bytearray(checkpoint.encode_container(sample_arrays(rng), {}))
    buf[0:1] = b"X"
    with pytest.raises(CheckpointFormatError) as info:
        checkpoint.decode_container(bytes(buf))
    assert info.value.offset == 0


def test_unsupported_version(rng):
    buf = bytearray(checkpoint.encode_container(sample_arrays(rng), {}))
    buf[8:10] = struct.pack("<H", 99)
    with pytest.raises(CheckpointFormatError, match="version") as info:
        checkpoint.decode_container(bytes(buf))
    assert info.value.offset == 8


@pytest.mark.parametrize("cut", [5, 12, 40, -1])
def test_truncation_reports_offset(rng, cut):
    buf = checkpoint.encode_container(sample_arrays(rng), {"k": 1})
    with pytest.raises(CheckpointFormatError, match="truncated") as info:
        checkpoint.decode_container(buf[:cut])
    assert info.value.offset is not None and info.value.offset <= len(buf[:cut])


def test_corrupted_payload_fails_checksum(rng):
    buf = bytearray(checkpoint.encode_container(sample_arrays(rng), {}))
    buf[-5] ^= 0xFF  # last payload byte, just before the checksum
    with pytest.raises(CheckpointFormatError, match="checksum") as info:
        checkpoint.decode_container(bytes(buf))
    assert info.value.offset == len(buf) - 4


def test_trailing_bytes(rng):
    buf = checkpoint.encode_container(sample_arrays(rng), {})
    with pytest.raises(CheckpointFormatError, match="trailing"):
        checkpoint.decode_container(buf + b"\0")


def test_unsupported_dtype():
    with pytest.raises(CheckpointFormatError):
        checkpoint.encode_container({"x": np.zeros(2, dtype=np.complex64)}, {})


def test_model_round_trip_with_adapters(tmp_path, rng):
    recipe = freeze.preset("lilt_da")
    model = freeze.build_model(recipe, seed=4)
    ad.insert(model, ad.AdapterSpec("layerwise", target="text"))
    for t in model.params.values():
        t.data = (t.data + rng.standard_normal(t.shape).astype(t.dtype) * 0.01).astype(t.dtype)
    path = tmp_path / "m.bin"
    checkpoint.save_checkpoint(path, model, step=7)
    loaded, meta = checkpoint.load_checkpoint(path)
    assert meta["step"] == 7
    assert set(loaded.params) == set(model.params)
    assert loaded.deep_count("image") == model.deep_count("image")
    assert all(loaded.params[p].data.tobytes() == t.data.tobytes() for p, t in model.params.items())
    assert sorted(loaded.trainable_paths()) == sorted(model.trainable_paths())
    px = rng.uniform(-1, 1, (2, 3, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(loaded.embed_image(px).data, model.embed_image(px).data)


def test_non_model_container_rejected(tmp_path):
    checkpoint.write_container(tmp_path / "x.bin", {"a": np.zeros(1)}, {"kind": "corpus-images"})
    with pytest.raises(CheckpointFormatError):
        checkpoint.load_checkpoint(tmp_path / "x.bin")
