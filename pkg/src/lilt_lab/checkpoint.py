"""Versioned binary container for named arrays plus a JSON metadata record.

Layout (all integers little-endian)::

    magic    8 bytes  b"LILTCKPT"
    version  u16
    meta_len u32, then meta_len bytes of UTF-8 JSON (sorted keys)
    count    u32
    count x entry:
        name_len u16, name (UTF-8)
        dtype    u8   (see DTYPE_TAGS)
        ndim     u8, then ndim x u32 dims
        nbytes   u64, then raw little-endian values
    crc32    u32 over every preceding byte

Entries are written in sorted name order so identical content gives
identical bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"LILTCKPT"
FORMAT_VERSION = 1

DTYPE_TAGS = {0: "<f4", 1: "<f8", 2: "|u1", 3: "<i8"}
_TAG_OF = {np.dtype(v).str: k for k, v in DTYPE_TAGS.items()}


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        super().__init__(message if offset is None else f"{message} (at byte offset {offset})")


def encode_container(arrays: Mapping[str, np.ndarray], metadata: Mapping) -> bytes:
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION)]
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode()
    parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        tag = _TAG_OF.get(le.dtype.str)
        if tag is None:
            raise CheckpointFormatError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw_name = name.encode()
        raw = np.ascontiguousarray(le).tobytes()
        parts += [
            struct.pack("<H", len(raw_name)),
            raw_name,
            struct.pack("<BB", tag, arr.ndim),
            struct.pack(f"<{arr.ndim}I", *arr.shape),
            struct.pack("<Q", len(raw)),
            raw,
        ]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointFormatError(f"truncated while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_container(buf: bytes) -> tuple[dict[str, np.ndarray], dict]:
    r = _Reader(buf)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("bad magic; not a checkpoint container", 0)
    (version,) = r.unpack("<H", "version")
    if version != FORMAT_VERSION:
        raise CheckpointFormatError(f"unsupported format version {version} (expected {FORMAT_VERSION})", len(MAGIC))
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_off = r.pos
    try:
        metadata = json.loads(r.take(meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"metadata is not valid JSON: {exc}", meta_off) from None
    (count,) = r.unpack("<I", "entry count")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        entry_off = r.pos
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "name").decode()
        tag, ndim = r.unpack("<BB", "dtype/ndim")
        if tag not in DTYPE_TAGS:
            raise CheckpointFormatError(f"unknown dtype tag {tag} for {name!r}", entry_off)
        shape = r.unpack(f"<{ndim}I", "shape")
        (nbytes,) = r.unpack("<Q", "payload size")
        dtype = np.dtype(DTYPE_TAGS[tag])
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CheckpointFormatError(f"payload size mismatch for {name!r}", entry_off)
        raw = r.take(nbytes, f"payload of {name!r}")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    crc_off = r.pos
    (crc,) = r.unpack("<I", "checksum")
    if crc != zlib.crc32(buf[:crc_off]):
        raise CheckpointFormatError("checksum mismatch; file is corrupt", crc_off)
    if r.pos != len(buf):
        raise CheckpointFormatError("trailing bytes after checksum", r.pos)
    return arrays, metadata


def write_container(path: str | Path, arrays: Mapping[str, np.ndarray], metadata: Mapping) -> None:
    Path(path).write_bytes(encode_container(arrays, metadata))


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return decode_container(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# model checkpoints

CHECKPOINT_KIND = "lilt-lab-model"


def save_checkpoint(path: str | Path, model, **extra) -> None:
    """Write ``model`` with enough metadata to rebuild it (adapters included)."""
    meta = {"kind": CHECKPOINT_KIND, "model": model.metadata(), "trainable": sorted(model.trainable_paths())}
    meta.update(extra)
    write_container(path, model.state_dict(), meta)


def load_checkpoint(path: str | Path):
    """Rebuild the model stored at ``path``; returns ``(model, metadata)``."""
    from . import adapters as ad
    from .encoders import DualEncoder, SizePreset

    arrays, meta = read_container(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise CheckpointFormatError(f"not a model checkpoint (kind={meta.get('kind')!r})")
    m = meta["model"]
    model = DualEncoder.create(
        SizePreset.from_dict(m["size"]), seed=m["seed"], paper_literal=m["paper_literal"], allow_large=True
    )
    for spec in m["adapters"]:
        ad.insert(model, ad.AdapterSpec.from_dict(spec))
    if set(arrays) != set(model.params):
        diff = sorted(set(arrays) ^ set(model.params))[:5]
        raise CheckpointFormatError(f"parameter paths do not match the described architecture: {diff}")
    trainable = set(meta.get("trainable", ()))
    for p, t in model.params.items():
        if tuple(arrays[p].shape) != t.shape:
            raise CheckpointFormatError(f"shape mismatch at {p}")
        t.data = arrays[p]
        t.requires_grad = p in trainable
    return model, meta
