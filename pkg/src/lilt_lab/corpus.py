"""Synthetic shape/caption corpus and a toy whitespace tokenizer.

Each record is a colored primitive drawn on a plain background, captioned
from its attribute tuple, e.g. ``"a large red circle in the top left"``.
Captions are injective in the attributes, so retrieval ground truth is exact.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

PAD, CLS, UNK = 0, 1, 2
RESERVED = ("[pad]", "[cls]", "[unk]")

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 60),
    "blue": (40, 80, 220),
    "yellow": (230, 210, 40),
    "purple": (140, 50, 180),
    "orange": (240, 140, 30),
    "cyan": (40, 200, 210),
    "white": (245, 245, 245),
    "pink": (240, 130, 180),
    "brown": (120, 70, 30),
}
POSITIONS = ("top left", "top right", "bottom left", "bottom right")
BACKGROUND = (20, 20, 20)


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    shapes: tuple[str, ...] = ("circle", "square", "triangle", "cross")
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow", "purple", "orange", "cyan", "white")
    positions: tuple[str, ...] = POSITIONS
    sizes: tuple[str, ...] = ("tiny", "small", "medium", "large")
    image_size: int = 32
    template: str = "a {size} {color} {shape} in the {position}"
    n_pairs: int = 512
    seed: int = 0
    unique: bool = True
    holdout_fraction: float = 0.125

    def validate(self) -> None:
        for s in self.shapes:
            if s not in _SHAPE_FNS:
                raise CorpusError(f"unknown shape {s!r}")
        for c in self.colors:
            if c not in COLORS:
                raise CorpusError(f"unknown color {c!r}")
        for p in self.positions:
            if p not in POSITIONS:
                raise CorpusError(f"unknown position {p!r}")
        if self.image_size % 2 or self.image_size < 8:
            raise CorpusError("image_size must be even and at least 8")
        n_combos = len(self.shapes) * len(self.colors) * len(self.positions) * len(self.sizes)
        if self.unique and self.n_pairs > n_combos:
            raise CorpusError(f"{self.n_pairs} unique pairs requested but only {n_combos} attribute combinations")
        if self.n_pairs < 1:
            raise CorpusError("n_pairs must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise CorpusError(f"unknown spec keys {sorted(unknown)}")
        return cls(**known)


@dataclass(frozen=True)
class PairRecord:
    id: int
    pixels: np.ndarray = field(repr=False)  # uint8, (H, W, 3)
    caption: str
    attributes: tuple[str, str, str, str]  # shape, color, position, size


# ---------------------------------------------------------------------------
# rendering


def _disk(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _square(yy, xx, cy, cx, r):
    return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)


def _triangle(yy, xx, cy, cx, r):
    top = cy - r
    inside_y = (yy >= top) & (yy <= cy + r)
    half = (yy - top) / 2.0
    return inside_y & (np.abs(xx - cx) <= half + 0.5)


def _cross(yy, xx, cy, cx, r):
    w = max(r / 3.0, 0.75)
    return ((np.abs(yy - cy) <= w) & (np.abs(xx - cx) <= r)) | ((np.abs(xx - cx) <= w) & (np.abs(yy - cy) <= r))


_SHAPE_FNS = {"circle": _disk, "square": _square, "triangle": _triangle, "cross": _cross}


def render(attributes: Sequence[str], spec: SyntheticSpec) -> np.ndarray:
    """Draw one record's image as uint8 RGB."""
    shape, color, position, size = attributes
    n = spec.image_size
    quad = n // 2
    vert, horiz = position.split()
    cy = (quad - 1) / 2.0 + (quad if vert == "bottom" else 0)
    cx = (quad - 1) / 2.0 + (quad if horiz == "right" else 0)
    size_idx = spec.sizes.index(size)
    r_max = quad / 2.0 - 0.5
    r_min = max(quad / 4.0, 1.0)
    steps = max(len(spec.sizes) - 1, 1)
    r = r_min + (r_max - r_min) * size_idx / steps
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    img = np.empty((n, n, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    img[_SHAPE_FNS[shape](yy, xx, cy, cx, r)] = COLORS[color]
    return img


def to_model_input(pixels: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 (..., H, W, 3) -> float (..., 3, H, W) scaled to [-1, 1]."""
    x = pixels.astype(np.float64) / 127.5 - 1.0
    return np.moveaxis(x, -1, -3).astype(dtype)


def caption_for(attributes: Sequence[str], spec: SyntheticSpec) -> str:
    shape, color, position, size = attributes
    return spec.template.format(shape=shape, color=color, position=position, size=size)


def parse_caption(caption: str, spec: SyntheticSpec) -> tuple[str, str, str, str]:
    """Invert :func:`caption_for` by matching against every attribute tuple."""
    for attrs in _all_attributes(spec):
        if caption_for(attrs, spec) == caption:
            return attrs
    raise CorpusError(f"caption not produced by this spec: {caption!r}")


def _all_attributes(spec: SyntheticSpec):
    for shape, color, position, size in itertools.product(spec.shapes, spec.colors, spec.positions, spec.sizes):
        yield (shape, color, position, size)


def generate(spec: SyntheticSpec) -> list[PairRecord]:
    """Deterministic corpus for ``spec``; records are ordered by id."""
    spec.validate()
    combos = list(_all_attributes(spec))
    rng = np.random.default_rng(spec.seed)
    if spec.unique:
        picks = rng.permutation(len(combos))[: spec.n_pairs]
    else:
        picks = rng.integers(0, len(combos), size=spec.n_pairs)
    records = []
    for i, idx in enumerate(picks):
        attrs = combos[int(idx)]
        records.append(PairRecord(id=i, pixels=render(attrs, spec), caption=caption_for(attrs, spec), attributes=attrs))
    return records


def split(records: Sequence[PairRecord], spec: SyntheticSpec) -> tuple[list[PairRecord], list[PairRecord]]:
    """Train / held-out split: the last ``holdout_fraction`` of a seeded shuffle."""
    order = np.random.default_rng(spec.seed + 1).permutation(len(records))
    n_hold = int(round(len(records) * spec.holdout_fraction))
    cut = len(records) - n_hold
    train = [records[i] for i in sorted(order[:cut])]
    held = [records[i] for i in sorted(order[cut:])]
    return train, held


# ---------------------------------------------------------------------------
# tokenizer


@dataclass(frozen=True)
class TokenVocab:
    words: tuple[str, ...]  # index = id; first three are reserved

    @property
    def size(self) -> int:
        return len(self.words)

    def id_of(self, word: str) -> int:
        return self._index().get(word, UNK)

    def _index(self) -> dict[str, int]:
        idx = self.__dict__.get("_idx")
        if idx is None:
            idx = {w: i for i, w in enumerate(self.words)}
            object.__setattr__(self, "_idx", idx)
        return idx


def build_vocab(spec: SyntheticSpec, extra: Sequence[str] = ("a", "photo", "of", "the")) -> TokenVocab:
    words = set(spec.template.replace("{", " ").replace("}", " ").split()) - {"shape", "color", "position", "size"}
    words.update(spec.shapes, spec.colors, spec.sizes, extra)
    for p in spec.positions:
        words.update(p.split())
    return TokenVocab(RESERVED + tuple(sorted(words)))


def tokenize(text: str, vocab: TokenVocab, max_len: int) -> np.ndarray:
    ids = [CLS] + [vocab.id_of(w) for w in text.lower().split()]
    ids = ids[:max_len]
    out = np.full(max_len, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    return out


def tokenize_batch(texts: Sequence[str], vocab: TokenVocab, max_len: int) -> np.ndarray:
    return np.stack([tokenize(t, vocab, max_len) for t in texts]) if texts else np.zeros((0, max_len), np.int64)


def detokenize(ids: Sequence[int], vocab: TokenVocab) -> str:
    return " ".join(vocab.words[i] for i in ids if i not in (PAD, CLS))


# ---------------------------------------------------------------------------
# batching


def batch_iter(n_items: int, batch_size: int, seed: int, epoch: int) -> Iterator[np.ndarray]:
    """Index batches for one epoch; the final short batch is dropped.

    The permutation is a pure function of ``(seed, epoch)``.
    """
    if batch_size > n_items:
        raise CorpusError(f"batch size {batch_size} exceeds corpus size {n_items}")
    perm = np.random.default_rng([seed, epoch]).permutation(n_items)
    for start in range(0, n_items - batch_size + 1, batch_size):
        yield perm[start : start + batch_size]


# ---------------------------------------------------------------------------
# on-disk layout


def save_corpus(records: Sequence[PairRecord], spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Write ``index.jsonl``, ``spec.json`` and ``images.bin`` into ``out_dir``."""
    from .checkpoint import write_container

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for r in records:
        lines.append(
            json.dumps(
                {"id": r.id, "caption": r.caption, "attributes": list(r.attributes), "image": f"images.bin#{r.id:06d}"},
                sort_keys=True,
            )
        )
    (out / "index.jsonl").write_text("\n".join(lines) + "\n")
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n")
    write_container(
        out / "images.bin",
        {f"{r.id:06d}": r.pixels for r in records},
        {"kind": "corpus-images", "n": len(records)},
    )
    return out


def load_corpus(path: str | Path) -> tuple[list[PairRecord], SyntheticSpec]:
    from .checkpoint import read_container

    root = Path(path)
    spec = SyntheticSpec.from_dict(json.loads((root / "spec.json").read_text()))
    arrays, _ = read_container(root / "images.bin")
    records = []
    for line in (root / "index.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        key = row["image"].split("#", 1)[1]
        records.append(PairRecord(row["id"], arrays[key], row["caption"], tuple(row["attributes"])))
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise CorpusError("duplicate record ids in index")
    return records, spec
