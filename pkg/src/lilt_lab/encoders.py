"""Image and text transformer towers with projection heads.

The parameter schema (path -> shape) is the single source of truth: the
instantiated :class:`DualEncoder` allocates exactly the schema's arrays, and
:func:`model_schema` can be counted without allocating anything, which is how
base/large accounting is done.

Path roots are ``image.``, ``text.`` and ``head.``.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import adapters as ad
from . import corpus
from . import layers
from . import tensor as T
from .kernels import GELU_VARIANT

BLOCK_ORDERING = "pre-ln"
DEFAULT_TAU = 0.07


class VocabularyError(ValueError):
    pass


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TowerConfig:
    modality: str  # "image" | "text"
    depth: int
    hidden: int
    heads: int
    mlp_ratio: int = 4
    vocab_size: int = 0
    max_seq_len: int = 0
    type_vocab_size: int = 2
    image_size: int = 0
    patch_size: int = 0
    channels: int = 3
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.modality not in ("image", "text"):
            raise ModelConfigError(f"unknown modality {self.modality!r}")
        if self.hidden % self.heads:
            raise ModelConfigError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.modality == "image":
            if self.patch_size <= 0 or self.image_size % self.patch_size:
                raise ModelConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        elif self.vocab_size <= 0 or self.max_seq_len <= 0:
            raise ModelConfigError("text tower needs vocab_size and max_seq_len")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1 if self.modality == "image" else self.max_seq_len

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class SizePreset:
    name: str
    image: TowerConfig
    text: TowerConfig
    proj_dim: int = 256
    schema_only: bool = False

    def tower(self, root: str) -> TowerConfig:
        return self.image if root == "image" else self.text

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "image": self.image.to_dict(),
            "text": self.text.to_dict(),
            "proj_dim": self.proj_dim,
            "schema_only": self.schema_only,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SizePreset":
        return cls(d["name"], TowerConfig(**d["image"]), TowerConfig(**d["text"]), d["proj_dim"], d["schema_only"])


def _bert(depth, hidden, heads):
    return TowerConfig("text", depth, hidden, heads, vocab_size=30522, max_seq_len=512)


def _vit(depth, hidden, heads, image_size=256):
    return TowerConfig("image", depth, hidden, heads, image_size=image_size, patch_size=16)


_SIZES = {
    "tiny": (
        TowerConfig("image", 4, 128, 4, image_size=32, patch_size=8),
        TowerConfig("text", 4, 128, 4, vocab_size=512, max_seq_len=16),
        False,
    ),
    "bert_tiny": (_vit(12, 192, 3), _bert(2, 128, 2), True),
    "small": (_vit(12, 384, 6), _bert(4, 512, 8), True),
    "base": (_vit(12, 768, 12), _bert(12, 768, 12), True),
    "large": (_vit(24, 1024, 16), _bert(24, 1024, 16), True),
}

SIZE_NAMES = tuple(_SIZES)


def size_preset(name: str) -> SizePreset:
    """Look up a size by name.

    ``"<image>:<text>"`` mixes towers from two sizes (asymmetric encoders),
    e.g. ``"base:bert_tiny"`` pairs a base image tower with a tiny text tower.
    """
    if ":" in name:
        img_name, txt_name = name.split(":", 1)
        img, txt = size_preset(img_name), size_preset(txt_name)
        return SizePreset(name, img.image, txt.text, schema_only=img.schema_only or txt.schema_only)
    if name not in _SIZES:
        raise ModelConfigError(f"unknown size preset {name!r}; choose from {', '.join(SIZE_NAMES)}")
    image, text, schema_only = _SIZES[name]
    return SizePreset(name, image, text, schema_only=schema_only)


# ---------------------------------------------------------------------------
# schema


def tower_schema(root: str, cfg: TowerConfig) -> dict:
    d = cfg.hidden
    s: dict = {}
    if cfg.modality == "text":
        s[f"{root}.embed.token"] = (cfg.vocab_size, d)
        s[f"{root}.embed.position"] = (cfg.max_seq_len, d)
        s[f"{root}.embed.type"] = (cfg.type_vocab_size, d)
        s.update(layers.ln_schema(f"{root}.ln_embed", d))
    else:
        s.update(layers.linear_schema(f"{root}.embed.patch", cfg.channels * cfg.patch_size**2, d))
        s[f"{root}.embed.cls"] = (1, d)
        s[f"{root}.embed.position"] = (cfg.n_patches + 1, d)
    for i in range(cfg.depth):
        s.update(layers.encoder_layer_schema(f"{root}.layer.{i}", d, cfg.mlp_ratio))
    if cfg.modality == "image":
        s.update(layers.ln_schema(f"{root}.ln_final", d))
    return s


def head_schema(size: SizePreset) -> dict:
    return {
        "head.image_proj": (size.image.hidden, size.proj_dim),
        "head.text_proj": (size.text.hidden, size.proj_dim),
        "head.log_tau": (),
    }


def model_schema(size: SizePreset, adapter_specs=()) -> tuple[dict, set]:
    """Every parameter path with its shape, plus the zero-initialized paths."""
    shapes = {}
    zero: set = set()
    for root in ("image", "text"):
        shapes.update(tower_schema(root, size.tower(root)))
    shapes.update(head_schema(size))
    deep_counts = {"image": 0, "text": 0}
    for spec in adapter_specs:
        for root in spec.towers():
            extra, z = ad.adapter_schema(root, size.tower(root), spec, start=deep_counts[root])
            if spec.kind == "deep":
                deep_counts[root] += spec.count
            dup = set(extra) & set(shapes)
            if dup:
                raise ad.AdapterConfigError(f"adapter paths already present: {sorted(dup)[:3]}")
            shapes.update(extra)
            zero |= z
    return shapes, zero


def init_array(path: str, shape, seed: int, zero: bool, dtype, paper_literal: bool = False) -> np.ndarray:
    """Deterministic per-path initialization, independent of insertion order."""
    leaf = path.rsplit(".", 1)[-1]
    if zero or leaf in ("bias", "beta"):
        return np.zeros(shape, dtype=dtype)
    if leaf == "gamma":
        return np.ones(shape, dtype=dtype)
    if path == "head.log_tau":
        return np.full(shape, 0.0 if paper_literal else math.log(DEFAULT_TAU), dtype=dtype)
    rng = np.random.default_rng([seed, zlib.crc32(path.encode())])
    # linear maps N(0, 1/fan_in); lookup tables (tokens, positions, cls) N(0, 1)
    # so position is on the same scale as content before the first LN
    std = shape[0] ** -0.5 if leaf in ("weight", "image_proj", "text_proj") else 1.0
    return (rng.standard_normal(shape) * std).astype(dtype)


def param_count(shapes: dict) -> int:
    return int(sum(int(np.prod(s, dtype=np.int64)) for s in shapes.values()))


# ---------------------------------------------------------------------------
# model


@dataclass
class DualEncoder:
    size: SizePreset
    seed: int = 0
    paper_literal: bool = False
    params: dict = field(default_factory=dict)
    adapter_specs: list = field(default_factory=list)

    @classmethod
    def create(cls, size: SizePreset | str, seed: int = 0, paper_literal: bool = False, allow_large: bool = False):
        if isinstance(size, str):
            size = size_preset(size)
        if size.schema_only and not allow_large:
            raise ModelConfigError(f"size {size.name!r} is schema-only; pass allow_large=True to allocate it")
        model = cls(size=size, seed=seed, paper_literal=paper_literal)
        shapes, zero = model_schema(size)
        model._allocate(shapes, zero)
        return model

    def _allocate(self, shapes: dict, zero: set) -> None:
        dtype = T.default_dtype()
        for path, shape in shapes.items():
            data = init_array(path, shape, self.seed, path in zero, dtype, self.paper_literal)
            self.params[path] = T.Tensor(data, requires_grad=False, param_path=path)

    # -- adapters ----------------------------------------------------------
    def has_layerwise(self, root: str) -> bool:
        return f"{root}.layer.0.adapter1.down.weight" in self.params

    def deep_count(self, root: str) -> int:
        k = 0
        while f"{root}.deep_adapter.{k}.ln1.gamma" in self.params:
            k += 1
        return k

    def add_adapters(self, spec: ad.AdapterSpec) -> None:
        before = set(self.params)
        new_shapes, zero = {}, set()
        for root in spec.towers():
            start = self.deep_count(root) if spec.kind == "deep" else 0
            s, z = ad.adapter_schema(root, self.size.tower(root), spec, start=start)
            new_shapes.update(s)
            zero |= z
        if before & set(new_shapes):
            raise ad.AdapterConfigError("adapter insertion would overwrite existing parameters")
        self._allocate(new_shapes, zero)
        for p in new_shapes:
            self.params[p].requires_grad = True
        self.adapter_specs.append(spec)

    # -- bookkeeping -------------------------------------------------------
    def paths(self) -> list[str]:
        return list(self.params)

    def shapes(self) -> dict:
        return {p: t.shape for p, t in self.params.items()}

    def trainable_paths(self) -> list[str]:
        return [p for p, t in self.params.items() if t.requires_grad]

    def state_dict(self) -> dict:
        return {p: t.data for p, t in self.params.items()}

    def load_state(self, arrays: dict) -> None:
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise ModelConfigError(f"state does not match model paths: {sorted(missing)[:5]}")
        for p, t in self.params.items():
            if tuple(arrays[p].shape) != t.shape:
                raise ModelConfigError(f"shape mismatch at {p}: {arrays[p].shape} vs {t.shape}")
            t.data = np.array(arrays[p], dtype=t.dtype)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def metadata(self) -> dict:
        return {
            "size": self.size.to_dict(),
            "seed": self.seed,
            "paper_literal": self.paper_literal,
            "adapters": [s.to_dict() for s in self.adapter_specs],
            "block_ordering": BLOCK_ORDERING,
            "gelu": GELU_VARIANT,
        }

    # -- forward -----------------------------------------------------------
    def _stack(self, root: str, x: T.Tensor, key_mask=None) -> T.Tensor:
        cfg = self.size.tower(root)
        lw = self.has_layerwise(root)
        for i in range(cfg.depth):
            x = layers.encoder_layer(self.params, f"{root}.layer.{i}", x, cfg.heads, cfg.ln_eps, key_mask, lw)
        for k in range(self.deep_count(root)):
            x = layers.encoder_layer(self.params, f"{root}.deep_adapter.{k}", x, cfg.heads, cfg.ln_eps, key_mask)
        return x

    def encode_text(self, token_ids) -> T.Tensor:
        """CLS hidden state of each sequence (before projection)."""
        cfg = self.size.text
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.ndim != 2:
            raise T.ShapeError(f"token ids must be (batch, seq), got {ids.shape}")
        b, n = ids.shape
        if n > cfg.max_seq_len:
            raise T.ShapeError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
            raise VocabularyError(f"token id outside [0, {cfg.vocab_size})")
        p = self.params
        x = T.embedding(p["text.embed.token"], ids)
        x = T.add_bias(x, T.embedding(p["text.embed.position"], np.arange(n)))
        x = T.add_bias(x, T.embedding(p["text.embed.type"], np.zeros(n, dtype=np.int64)))
        x = layers.ln(p, "text.ln_embed", x, cfg.ln_eps)
        x = self._stack("text", x, key_mask=ids != corpus.PAD)
        return T.select(x, 0, axis=1)

    def encode_image(self, pixels) -> T.Tensor:
        cfg = self.size.image
        px = np.asarray(pixels.data if isinstance(pixels, T.Tensor) else pixels, dtype=T.default_dtype())
        if px.ndim != 4 or px.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
            raise T.ShapeError(
                f"pixels must be (batch, {cfg.channels}, {cfg.image_size}, {cfg.image_size}), got {px.shape}"
            )
        b = px.shape[0]
        g, ps = cfg.image_size // cfg.patch_size, cfg.patch_size
        patches = px.reshape(b, cfg.channels, g, ps, g, ps).transpose(0, 2, 4, 1, 3, 5).reshape(b, g * g, -1)
        p = self.params
        x = layers.linear(p, "image.embed.patch", T.Tensor(np.ascontiguousarray(patches)))
        cls_tok = T.embedding(p["image.embed.cls"], np.zeros((b, 1), dtype=np.int64))
        x = T.concat([cls_tok, x], axis=1)
        x = T.add_bias(x, p["image.embed.position"])
        x = self._stack("image", x)
        x = layers.ln(p, "image.ln_final", x, cfg.ln_eps)
        return T.select(x, 0, axis=1)

    def project(self, h: T.Tensor, root: str) -> T.Tensor:
        """Linear head then unit-normalization."""
        return T.l2_normalize_rows(T.matmul(h, self.params[f"head.{root}_proj"]))

    def embed_text(self, token_ids) -> T.Tensor:
        return self.project(self.encode_text(token_ids), "text")

    def embed_image(self, pixels) -> T.Tensor:
        return self.project(self.encode_image(pixels), "image")

    def log_tau(self) -> T.Tensor:
        return self.params["head.log_tau"]


def project(encoder_output: T.Tensor, weight: T.Tensor) -> T.Tensor:
    return T.l2_normalize_rows(T.matmul(encoder_output, weight))
