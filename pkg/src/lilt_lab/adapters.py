"""Layerwise bottleneck adapters and deep (stack-growing) adapters.

Both kinds start as exact identities: the layerwise up-projection and the
deep layer's attention-output and second MLP matrices are zero-initialized,
so inserting them leaves every forward output bit-identical until the first
optimizer step.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import layers
from . import tensor as T


class AdapterConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AdapterSpec:
    kind: str  # "layerwise" | "deep"
    bottleneck_divisor: int = 4
    count: int = 1
    target: str = "both"  # "image" | "text" | "both"

    def __post_init__(self):
        if self.kind not in ("layerwise", "deep"):
            raise AdapterConfigError(f"unknown adapter kind {self.kind!r}")
        if self.target not in ("image", "text", "both"):
            raise AdapterConfigError(f"unknown adapter target {self.target!r}")
        if self.count < 1 or self.bottleneck_divisor < 1:
            raise AdapterConfigError("count and bottleneck_divisor must be >= 1")

    def towers(self) -> tuple[str, ...]:
        return ("image", "text") if self.target == "both" else (self.target,)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterSpec":
        return cls(**d)


def bottleneck_dim(hidden: int, spec: AdapterSpec) -> int:
    if hidden % spec.bottleneck_divisor:
        raise AdapterConfigError(f"hidden {hidden} not divisible by {spec.bottleneck_divisor}")
    return hidden // spec.bottleneck_divisor


def layerwise_param_count(hidden: int, r: int) -> int:
    return hidden * r + r + r * hidden + hidden


def adapter_schema(root: str, cfg, spec: AdapterSpec, start: int = 0) -> tuple[dict, set]:
    """Shapes added to tower ``root`` by ``spec`` and the zero-initialized paths.

    ``start`` offsets deep-adapter indices when a tower is grown twice.
    """
    shapes, zero = {}, set()
    if spec.kind == "layerwise":
        r = bottleneck_dim(cfg.hidden, spec)
        for i in range(cfg.depth):
            for slot in ("adapter1", "adapter2"):
                prefix = f"{root}.layer.{i}.{slot}"
                s = layers.bottleneck_schema(prefix, cfg.hidden, r)
                shapes.update(s)
                zero.update(p for p in s if ".up." in p)
    else:
        for k in range(start, start + spec.count):
            prefix = f"{root}.deep_adapter.{k}"
            s = layers.encoder_layer_schema(prefix, cfg.hidden, cfg.mlp_ratio)
            shapes.update(s)
            zero.update(p for p in s if ".attn.o." in p or ".mlp.fc2." in p)
    return shapes, zero


def is_adapter_path(path: str) -> bool:
    return ".adapter1." in path or ".adapter2." in path or ".deep_adapter." in path


def layerwise_forward(params, prefix: str, x: T.Tensor) -> T.Tensor:
    """``x + up(gelu(down(x)))`` for the adapter stored under ``prefix``."""
    return layers.bottleneck_forward(params, prefix, x)


def insert_layerwise(model, spec: AdapterSpec):
    """Add two bottleneck adapters per layer (before ln1 and ln2) in place."""
    if spec.kind != "layerwise":
        raise AdapterConfigError("insert_layerwise needs a layerwise spec")
    for tower in spec.towers():
        if model.has_layerwise(tower):
            raise AdapterConfigError(f"{tower} tower already has layerwise adapters")
    model.add_adapters(spec)
    return model


def insert_deep(model, spec: AdapterSpec):
    """Grow each targeted tower by ``spec.count`` trainable encoder layers."""
    if spec.kind != "deep":
        raise AdapterConfigError("insert_deep needs a deep spec")
    model.add_adapters(spec)
    return model


def insert(model, spec: AdapterSpec):
    return insert_layerwise(model, spec) if spec.kind == "layerwise" else insert_deep(model, spec)
