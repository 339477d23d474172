"""Declarative freeze plans, the ablation presets, and parameter accounting.

Plan patterns are dotted paths with per-segment globs. ``**`` spans any
number of segments. A pattern that does not start with a root
(``image``/``text``/``head``) or ``**`` is matched against path suffixes, so
``"*.bias"`` and ``"**.bias"`` mean the same thing.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from fnmatch import fnmatchcase
from typing import Iterable, Mapping

import numpy as np

from . import adapters as ad
from .encoders import SizePreset, model_schema, size_preset

log = logging.getLogger(__name__)

ROOTS = ("image", "text", "head")
_SEGMENT_RE = re.compile(r"^[A-Za-z0-9_*?\[\]!]+$")


class PlanError(ValueError):
    pass


class ConservationViolation(AssertionError):
    """A parameter that should have been frozen changed."""


@dataclass(frozen=True)
class FreezePlan:
    unlocked_patterns: tuple[str, ...] = ()
    locked_patterns: tuple[str, ...] = ()
    description: str = ""
    adapters_trainable: bool = True

    def __post_init__(self):
        for p in self.unlocked_patterns + self.locked_patterns:
            _segments(p)

    def to_dict(self) -> dict:
        return {
            "unlocked_patterns": list(self.unlocked_patterns),
            "locked_patterns": list(self.locked_patterns),
            "description": self.description,
            "adapters_trainable": self.adapters_trainable,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "FreezePlan":
        return cls(
            tuple(d.get("unlocked_patterns", ())),
            tuple(d.get("locked_patterns", ())),
            d.get("description", ""),
            d.get("adapters_trainable", True),
        )

    def with_locked(self, patterns: Iterable[str]) -> "FreezePlan":
        return FreezePlan(self.unlocked_patterns, self.locked_patterns + tuple(patterns), self.description, self.adapters_trainable)


def _segments(pattern: str) -> list[str]:
    segs = pattern.split(".")
    if not pattern or any(not s for s in segs):
        raise PlanError(f"malformed pattern {pattern!r}")
    for s in segs:
        if s != "**" and not _SEGMENT_RE.match(s):
            raise PlanError(f"bad segment {s!r} in pattern {pattern!r}")
    if segs[0] not in ROOTS and segs[0] != "**":
        segs = ["**"] + segs
    return segs


def _match(segs: list[str], parts: list[str]) -> bool:
    if not segs:
        return not parts
    head, rest = segs[0], segs[1:]
    if head == "**":
        return any(_match(rest, parts[i:]) for i in range(len(parts) + 1))
    return bool(parts) and fnmatchcase(parts[0], head) and _match(rest, parts[1:])


def match_pattern(pattern: str, path: str) -> bool:
    return _match(_segments(pattern), path.split("."))


def resolve(plan: FreezePlan, paths: Iterable[str], strict: bool = False) -> tuple[set[str], list[dict]]:
    """Trainable subset of ``paths`` and diagnostics for patterns that hit nothing.

    With ``strict`` an unmatched pattern raises :class:`PlanError` instead.
    """
    paths = list(paths)
    split = {p: p.split(".") for p in paths}
    diagnostics = []
    trainable: set[str] = set()
    for kind, patterns in (("unlocked", plan.unlocked_patterns), ("locked", plan.locked_patterns)):
        for pat in patterns:
            segs = _segments(pat)
            hits = {p for p in paths if _match(segs, split[p])}
            if not hits:
                if strict:
                    raise PlanError(f"pattern {pat!r} matches no parameter path")
                diagnostics.append({"level": "warning", "kind": f"unmatched_{kind}_pattern", "pattern": pat})
            if kind == "unlocked":
                trainable |= hits
            else:
                trainable -= hits
    if plan.adapters_trainable:
        trainable |= {p for p in paths if ad.is_adapter_path(p)}
    return trainable, diagnostics


def apply_plan(model, plan: FreezePlan) -> list[dict]:
    """Set ``requires_grad`` on exactly the resolved trainable paths.

    Returns structured diagnostics (also logged) for patterns matching no path.
    """
    trainable, diagnostics = resolve(plan, model.params)
    for path, t in model.params.items():
        t.requires_grad = path in trainable
        if not t.requires_grad:
            t.grad = None
    for d in diagnostics:
        log.warning("freeze plan: %s %r", d["kind"], d["pattern"])
    return diagnostics


# ---------------------------------------------------------------------------
# presets

LN_BOTH = ("**.ln*.gamma", "**.ln*.beta")
BIASES = ("**.bias", "**.ln*.beta")
PROJECTIONS = ("head.image_proj", "head.text_proj")
TEMPERATURE = ("head.log_tau",)


def _ln(root: str) -> tuple[str, ...]:
    return (f"{root}.**.ln*.gamma", f"{root}.**.ln*.beta")


@dataclass(frozen=True)
class PresetRecipe:
    name: str
    row: str
    label: str
    plan: FreezePlan
    adapters: tuple[ad.AdapterSpec, ...] = ()
    reported_percent: float | None = None
    size: SizePreset | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "row": self.row,
            "label": self.label,
            "plan": self.plan.to_dict(),
            "adapters": [a.to_dict() for a in self.adapters],
        }


_DEEP = ad.AdapterSpec("deep", count=1, target="both")
_LWA = ad.AdapterSpec("layerwise", bottleneck_divisor=4, target="both")
_DEEP_IMG = ad.AdapterSpec("deep", count=1, target="image")
_LWA_IMG = ad.AdapterSpec("layerwise", bottleneck_divisor=4, target="image")

# name -> (row, label, unlocked patterns, adapters, reported "% Trained")
_PRESETS = {
    "frozen": ("a", "Frozen", (), (), 0.00),
    "ln_only": ("b", "LN Only", LN_BOTH, (), 0.04),
    "projection_only": ("c", "Projection Only", PROJECTIONS, (), 0.20),
    "lilt_ln": ("d", "LilT_LN", LN_BOTH + PROJECTIONS, (), 0.24),
    "lilt_bf": ("e", "LilT_BF", BIASES + PROJECTIONS, (), 0.31),
    "lilt_da_noln": ("f", "LilT_DA w/o LN", PROJECTIONS, (_DEEP,), 6.96),
    "lilt_da": ("g", "LilT_DA", LN_BOTH + PROJECTIONS, (_DEEP,), 6.99),
    "lilt_lwa_noln": ("h", "LilT_LwA w/o LN", PROJECTIONS, (_LWA,), 6.97),
    "lilt_lwa": ("i", "LilT_LwA", LN_BOTH + PROJECTIONS, (_LWA,), 7.01),
    "lilt_lwa_bitfit": ("j", "LilT_LwA (BitFit)", BIASES + PROJECTIONS, (_LWA,), 7.09),
    "lilt_da_bitfit": ("k", "LilT_DA (BitFit)", BIASES + PROJECTIONS, (_DEEP,), 7.06),
    "lit": ("l", "LiT", ("text.**",) + PROJECTIONS, (), 56.01),
    "lit_reversed": ("m", "LiT (reversed)", ("image.**",) + PROJECTIONS, (), 43.99),
    "lit_plus_lilt_da": ("n", "LiT + LilT_DA", ("text.**",) + _ln("image") + PROJECTIONS, (_DEEP_IMG,), 65.87),
    "lit_plus_lilt_lwa": ("o", "LiT + LilT_LwA", ("text.**",) + _ln("image") + PROJECTIONS, (_LWA_IMG,), 57.57),
    "clip": ("p", "CLIP", ("image.**", "text.**", "head.**"), (), 100.0),
}

PRESET_NAMES = tuple(_PRESETS)


def preset(name: str, size: SizePreset | str = "tiny", paper_literal: bool = False) -> PresetRecipe:
    """Recipe (adapters + freeze plan) for one ablation row.

    The temperature is trainable in every preset except ``frozen``, and in
    none when ``paper_literal`` pins it at 1.
    """
    if name not in _PRESETS:
        raise PlanError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    if isinstance(size, str):
        size = size_preset(size)
    row, label, unlocked, adapters, reported = _PRESETS[name]
    unlocked = tuple(unlocked)
    if paper_literal:
        locked = TEMPERATURE
    else:
        locked = ()
        if name != "frozen" and "head.**" not in unlocked:
            unlocked = unlocked + TEMPERATURE
    if name == "frozen":
        locked = TEMPERATURE
    plan = FreezePlan(unlocked, locked, description=f"({row}) {label}")
    return PresetRecipe(name, row, label, plan, tuple(adapters), reported, size)


def build_model(recipe: PresetRecipe, seed: int = 0, paper_literal: bool = False, allow_large: bool = False):
    """Instantiate, insert the recipe's adapters, and apply its plan."""
    from .encoders import DualEncoder

    model = DualEncoder.create(recipe.size, seed=seed, paper_literal=paper_literal, allow_large=allow_large)
    for spec in recipe.adapters:
        ad.insert(model, spec)
    apply_plan(model, recipe.plan)
    return model


# ---------------------------------------------------------------------------
# accounting


def param_group(path: str) -> str:
    if ad.is_adapter_path(path):
        return "adapter"
    if path == "head.log_tau":
        return "temperature"
    if path.startswith("head."):
        return "projection"
    parts = path.split(".")
    if any(s.startswith("ln") for s in parts[:-1]):
        return "ln"
    if parts[-1] == "bias":
        return "bias"
    return "tower"


@dataclass
class ParamAccounting:
    total_params: int
    trainable_params: int
    percent_trained: float  # adapters included in the denominator
    host_params: int  # total without inserted adapters
    percent_trained_host: float  # trainable / host_params
    groups: dict

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def account(shapes: Mapping[str, tuple], trainable: set[str]) -> ParamAccounting:
    groups: dict = {}
    total = train = host = 0
    for path, shape in shapes.items():
        n = int(np.prod(shape, dtype=np.int64))
        g = groups.setdefault(param_group(path), {"total": 0, "trainable": 0})
        g["total"] += n
        total += n
        if param_group(path) != "adapter":
            host += n
        if path in trainable:
            g["trainable"] += n
            train += n
    return ParamAccounting(
        total_params=total,
        trainable_params=train,
        percent_trained=100.0 * train / total if total else 0.0,
        host_params=host,
        percent_trained_host=100.0 * train / host if host else 0.0,
        groups=dict(sorted(groups.items())),
    )


def schema_count(size: SizePreset | str, plan: FreezePlan, adapter_specs=()) -> ParamAccounting:
    """Count parameters from the schema alone; nothing is allocated."""
    if isinstance(size, str):
        size = size_preset(size)
    shapes, _ = model_schema(size, adapter_specs)
    trainable, _ = resolve(plan, shapes, strict=True)
    return account(shapes, trainable)


def count_preset(name: str, size: SizePreset | str = "base", paper_literal: bool = False) -> ParamAccounting:
    recipe = preset(name, size, paper_literal)
    return schema_count(recipe.size, recipe.plan, recipe.adapters)


def model_accounting(model) -> ParamAccounting:
    return account(model.shapes(), set(model.trainable_paths()))


# ---------------------------------------------------------------------------
# conservation check


@dataclass
class FrozenReport:
    n_frozen: int
    n_trainable: int
    max_abs_change: dict  # group -> max |after - before| over trainable paths
    changed_groups: list

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _state(ckpt) -> Mapping[str, np.ndarray]:
    if isinstance(ckpt, tuple):
        ckpt = ckpt[0]
    if hasattr(ckpt, "state_dict"):
        return ckpt.state_dict()
    return ckpt


def verify_frozen(before, after, plan: FreezePlan | Iterable[str]) -> FrozenReport:
    """Check frozen parameters are bit-identical; summarize trainable drift.

    ``before``/``after`` are ``{path: array}`` mappings (or models, or
    ``(arrays, metadata)`` pairs). ``plan`` is a :class:`FreezePlan` or an
    explicit collection of trainable paths.
    """
    a, b = _state(before), _state(after)
    if set(a) != set(b):
        raise PlanError(f"checkpoints differ in paths: {sorted(set(a) ^ set(b))[:5]}")
    if isinstance(plan, FreezePlan):
        trainable, _ = resolve(plan, a)
    else:
        trainable = set(plan)
    max_change: dict = {}
    for path in sorted(a):
        x, y = np.asarray(a[path]), np.asarray(b[path])
        if path not in trainable:
            if x.shape != y.shape or x.tobytes() != y.tobytes():
                raise ConservationViolation(f"frozen parameter changed: {path}")
            continue
        g = param_group(path)
        delta = float(np.max(np.abs(y.astype(np.float64) - x))) if x.size else 0.0
        max_change[g] = max(max_change.get(g, 0.0), delta)
    changed = sorted(g for g, v in max_change.items() if v > 0)
    return FrozenReport(len(a) - len(trainable & set(a)), len(trainable & set(a)), max_change, changed)
