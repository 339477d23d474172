"""Layer-norm drift between two checkpoints and the progressive LN-locking sweep.

Drift of one LN sublayer is the L1 norm of the elementwise change of its
gamma and beta vectors. Depth correlations use the 1-based layer index with
ln1 and ln2 pooled per layer.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import checkpoint

TOWERS = ("image", "text")
SUBLAYERS = ("ln1", "ln2")
_LAYER_LN = re.compile(r"^(image|text)\.layer\.(\d+)\.(ln1|ln2)\.(gamma|beta)$")


class CorrelationUndefinedError(ValueError):
    """A correlation was requested for a series with zero variance."""


class ArchitectureMismatchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# correlation


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Sample Pearson correlation, accumulated in one pass (Welford updates)."""
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise CorrelationUndefinedError("need at least two points")
    n = 0
    mx = my = 0.0
    sxx = syy = sxy = 0.0
    for a, b in zip(x, y):
        a, b = float(a), float(b)
        n += 1
        dx = a - mx
        mx += dx / n
        dy = b - my
        my += dy / n
        # co-moment update uses the old x-residual and the new y-residual
        sxx += dx * (a - mx)
        syy += dy * (b - my)
        sxy += dx * (b - my)
    if sxx <= 0.0 or syy <= 0.0:
        raise CorrelationUndefinedError("zero variance in a correlation argument")
    r = sxy / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


# ---------------------------------------------------------------------------
# drift


@dataclass(frozen=True)
class SublayerDrift:
    tower: str
    layer: int  # 1-based
    sublayer: str
    gamma: float
    beta: float

    @property
    def total(self) -> float:
        return self.gamma + self.beta


@dataclass
class DriftReport:
    entries: list  # SublayerDrift, ordered by tower, layer, sublayer
    pearson_r: dict  # tower -> r (None when undefined)
    sublayer_pearson_r: dict  # (tower, sublayer) -> r or None
    correlation_undefined: list = field(default_factory=list)

    def per_layer(self, tower: str) -> list[float]:
        """Pooled (ln1 + ln2) drift per layer, shallowest first."""
        layers = sorted({e.layer for e in self.entries if e.tower == tower})
        return [sum(e.total for e in self.entries if e.tower == tower and e.layer == i) for i in layers]

    def counts(self) -> dict:
        return {t: sum(1 for e in self.entries if e.tower == t) for t in TOWERS}

    def to_dict(self) -> dict:
        return {
            "entries": [
                {"tower": e.tower, "layer": e.layer, "sublayer": e.sublayer, "gamma": e.gamma, "beta": e.beta, "drift": e.total}
                for e in self.entries
            ],
            "per_layer": {t: self.per_layer(t) for t in TOWERS},
            "pearson_r": dict(self.pearson_r),
            "sublayer_pearson_r": {f"{t}.{s}": r for (t, s), r in self.sublayer_pearson_r.items()},
            "correlation_undefined": list(self.correlation_undefined),
            "counts": self.counts(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "sublayer", "tower", "drift", "gamma", "beta"])
        for e in self.entries:
            w.writerow([e.layer, e.sublayer, e.tower, repr(e.total), repr(e.gamma), repr(e.beta)])
        return buf.getvalue()

    def write(self, out_dir: str | Path, stem: str = "drift") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jp, cp = out / f"{stem}.json", out / f"{stem}.csv"
        jp.write_text(self.to_json())
        cp.write_text(self.to_csv())
        return jp, cp


def _state(ckpt) -> Mapping[str, np.ndarray]:
    if isinstance(ckpt, (str, Path)):
        arrays, _ = checkpoint.read_container(ckpt)
        return arrays
    if hasattr(ckpt, "state_dict"):
        return ckpt.state_dict()
    return ckpt


def _l1(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def _safe_pearson(x, y):
    try:
        return pearson(x, y)
    except CorrelationUndefinedError:
        return None


def ln_drift(before, after, strict: bool = True) -> DriftReport:
    """Per-sublayer LN drift between two checkpoints (paths, models or state dicts).

    Raises :class:`ArchitectureMismatchError` when parameter paths or shapes
    differ. A tower whose drift series has zero variance raises
    :class:`CorrelationUndefinedError` under ``strict``; otherwise its
    correlation is ``None`` and the tower is listed in
    ``correlation_undefined``.
    """
    a, b = _state(before), _state(after)
    if set(a) != set(b):
        diff = sorted(set(a) ^ set(b))[:5]
        raise ArchitectureMismatchError(f"checkpoints have different parameter paths: {diff}")
    for p in a:
        if np.shape(a[p]) != np.shape(b[p]):
            raise ArchitectureMismatchError(f"shape mismatch at {p}: {np.shape(a[p])} vs {np.shape(b[p])}")
    found: dict = {}
    for p in a:
        m = _LAYER_LN.match(p)
        if m:
            tower, layer, sub, leaf = m.group(1), int(m.group(2)), m.group(3), m.group(4)
            found.setdefault((tower, layer + 1, sub), {})[leaf] = _l1(a[p], b[p])
    entries = [
        SublayerDrift(t, i, s, v.get("gamma", 0.0), v.get("beta", 0.0))
        for (t, i, s), v in sorted(found.items(), key=lambda kv: (TOWERS.index(kv[0][0]), kv[0][1], kv[0][2]))
    ]
    report = DriftReport(entries, {}, {})
    for tower in TOWERS:
        series = report.per_layer(tower)
        depth = list(range(1, len(series) + 1))
        r = _safe_pearson(depth, series)
        if r is None:
            if strict:
                raise CorrelationUndefinedError(f"{tower} drift series has zero variance (or fewer than 2 layers)")
            report.correlation_undefined.append(tower)
        report.pearson_r[tower] = r
        for sub in SUBLAYERS:
            sub_series = [e.total for e in entries if e.tower == tower and e.sublayer == sub]
            report.sublayer_pearson_r[(tower, sub)] = _safe_pearson(list(range(1, len(sub_series) + 1)), sub_series)
    return report


# ---------------------------------------------------------------------------
# progressive locking


@dataclass(frozen=True)
class LockPattern:
    """``A`` locks the deepest ``k`` text LNs and the shallowest ``k`` image LNs; ``B`` the reverse."""

    pattern: str
    k: int

    def __post_init__(self):
        if self.pattern not in ("A", "B"):
            raise ValueError(f"lock pattern must be 'A' or 'B', got {self.pattern!r}")
        if self.k < 0:
            raise ValueError("k must be non-negative")

    def layers(self, image_depth: int, text_depth: int) -> dict:
        """Locked 0-based layer indices per tower."""
        for depth in (image_depth, text_depth):
            if self.k > depth:
                raise ValueError(f"k={self.k} exceeds tower depth {depth}")
        shallow = lambda d: list(range(self.k))  # noqa: E731
        deep = lambda d: list(range(d - self.k, d))  # noqa: E731
        if self.pattern == "A":
            return {"image": shallow(image_depth), "text": deep(text_depth)}
        return {"image": deep(image_depth), "text": shallow(text_depth)}

    def locked_patterns(self, image_depth: int, text_depth: int) -> tuple[str, ...]:
        locked = self.layers(image_depth, text_depth)
        return tuple(f"{tower}.layer.{i}.ln*.*" for tower in TOWERS for i in locked[tower])


def _run_arm(args):
    from . import trainer

    cfg, pattern, k = args
    res = trainer.train(cfg, write=bool(cfg.out_dir), evaluate=True)
    row = {"pattern": pattern, "k": k, "locked": list(cfg.locked_patterns), "final_loss": res.metrics[-1]["loss"]}
    row.update({key: v for key, v in res.heldout.items() if key.startswith(("tr@", "ir@", "mean_"))})
    return row


def progressive_lock_run(
    base_cfg,
    patterns: Iterable[str] = ("A", "B"),
    ks: Iterable[int] | None = None,
    jobs: int = 1,
    out_dir: str | Path | None = None,
) -> list[dict]:
    """Train the LN-only regime once per (pattern, k) with extra LNs locked.

    Arms are independent and seed-deterministic, so ``jobs > 1`` only changes
    wall time. Rows come back ordered by pattern then k.
    """
    from . import encoders

    size = encoders.size_preset(base_cfg.size)
    di, dt = size.image.depth, size.text.depth
    ks = list(range(min(di, dt) + 1)) if ks is None else list(ks)
    arms = []
    for pattern in patterns:
        for k in ks:
            lp = LockPattern(pattern, k)
            run_dir = str(Path(out_dir) / f"{pattern}_k{k}") if out_dir else ""
            cfg = base_cfg.replace(
                preset="lilt_ln",
                locked_patterns=tuple(base_cfg.locked_patterns) + lp.locked_patterns(di, dt),
                out_dir=run_dir,
            )
            arms.append((cfg, pattern, k))
    if jobs > 1 and len(arms) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_arm, arms))
    else:
        rows = [_run_arm(a) for a in arms]
    return rows


def lock_rows_to_csv(rows: Sequence[dict]) -> str:
    keys = ["pattern", "k", "tr@1", "tr@5", "tr@10", "ir@1", "ir@5", "ir@10", "mean_tr", "mean_ir", "final_loss"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(keys)
    for r in rows:
        w.writerow([r.get(k) for k in keys])
    return buf.getvalue()
