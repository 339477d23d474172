"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations in this module build a
graph on the fly: each output remembers its parents and a closure that maps
the output gradient to parent gradients. :func:`backward` walks the graph in
reverse topological order, visiting every node once.

Gradients only flow into tensors with ``requires_grad`` set; frozen tensors
never get a ``grad`` slot, which is how freeze plans are enforced.

Arithmetic runs in float32 unless :func:`precision` switches the default to
float64 (needed for finite-difference checks).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateEmbeddingError(ValueError):
    """A row has (near) zero norm and cannot be normalized."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (e.g. backward from a non-scalar)."""


_default_dtype = np.float32


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the default float width (32 or 64)."""
    prev = _default_dtype
    set_default_dtype({32: np.float32, 64: np.float64}[bits])
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "param_path", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, param_path: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.param_path = param_path
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        name = f", path={self.param_path!r}" if self.param_path else ""
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad}{name})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("divide by a Tensor via scale_by(x, reciprocal)")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.param_path = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every trainable tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate nodes get the
    gradient of this pass only.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# primitives


def _check_tensor(x) -> Tensor:
    if not isinstance(x, Tensor):
        raise TypeError(f"expected Tensor, got {type(x).__name__}")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    ``b`` may be a 2-D weight applied to the last axis of an n-D ``a``, or
    both operands may share identical leading batch dimensions.
    """
    _check_tensor(a), _check_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2:
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(*lead, b.shape[1])

        def _bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make(out, (a, b), _bw, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ in {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def _bw_batched(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), _bw_batched, "bmm")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b`` matches the trailing dimensions of ``x``."""
    k = b.ndim
    if x.shape[x.ndim - k:] != b.shape:
        raise ShapeError(f"add_bias: {b.shape} does not match trailing dims of {x.shape}")
    lead_axes = tuple(range(x.ndim - k))

    def _bw(g):
        return g, (g.sum(axis=lead_axes) if b.requires_grad else None)

    return _make(x.data + b.data, (x, b), _bw, "add_bias")


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def _bw(g):
        return (g * b.data if a.requires_grad else None, g * a.data if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), _bw, "mul")


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``x`` by the single value held in ``s``."""
    if s.size != 1:
        raise ShapeError(f"scale_by: scalar expected, got shape {s.shape}")
    sv = s.data.reshape(())

    def _bw(g):
        gx = g * sv if x.requires_grad else None
        gs = np.sum(g * x.data).reshape(s.shape).astype(s.dtype) if s.requires_grad else None
        return gx, gs

    return _make(x.data * sv, (x, s), _bw, "scale_by")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    return _make(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.full(x.shape, g / n, dtype=x.dtype),),
        "mean",
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(axes) if axes is not None else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _make(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def diag(x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ShapeError(f"diag: square matrix expected, got {x.shape}")
    n = x.shape[0]

    def _bw(g):
        out = np.zeros(x.shape, dtype=x.dtype)
        out[np.arange(n), np.arange(n)] = g
        return (out,)

    return _make(np.diagonal(x.data).copy(), (x,), _bw, "diag")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer ``ids`` (any shape)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: ids outside [0, {table.shape[0]})")

    def _bw(g):
        gt = np.zeros(table.shape, dtype=table.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), _bw, "embedding")


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    data = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def _bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(data, tuple(xs), _bw, "concat")


def select(x: Tensor, index: int, axis: int) -> Tensor:
    """Pick one position along ``axis`` (dropping that axis)."""
    out = np.take(x.data, index, axis=axis)

    def _bw(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        sl = [slice(None)] * x.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _make(np.ascontiguousarray(out), (x,), _bw, "select")


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form (see ``kernels.GELU_VARIANT``)."""
    out = kernels.gelu_fwd(x.data)
    return _make(out, (x,), lambda g: (kernels.gelu_bwd(x.data, g),), "gelu")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs input {x.shape}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    x2 = x.data.reshape(-1, d)
    y, xhat, rstd = kernels.layer_norm_fwd(x2, gamma.data, beta.data, eps)

    def _bw(g):
        gx, gg, gb = kernels.layer_norm_bwd(g.reshape(-1, d), xhat, rstd, gamma.data)
        return gx.reshape(x.shape), gg, gb

    return _make(y.reshape(x.shape), (x, gamma, beta), _bw, "layer_norm")


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable bool) marks kept entries."""
    d = x.shape[-1]
    scores = x.data if mask is None else np.where(mask, x.data, -np.inf).astype(x.dtype)
    p = kernels.softmax_fwd(scores.reshape(-1, d)).reshape(x.shape)

    def _bw(g):
        return (kernels.softmax_bwd(p.reshape(-1, d), g.reshape(-1, d)).reshape(x.shape),)

    return _make(p, (x,), _bw, "softmax")


def log_softmax_rows(s: Tensor) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor, stabilized by the row max."""
    if s.ndim != 2:
        raise ShapeError(f"log_softmax_rows: 2-D input expected, got {s.shape}")
    x = np.ascontiguousarray(s.data)  # reduction order must not depend on memory layout
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def _bw(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _make(out, (s,), _bw, "log_softmax_rows")


def l2_normalize_rows(z: Tensor, min_norm: float = 1e-12) -> Tensor:
    norms = np.sqrt(np.sum(z.data.astype(np.float64) ** 2, axis=-1, keepdims=True))
    if np.any(norms < min_norm):
        bad = np.argwhere(norms[..., 0] < min_norm)[0].tolist()
        raise DegenerateEmbeddingError(f"row {bad} has norm below {min_norm}")
    norms = norms.astype(z.dtype)
    y = z.data / norms

    def _bw(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return ((g - y * dot) / norms,)

    return _make(y, (z,), _bw, "l2_normalize_rows")


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(
    f: Callable[[], Tensor],
    inputs: Tensor | Iterable[Tensor],
    h: float = 1e-5,
    floor: float = 1e-6,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    per_tensor: bool = False,
) -> float:
    """Worst relative error between autodiff and central differences.

    ``f`` is re-evaluated with each coordinate of each trainable input nudged
    by ``±h``. The relative error of a coordinate is
    ``|auto - numeric| / max(|auto|, |numeric|, floor)``. With ``per_tensor``
    the error of each input is instead ``||auto - numeric|| / max(||auto||,
    ||numeric||, floor)`` over its checked coordinates, which keeps
    near-zero coordinates (where the difference quotient is dominated by
    roundoff) from defining the result. Frozen inputs are skipped. With
    ``max_coords`` a random subset of coordinates per input is checked.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = [t for t in inputs if t.requires_grad]
    for t in inputs:
        t.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else np.array(t.grad, dtype=np.float64) for t in inputs]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t, auto in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        autos, numerics = [], []
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f().data)
            flat[i] = orig - h
            fm = float(f().data)
            flat[i] = orig
            autos.append(auto.reshape(-1)[i])
            numerics.append((fp - fm) / (2 * h))
        a, n = np.array(autos), np.array(numerics)
        if per_tensor:
            err = np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), floor)
        else:
            err = float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor), initial=0.0))
        worst = max(worst, float(err))
        t.grad = None
    return worst
