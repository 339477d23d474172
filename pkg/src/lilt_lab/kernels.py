"""Kernel backend selection.

The compiled Cython kernels are used when the extension was built and
``LILT_LAB_PURE_PYTHON`` is unset; otherwise the numpy versions take over.
Both expose the same functions on 2-D (or 1-D for GELU) contiguous arrays.
"""

from __future__ import annotations

import os

import numpy as np

from . import _pykernels

_ckernels = None
if not os.environ.get("LILT_LAB_PURE_PYTHON"):
    try:
        from . import _ckernels
    except ImportError:  # extension not built
        _ckernels = None

BACKEND = "cython" if _ckernels is not None else "numpy"
GELU_VARIANT = "erf" if _ckernels is not None else _pykernels.GELU_VARIANT

_impl = _ckernels if _ckernels is not None else _pykernels


def _c(a):
    return np.ascontiguousarray(a)


def layer_norm_fwd(x, gamma, beta, eps, impl=None):
    impl = impl or _impl
    return impl.layer_norm_fwd(_c(x), _c(gamma), _c(beta), float(eps))


def layer_norm_bwd(gy, xhat, rstd, gamma, impl=None):
    impl = impl or _impl
    return impl.layer_norm_bwd(_c(gy), _c(xhat), _c(rstd), _c(gamma))


def gelu_fwd(x, impl=None):
    impl = impl or _impl
    flat = _c(x).reshape(-1)
    return impl.gelu_fwd(flat).reshape(x.shape)


def gelu_bwd(x, gy, impl=None):
    impl = impl or _impl
    return impl.gelu_bwd(_c(x).reshape(-1), _c(gy).reshape(-1)).reshape(x.shape)


def softmax_fwd(x, impl=None):
    impl = impl or _impl
    return impl.softmax_fwd(_c(x))


def softmax_bwd(p, gp, impl=None):
    impl = impl or _impl
    return impl.softmax_bwd(_c(p), _c(gp))


def match_ranks(sim, target, impl=None):
    impl = impl or _impl
    return impl.match_ranks(_c(sim), _c(np.asarray(target, dtype=np.int64)))


def implementations():
    """Available backends by name, for benchmarks and cross-checks."""
    out = {"numpy": _pykernels}
    if _ckernels is not None:
        out["cython"] = _ckernels
    return out
