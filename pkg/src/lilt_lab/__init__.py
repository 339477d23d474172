"""Desk-scale laboratory for parameter-efficient contrastive image-text alignment.

Frozen dual encoders are aligned by unlocking small parameter subsets
(layer norms, biases, projections) and/or inserting adapters. Parameter
accounting runs on schemas alone, so base/large counts need no allocation.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: E402,F401
