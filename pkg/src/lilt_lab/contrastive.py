"""Symmetric contrastive (InfoNCE) objective for paired image/text batches.

For a batch of ``b`` pairs with similarity matrix ``s`` (image rows, text
columns) and temperature ``tau``::

    L_i2t[k] = -(1/b) * log softmax_j(s[k, :] / tau)[k]
    L_t2i[k] = -(1/b) * log softmax_j(s[:, k] / tau)[k]
    L        = 1/2 * sum_k (L_i2t[k] + L_t2i[k])

The ``1/b`` sits inside each per-sample term, so ``L`` is the mean of the two
directional batch means. ``tau`` may be a float or a scalar tensor holding
``log tau`` (the trainable parameterization, which keeps it positive).
"""

from __future__ import annotations

from . import tensor as T


def similarity(z_img: T.Tensor, z_txt: T.Tensor) -> T.Tensor:
    """``s[k, j] = z_img[k] . z_txt[j]``; cosine similarity for unit rows."""
    if z_img.ndim != 2 or z_txt.ndim != 2 or z_img.shape != z_txt.shape:
        raise T.ShapeError(f"similarity: need matching (b, d) batches, got {z_img.shape} and {z_txt.shape}")
    return T.matmul(z_img, T.transpose(z_txt))


def scaled(s: T.Tensor, tau=1.0, log_tau: T.Tensor | None = None) -> T.Tensor:
    """Logits ``s / tau``; a ``log_tau`` tensor takes precedence over ``tau``."""
    if log_tau is not None:
        return T.scale_by(s, T.exp(T.neg(log_tau)))
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return s if tau == 1.0 else T.scale(s, 1.0 / tau)


def loss_i2t(s: T.Tensor, tau=1.0, log_tau: T.Tensor | None = None) -> T.Tensor:
    b = s.shape[0]
    return T.scale(T.diag(T.log_softmax_rows(scaled(s, tau, log_tau))), -1.0 / b)


def loss_t2i(s: T.Tensor, tau=1.0, log_tau: T.Tensor | None = None) -> T.Tensor:
    b = s.shape[0]
    return T.scale(T.diag(T.log_softmax_rows(T.transpose(scaled(s, tau, log_tau)))), -1.0 / b)


def total_loss(s: T.Tensor, tau=1.0, log_tau: T.Tensor | None = None) -> T.Tensor:
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise T.ShapeError(f"total_loss: square similarity matrix expected, got {s.shape}")
    logits = scaled(s, tau, log_tau)
    b = s.shape[0]
    li = T.diag(T.log_softmax_rows(logits))
    lt = T.diag(T.log_softmax_rows(T.transpose(logits)))
    return T.scale(T.sum(T.add(li, lt)), -0.5 / b)
