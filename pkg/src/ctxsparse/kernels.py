"""Deterministic dense numeric primitives the rest of the engine is built on.

Every kernel is a pure function over float64 arrays. Reduction orders are
fixed, so repeated calls on equal inputs are bit-identical. Ties in the
argmax family always break toward the lower index.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation


def as_matrix(x) -> np.ndarray:
    """Coerce input to a 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ContractViolation(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def matmul(a, b) -> np.ndarray:
    """Matrix product of two 2-D matrices."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ContractViolation(
            f"matmul dimension mismatch: {a.shape} @ {b.shape}"
        )
    return a @ b


def softmax_rows(x) -> np.ndarray:
    """Row-wise softmax with max subtraction for stability.

    Each output row sums to 1 within 1e-12 in double precision.
    """
    x = as_matrix(x)
    shifted = x - np.max(x, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def masked_softmax(x, g) -> np.ndarray:
    """Row-wise softmax restricted to entries where the binary mask is 1.

    Entry (i, j) is exp(x_ij)*g_ij / sum_k exp(x_ik)*g_ik. Masked entries
    are exactly 0 in the output. With an all-ones mask this follows the
    same code path as ``softmax_rows`` and returns bit-identical values.
    """
    x = as_matrix(x)
    g = as_matrix(g)
    if x.shape != g.shape:
        raise ContractViolation(f"shape mismatch: x {x.shape} vs mask {g.shape}")
    keep = g != 0.0
    if not keep.any(axis=-1).all():
        raise ContractViolation("masked_softmax: a mask row is all zeros")
    z = np.where(keep, x, -np.inf)
    shifted = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(shifted)  # exp(-inf) == 0.0 exactly
    return e / np.sum(e, axis=-1, keepdims=True)


def argmax_lastdim(d) -> np.ndarray:
    """Per-row index of the maximum value; ties break toward the lower index."""
    d = as_matrix(d)
    if d.shape[1] < 1:
        raise ContractViolation("argmax_lastdim: need at least one column")
    return np.argmax(d, axis=-1)


def topk_argmax(scores, k: int) -> np.ndarray:
    """Indices of the k largest scores, sorted ascending.

    Ties break toward the lower index, matching a stable descending sort.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    if k > s.size:
        raise ContractViolation(f"topk_argmax: k={k} exceeds {s.size} scores")
    if k < 0:
        raise ContractViolation("topk_argmax: k must be non-negative")
    # lexsort's last key is primary: descending score, then ascending index.
    order = np.lexsort((np.arange(s.size), -s))
    return np.sort(order[:k])
