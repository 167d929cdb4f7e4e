"""Shared numerical helpers (stable softmax family, sign conventions)."""

from __future__ import annotations

import numpy as np


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction for overflow safety."""
    z = np.asarray(logits, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def logsumexp(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable log-sum-exp along ``axis``."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max(axis=axis, keepdims=True)
    out = np.log(np.exp(z - m).sum(axis=axis)) + np.squeeze(m, axis=axis)
    return out


def fix_column_signs(basis: np.ndarray) -> np.ndarray:
    """Flip basis columns so each column's largest-magnitude entry is positive.

    Makes eigenvector bases deterministic across LAPACK backends.
    """
    b = np.array(basis, dtype=np.float64, copy=True)
    for j in range(b.shape[1]):
        i = int(np.argmax(np.abs(b[:, j])))
        if b[i, j] < 0:
            b[:, j] = -b[:, j]
    return b
