"""Pure-numpy reference versions of the loss kernels.

These are the fallback used when the compiled ``_kernels`` extension is not
available. Both backends share signatures and must agree to ~1e-12.
"""

from __future__ import annotations

import numpy as np


def _logsumexp(z: np.ndarray, axis: int) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def contrastive_loss(s: np.ndarray, kappa: float) -> tuple[float, np.ndarray, float]:
    """Symmetric InfoNCE over a stack of square similarity blocks.

    ``s`` has shape (G, N, N); positives sit on each block's diagonal. The
    returned loss is the mean over blocks of the per-block symmetric loss.

    Returns ``(loss, dloss/ds, dloss/dkappa)``.
    """
    s = np.ascontiguousarray(s, dtype=np.float64)
    if s.ndim != 3 or s.shape[1] != s.shape[2]:
        raise ValueError(f"expected (G, N, N) blocks, got shape {s.shape}")
    g, n, _ = s.shape
    z = s / kappa
    row_lse = _logsumexp(z, axis=2)  # (G, N)
    col_lse = _logsumexp(z, axis=1)  # (G, N)
    diag = np.diagonal(z, axis1=1, axis2=2)  # (G, N)
    loss = float(np.sum(row_lse + col_lse - 2.0 * diag) / (2.0 * n * g))

    p_row = np.exp(z - row_lse[:, :, None])
    p_col = np.exp(z - col_lse[:, None, :])
    dz = p_row + p_col
    idx = np.arange(n)
    dz[:, idx, idx] -= 2.0
    dz /= 2.0 * n * g
    ds = dz / kappa
    dkappa = float(-np.sum(dz * s) / (kappa * kappa))
    return loss, ds, dkappa


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    logits = np.ascontiguousarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError("labels must be a vector with one entry per row")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError("label out of range")
    lse = _logsumexp(logits, axis=1)
    rows = np.arange(n)
    loss = float(np.sum(lse - logits[rows, labels]) / n)
    d = np.exp(logits - lse[:, None])
    d[rows, labels] -= 1.0
    d /= n
    return loss, d


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    lse = _logsumexp(z, axis=-1)
    return np.exp(z - np.expand_dims(lse, -1))
