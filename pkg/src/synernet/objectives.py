"""Scalar objectives and the zero-shot classifier, with analytic gradients."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .encoders import Embedding

W_CON_BOUNDS = (0.5, 2.0)
W_CLS_BOUNDS = (0.1, 1.0)


class NumericError(FloatingPointError):
    def __init__(self, term: str, value: float, step: int | None = None):
        where = "" if step is None else f" at step {step}"
        super().__init__(f"non-finite {term} ({value!r}){where}")
        self.term = term
        self.step = step


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    s: np.ndarray

    def __post_init__(self):
        if np.any(np.abs(self.s) > 1.0 + 1e-6):
            raise ValueError("similarities must lie in [-1, 1]")

    def __array__(self, dtype=None, copy=None):
        return self.s if dtype is None else self.s.astype(dtype)


@dataclass(frozen=True)
class LossBundle:
    j_con: float
    j_cls: float
    w_con: float
    w_cls: float
    kappa: float
    j_total: float

    def row(self, step: int) -> dict:
        return {"step": step, **asdict(self)}


def _rows(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return np.atleast_2d(x.astype(np.float64))
    return np.stack([e.values if isinstance(e, Embedding) else np.asarray(e, dtype=np.float64) for e in x])


def normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def similarity_matrix(img, txt) -> SimilarityMatrix:
    a, b = _rows(img), _rows(txt)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    s = normalize_rows(a) @ normalize_rows(b).T
    return SimilarityMatrix(np.clip(s, -1.0, 1.0))


def zero_shot_probs(s_row, kappa: float) -> np.ndarray:
    s = np.asarray(s_row, dtype=np.float64)
    if s.shape[-1] == 0:
        raise ValueError("empty vocabulary")
    return kernels.softmax_rows(s / kappa)


def contrastive_loss(s, kappa: float) -> tuple[float, np.ndarray, float]:
    """Symmetric InfoNCE. ``s`` is one (N, N) block or a (G, N, N) stack.

    Returns (loss, d loss / d s, d loss / d kappa); a stack's loss is the mean
    of its blocks.
    """
    arr = np.asarray(s, dtype=np.float64)
    if arr.ndim == 2:
        if arr.shape[0] != arr.shape[1]:
            raise ValueError("contrastive loss needs a square similarity matrix")
        loss, ds, dk = kernels.contrastive_loss(arr[None], kappa)
        return loss, ds[0], dk
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ValueError("contrastive loss needs square similarity blocks")
    return kernels.contrastive_loss(arr, kappa)


def classification_loss(features, labels: Sequence[int], theta_cls: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy of ``theta_cls @ feature`` logits.

    Returns (loss, d loss / d theta_cls, d loss / d features).
    """
    x = _rows(features)
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= theta_cls.shape[0]):
        raise ValueError("label out of range")
    logits = x @ theta_cls.T
    loss, dlogits = kernels.cross_entropy(logits, labels)
    return loss, dlogits.T @ x, dlogits @ theta_cls


def _clip(x: float, lo: float, hi: float) -> tuple[float, float]:
    return min(max(x, lo), hi), (1.0 if lo < x < hi else 0.0)


def balance_weights(w_con_param: float, w_cls_param: float) -> tuple[float, float]:
    """Clipped numerators over the *unclipped* parameter sum, as written."""
    denom = float(w_con_param) + float(w_cls_param)
    if not denom > 0.0:
        raise ValueError("w_con_param + w_cls_param must be positive")
    return _clip(float(w_con_param), *W_CON_BOUNDS)[0] / denom, _clip(float(w_cls_param), *W_CLS_BOUNDS)[0] / denom


def balance_weights_jacobian(w_con_param: float, w_cls_param: float) -> np.ndarray:
    """2x2 matrix ``[[dw_con/dp_con, dw_con/dp_cls], [dw_cls/dp_con, dw_cls/dp_cls]]``."""
    p1, p2 = float(w_con_param), float(w_cls_param)
    s = p1 + p2
    c1, g1 = _clip(p1, *W_CON_BOUNDS)
    c2, g2 = _clip(p2, *W_CLS_BOUNDS)
    return np.array([
        [g1 / s - c1 / s**2, -c1 / s**2],
        [-c2 / s**2, g2 / s - c2 / s**2],
    ])


def total_loss(j_con: float, j_cls: float, w_con: float, w_cls: float, kappa: float, step: int | None = None) -> LossBundle:
    for name, v in (("j_con", j_con), ("j_cls", j_cls), ("w_con", w_con), ("w_cls", w_cls), ("kappa", kappa)):
        if not math.isfinite(v):
            raise NumericError(name, v, step)
    j_total = w_con * j_con + w_cls * j_cls
    if not math.isfinite(j_total):
        raise NumericError("j_total", j_total, step)
    return LossBundle(float(j_con), float(j_cls), float(w_con), float(w_cls), float(kappa), float(j_total))
