"""Simplex and logit-space primitives.

Distributions live on the last axis.  Anything that feeds a loss is computed
from logits through ``log_softmax``; probabilities are materialised only when
a caller asks for them.
"""

from __future__ import annotations

import numpy as np
from scipy import special

__all__ = [
    "SIMPLEX_TOL",
    "softmax",
    "log_softmax",
    "as_simplex",
    "is_simplex",
    "kl_div",
    "kl_from_logits",
    "cross_entropy",
    "cross_entropy_logits",
    "one_hot",
    "decode_argmax",
    "entropy",
]

SIMPLEX_TOL = 1e-9


def _finite_logits(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if np.isnan(z).any():
        raise ValueError("NaN in logits")
    return z


def softmax(z) -> np.ndarray:
    return special.softmax(_finite_logits(z), axis=-1)


def log_softmax(z) -> np.ndarray:
    return special.log_softmax(_finite_logits(z), axis=-1)


def is_simplex(p, tol: float = SIMPLEX_TOL) -> bool:
    p = np.asarray(p, dtype=np.float64)
    return bool(p.shape[-1] >= 2 and np.all(p >= 0) and np.all(np.abs(p.sum(-1) - 1.0) <= tol))


def as_simplex(p, tol: float = SIMPLEX_TOL) -> np.ndarray:
    """Validate a probability vector (or stack of them) and renormalise it."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] < 2:
        raise ValueError("simplex points need K >= 2")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("simplex points must be finite and non-negative")
    total = p.sum(-1, keepdims=True)
    if np.any(np.abs(total - 1.0) > tol):
        raise ValueError(f"entries sum to {total.ravel()[:4]}, not 1")
    return p / total


def kl_div(p, q) -> np.ndarray:
    """``KL(p || q)`` along the last axis, with ``0 log 0 = 0``.

    Raises ``OverflowError`` when ``q`` vanishes somewhere ``p`` does not.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if np.any((q <= 0) & (p > 0)):
        raise OverflowError("KL divergence is infinite: q has zero mass where p is positive")
    out = special.rel_entr(p, q).sum(-1)
    return np.maximum(out, 0.0)


def kl_from_logits(p, logits) -> np.ndarray:
    """``KL(p || softmax(logits))`` evaluated with ``log_softmax``."""
    p = np.asarray(p, dtype=np.float64)
    logq = log_softmax(logits)
    return np.maximum(special.xlogy(p, p).sum(-1) - (p * logq).sum(-1), 0.0)


def cross_entropy(target_onehot, pred) -> np.ndarray:
    target = np.asarray(target_onehot, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    hot = np.argmax(target, axis=-1)
    pk = np.take_along_axis(pred, hot[..., None], axis=-1)[..., 0]
    if np.any(pk <= 0):
        raise OverflowError("cross-entropy is infinite: zero predicted mass on the target")
    return -np.log(pk)


def cross_entropy_logits(tokens, logits) -> np.ndarray:
    """``-log softmax(logits)[token]`` for integer targets."""
    tokens = np.asarray(tokens)
    logq = log_softmax(logits)
    return -np.take_along_axis(logq, tokens[..., None], axis=-1)[..., 0]


def one_hot(k, K: int) -> np.ndarray:
    k = np.asarray(k)
    if np.any(k < 0) or np.any(k >= K):
        raise IndexError(f"token index out of range for vocabulary of size {K}")
    return np.eye(K, dtype=np.float64)[k]


def decode_argmax(p) -> np.ndarray:
    """Most likely token per row; ties go to the lowest index."""
    out = np.argmax(np.asarray(p), axis=-1)
    return int(out) if out.ndim == 0 else out


def entropy(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return -special.xlogy(p, p).sum(-1)
