"""Probability maps and loss primitives with analytic gradients.

All losses reduce to a scalar by averaging over the batch dimension.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, ParameterError
from .tensor import Tensor


@dataclass(frozen=True)
class LabelBatch:
    """Integer class labels plus the class count they index into."""

    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if labels.size and (labels.min() < 0 or labels.max() >= self.n_classes):
            bad = labels[(labels < 0) | (labels >= self.n_classes)][0]
            raise DataError(f"label {bad} outside [0, {self.n_classes})")
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.size

    def one_hot(self, dtype=np.float32) -> np.ndarray:
        out = np.zeros((self.labels.size, self.n_classes), dtype=dtype)
        out[np.arange(self.labels.size), self.labels] = 1
        return out


def _check_temperature(T: float) -> None:
    if not T > 0:
        raise ParameterError(f"temperature must be positive, got {T}")


def _as_2d(logits: Tensor) -> Tensor:
    if logits.ndim != 2:
        raise DimensionError("logits", "(batch, classes)", logits.shape)
    return logits


def softmax_t(logits: Tensor, T: float = 1.0) -> Tensor:
    """Row-wise softmax of ``logits / T``."""
    _check_temperature(T)
    _as_2d(logits)
    z = logits.data / T
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = (e / e.sum(axis=1, keepdims=True)).astype(logits.dtype)
    out = Tensor._make(s, (logits,), "softmax_t")

    def backward():
        g = out.grad
        inner = (g * s).sum(axis=1, keepdims=True)
        logits._accumulate(s * (g - inner) / T)

    out._backward = backward
    return out


def log_softmax_t(logits: Tensor, T: float = 1.0) -> Tensor:
    """Row-wise ``ln softmax(logits / T)`` in the max-subtracted stable form."""
    _check_temperature(T)
    _as_2d(logits)
    z = logits.data / T
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    ls = (z - lse).astype(logits.dtype)
    out = Tensor._make(ls, (logits,), "log_softmax_t")

    def backward():
        g = out.grad
        s = np.exp(ls)
        logits._accumulate((g - s * g.sum(axis=1, keepdims=True)) / T)

    out._backward = backward
    return out


def cross_entropy(logits: Tensor, labels: LabelBatch) -> Tensor:
    """Mean over the batch of ``-sum_j y_j ln q_j`` with ``q`` the T=1 softmax."""
    _as_2d(logits)
    if logits.shape[1] != labels.n_classes:
        raise DimensionError("logits width vs class count", labels.n_classes, logits.shape[1])
    if logits.shape[0] != len(labels):
        raise DimensionError("batch size vs label count", len(labels), logits.shape[0])
    picked = log_softmax_t(logits, 1.0) * labels.one_hot(logits.dtype)
    return -(picked.sum() * (1.0 / len(labels)))


def kl_div(p_t: Tensor, log_p_s: Tensor) -> Tensor:
    """Batch-mean ``KL(p_t || p_s)`` given target probabilities and log-probabilities.

    Terms with ``p_t == 0`` contribute zero.
    """
    if p_t.shape != log_p_s.shape:
        raise DimensionError("kl_div operands", p_t.shape, log_p_s.shape)
    if p_t.ndim != 2:
        raise DimensionError("kl_div operands", "(batch, classes)", p_t.shape)
    if np.any(p_t.data < 0):
        raise DataError("target distribution has negative entries")
    p = p_t.data
    pos = p > 0
    log_p = np.log(np.where(pos, p, 1))
    terms = np.where(pos, p * (log_p - log_p_s.data), 0)
    batch = p.shape[0]
    out = Tensor._make(np.asarray(terms.sum() / batch, dtype=log_p_s.dtype), (p_t, log_p_s), "kl_div")

    def backward():
        g = out.grad / batch
        log_p_s._accumulate(-g * p)
        if p_t.requires_grad:
            p_t._accumulate(np.where(pos, g * (log_p + 1 - log_p_s.data), 0))

    out._backward = backward
    return out


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared elementwise differences over all entries."""
    if a.shape != b.shape:
        raise DimensionError("mse operands", a.shape, b.shape)
    diff = a - b
    return (diff * diff).mean()
