"""Identification (softmax cross-entropy) and batch-hard triplet losses.

Both return a :class:`LossResult` holding the scalar loss and its gradient
with respect to the input matrix (logits or embeddings).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .numerics import as_matrix

DIST_STABILIZER = 1e-16


class LossResult(NamedTuple):
    loss: float
    grad: np.ndarray


def _labels(labels, n: int, num_classes: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be integers")
    if num_classes is not None and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise ValueError(f"label {bad} out of range [0, {num_classes})")
    return labels.astype(np.int64)


def cross_entropy(logits, labels) -> LossResult:
    """Mean softmax cross-entropy over the rows of ``logits`` (N x T)."""
    z = as_matrix(logits, "logits")
    n, t = z.shape
    y = _labels(labels, n, t)
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.sum(np.exp(shifted), axis=1))
    log_p = shifted - log_norm[:, None]
    rows = np.arange(n)
    loss = 0.0 - float(np.mean(log_p[rows, y]))  # avoids -0.0
    grad = np.exp(log_p)
    grad[rows, y] -= 1.0
    return LossResult(loss, grad / n)


def _squared_distances(x: np.ndarray) -> np.ndarray:
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    d2 = np.maximum(0.5 * (d2 + d2.T), 0.0)
    np.fill_diagonal(d2, 0.0)
    return d2


def pairwise_distances(embeddings) -> np.ndarray:
    """Euclidean distance matrix, ``sqrt(max(0, |a|^2 + |b|^2 - 2 a.b) + 1e-16)``.

    The diagonal is therefore 1e-8 rather than exactly zero; the stabilizer
    keeps the gradient finite for coincident embeddings.
    """
    x = as_matrix(embeddings, "embeddings")
    return np.sqrt(_squared_distances(x) + DIST_STABILIZER)


@dataclass(frozen=True)
class TripletBatch:
    """P identities x K instances; construction validates the grouping."""

    embeddings: np.ndarray
    labels: np.ndarray
    margin: float = 0.3

    def __post_init__(self):
        x = as_matrix(self.embeddings, "embeddings")
        labels = _labels(self.labels, x.shape[0])
        if self.margin < 0:
            raise ValueError(f"margin must be non-negative, got {self.margin}")
        ids, counts = np.unique(labels, return_counts=True)
        if len(ids) < 2:
            raise ValueError("triplet batch needs at least 2 identities")
        if counts.min() < 2:
            lonely = ids[np.argmin(counts)]
            raise ValueError(f"identity {lonely} has no positive (K=1)")
        if np.any(counts != counts[0]):
            raise ValueError(f"identities have unequal instance counts {counts.tolist()}")
        object.__setattr__(self, "embeddings", x)
        object.__setattr__(self, "labels", labels)

    @property
    def P(self) -> int:
        return len(np.unique(self.labels))

    @property
    def K(self) -> int:
        return len(self.labels) // self.P


class HardestPairs(NamedTuple):
    positive: np.ndarray
    negative: np.ndarray
    terms: np.ndarray


def hardest_pairs(dist: np.ndarray, labels: np.ndarray, margin: float) -> HardestPairs:
    """Hardest positive/negative index per anchor and the hinge terms.

    Ties go to the lowest index (``argmax``/``argmin`` semantics).
    """
    same = labels[:, None] == labels[None, :]
    n = len(labels)
    pos_mask = same & ~np.eye(n, dtype=bool)
    pos = np.argmax(np.where(pos_mask, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(same, np.inf, dist), axis=1)
    rows = np.arange(n)
    terms = np.maximum(0.0, dist[rows, pos] - dist[rows, neg] + margin)
    return HardestPairs(pos, neg, terms)


def batch_hard_triplet(batch: TripletBatch, reduction: str = "mean") -> LossResult:
    """Batch-hard triplet loss.

    Each anchor contributes ``max(0, d(a, p*) - d(a, n*) + m)`` with ``p*``
    the farthest same-identity sample and ``n*`` the nearest other-identity
    sample. ``reduction='sum'`` adds the P*K terms, ``'mean'`` divides by
    P*K. Gradients flow only through the selected pairs of active anchors.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    x = batch.embeddings
    n = x.shape[0]
    d2 = _squared_distances(x)
    dist = np.sqrt(d2 + DIST_STABILIZER)
    pos, neg, terms = hardest_pairs(dist, batch.labels, batch.margin)
    total = math.fsum(terms)
    scale = 1.0 if reduction == "sum" else 1.0 / n

    grad = np.zeros_like(x)
    rows = np.arange(n)
    for idx, sign in ((pos, 1.0), (neg, -1.0)):
        diff = x - x[idx]
        # d/dx of sqrt(max(0, .)) vanishes where the clamp is active.
        live = (terms > 0) & (d2[rows, idx] > 0)
        coef = np.where(live, sign * scale / dist[rows, idx], 0.0)
        g = coef[:, None] * diff
        grad += g
        np.add.at(grad, idx, -g)
    loss = total if reduction == "sum" else total / n
    return LossResult(loss, grad)
