"""Subspace pooling: map a c x (h*w) feature matrix to its top-k left
singular vectors.

The forward map is made a deterministic function of the input by a sign
convention (largest-magnitude entry of every column non-negative); the
backward pass differentiates the truncated SVD and routes the upstream
gradient through the recorded sign flips.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import SvdFactors, as_matrix, svd, svd_batch

RANK_TOL = 1e-12
# Lorentzian broadening of 1/(s_j^2 - s_i^2), relative to s_1^4.
BROADENING = 1e-10


class RankDeficientError(ValueError):
    """Feature matrix has numerical rank below the requested k."""

    def __init__(self, message: str, numerical_rank: int):
        super().__init__(message)
        self.numerical_rank = numerical_rank


@dataclass(frozen=True)
class FeatureMap:
    """A c x h x w activation stored as the c x (h*w) matrix ``A``."""

    channels: int
    height: int
    width: int
    A: np.ndarray

    def __post_init__(self):
        if self.A.shape != (self.channels, self.height * self.width):
            raise ValueError(
                f"matrix shape {self.A.shape} inconsistent with "
                f"(c, h, w) = ({self.channels}, {self.height}, {self.width})"
            )

    @classmethod
    def from_array(cls, x) -> "FeatureMap":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3:
            raise ValueError(f"expected a (c, h, w) array, got shape {x.shape}")
        c, h, w = x.shape
        return cls(c, h, w, as_matrix(x.reshape(c, h * w), "feature map"))


@dataclass(frozen=True)
class SubspaceDescriptor:
    """Column-orthonormal, sign-canonical basis ``U`` (c x k)."""

    U: np.ndarray
    sigma: np.ndarray

    @property
    def k(self) -> int:
        return self.U.shape[1]

    @property
    def channels(self) -> int:
        return self.U.shape[0]


@dataclass(frozen=True)
class PoolCache:
    factors: SvdFactors
    k: int
    signs: np.ndarray
    shape: tuple[int, int, int]

    def output(self) -> np.ndarray:
        return self.factors.U[:, : self.k] * self.signs


def canonicalize_signs(U) -> tuple[np.ndarray, np.ndarray]:
    """Flip columns so each column's largest-|entry| element is non-negative.

    Ties in magnitude go to the lowest row index. Returns the flipped matrix
    and the +/-1 sign applied to each column.
    """
    U = np.asarray(U, dtype=np.float64)
    if U.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {U.shape}")
    pivot = np.argmax(np.abs(U), axis=0)
    lead = U[pivot, np.arange(U.shape[1])]
    signs = np.where(lead < 0, -1.0, 1.0)
    return U * signs, signs


def _finish_pool(fm: FeatureMap, factors: SvdFactors, k: int):
    s = factors.S
    rank = int(np.sum(s > RANK_TOL * s[0])) if s[0] > 0 else 0
    if rank < k:
        raise RankDeficientError(
            f"feature map has numerical rank {rank} < k={k} "
            f"(sigma_k <= {RANK_TOL:g} * sigma_1)",
            numerical_rank=rank,
        )
    U_k, signs = canonicalize_signs(factors.U[:, :k])
    cache = PoolCache(factors, k, signs, (fm.channels, fm.height, fm.width))
    return SubspaceDescriptor(U_k, s[:k].copy()), cache


def _check_rank(k: int, c: int, n: int) -> None:
    if not 1 <= k <= min(c, n):
        raise ValueError(f"k={k} must lie in [1, min(c, h*w)] = [1, {min(c, n)}]")


def pool_forward(fm: FeatureMap, k: int) -> tuple[SubspaceDescriptor, PoolCache]:
    """Top-k left singular subspace of ``fm.A``.

    Raises ``ValueError`` if ``k`` is out of range and
    :class:`RankDeficientError` if ``sigma_k <= 1e-12 * sigma_1``.
    """
    _check_rank(k, *fm.A.shape)
    return _finish_pool(fm, svd(fm.A), k)


def pool_forward_batch(maps: list[FeatureMap], k: int) -> list:
    """:func:`pool_forward` over equally-shaped maps with one batched SVD.

    Returns, per map, either ``(descriptor, cache)`` or the
    :class:`RankDeficientError` it raised, so callers can repair single
    items. Results are identical to calling :func:`pool_forward` per map.
    """
    if not maps:
        return []
    _check_rank(k, *maps[0].A.shape)
    U, S, V = svd_batch(np.stack([fm.A for fm in maps]))
    out = []
    for i, fm in enumerate(maps):
        try:
            out.append(_finish_pool(fm, SvdFactors(U[i], S[i], V[i]), k))
        except RankDeficientError as err:
            out.append(err)
    return out


def pool_backward(cache: PoolCache, dL_dU) -> np.ndarray:
    """Gradient of the loss with respect to ``A`` given ``dL/dU_k``.

    With ``G`` the upstream gradient (sign flips undone) padded by zero
    columns to the full thin basis::

        dA = U [(F o (U^T G - G^T U)) S] V^T + (I - U U^T) G S^-1 V^T

    where ``F_ij = d / (d^2 + eps)``, ``d = s_j^2 - s_i^2`` and
    ``eps = 1e-10 * s_1^4``. The broadening keeps ``F`` bounded when
    retained singular values nearly coincide.
    """
    U, S, V = cache.factors
    k = cache.k
    c, r = U.shape
    dL_dU = np.asarray(dL_dU, dtype=np.float64)
    if dL_dU.shape != (c, k):
        raise ValueError(f"upstream gradient shape {dL_dU.shape} != {(c, k)}")
    if not np.all(np.isfinite(dL_dU)):
        raise ValueError("upstream gradient has non-finite entries")

    G = np.zeros((c, r))
    G[:, :k] = dL_dU * cache.signs

    s2 = S * S
    diff = s2[None, :] - s2[:, None]
    eps = BROADENING * s2[0] ** 2
    F = diff / (diff * diff + eps)
    np.fill_diagonal(F, 0.0)

    UtG = U.T @ G
    inner = (F * (UtG - UtG.T)) * S[None, :]
    dA = U @ inner @ V.T
    if c > r:
        # Only the first k columns of G are non-zero, and s_1..s_k > 0.
        scaled = np.zeros_like(G)
        scaled[:, :k] = G[:, :k] / S[:k]
        dA += (scaled - U @ (U.T @ scaled)) @ V.T
    return dA


def flatten(d: SubspaceDescriptor) -> np.ndarray:
    """Column-major vector ``[u_1; u_2; ...; u_k]`` of length c*k."""
    return d.U.reshape(-1, order="F").copy()


def unflatten(vec, channels: int, k: int) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (channels * k,):
        raise ValueError(f"vector of length {vec.size} cannot hold {channels}x{k}")
    return vec.reshape(channels, k, order="F").copy()


def _basis(d) -> np.ndarray:
    return d.U if isinstance(d, SubspaceDescriptor) else np.asarray(d, dtype=np.float64)


def projection_distance(d1, d2) -> float:
    """``||U1 U1^T - U2 U2^T||_F / sqrt(2)``, a metric on k-subspaces.

    Accepts :class:`SubspaceDescriptor` or bare orthonormal matrices.
    """
    U1, U2 = _basis(d1), _basis(d2)
    if U1.shape != U2.shape:
        raise ValueError(f"descriptor shapes differ: {U1.shape} vs {U2.shape}")
    diff = U1 @ U1.T - U2 @ U2.T
    return float(np.sqrt(np.sum(diff * diff) / 2.0))


def projector_embedding(U) -> np.ndarray:
    """``vec(U U^T) / sqrt(2)``; Euclidean distance here is the projection distance."""
    U = _basis(U)
    return (U @ U.T).reshape(-1) / np.sqrt(2.0)


def projector_embedding_backward(U, grad) -> np.ndarray:
    """Pull a gradient on :func:`projector_embedding` back to ``U``."""
    U = _basis(U)
    c = U.shape[0]
    G = np.asarray(grad, dtype=np.float64).reshape(c, c)
    return (G + G.T) @ U / np.sqrt(2.0)
