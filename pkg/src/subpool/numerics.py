"""Dense real linear algebra used by the pooling layer.

Matrices are plain 2-D ``float64`` numpy arrays. :func:`as_matrix` is the
single validation gate (finite entries, positive dimensions).

The SVD is a one-sided (Hestenes) Jacobi iteration. Column pairs are swept
in round-robin order so that each round touches disjoint pairs and can be
applied as one vectorized rotation.
"""

from __future__ import annotations

from functools import lru_cache
from typing import NamedTuple

import numpy as np

MAX_SWEEPS = 60
ROTATION_TOL = 1e-12


class NonFiniteError(ValueError):
    """Input contains NaN or infinite entries."""


class ConvergenceError(RuntimeError):
    """Jacobi iteration did not converge within the sweep cap."""


class SvdFactors(NamedTuple):
    """Thin SVD ``A = U @ diag(S) @ V.T`` with ``r = min(m, n)`` factors."""

    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a C-contiguous float64 2-D array, validating it."""
    arr = np.array(a, dtype=np.float64, order="C", copy=True)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have positive dimensions, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        bad = np.argwhere(~np.isfinite(arr))[0]
        raise NonFiniteError(f"{name} has a non-finite entry at {tuple(bad)}")
    return arr


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "A")
    b = as_matrix(b, "B")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    return a @ b


def frobenius_norm(a) -> float:
    a = as_matrix(a)
    return float(np.sqrt(np.sum(a * a)))


@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Circle-method schedule: rounds of disjoint (i, j) pairs covering all pairs once.

    Each round is returned as index arrays ``(rows, cols)`` of length 4 * pairs
    addressing the (i,i), (j,j), (i,j), (j,i) entries of a rotation matrix.
    """
    players = list(range(n + (n % 2)))
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[a], players[m - 1 - a]) for a in range(m // 2)]
        pairs = [(min(p), max(p)) for p in pairs if max(p) < n]
        if pairs:
            i, j = np.array(pairs).T
            rounds.append((np.concatenate([i, j, i, j]), np.concatenate([i, j, j, i])))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _jacobi_tall(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-sided Jacobi on a stack of tall matrices ``x`` (b, p, q), p >= q.

    Matrices in the stack are rotated independently: a pair whose
    off-diagonal Gram entry is already below tolerance gets the identity,
    so a converged matrix is left untouched while the others finish.
    """
    b, p, q = x.shape
    eye = np.broadcast_to(np.eye(q), (b, q, q))
    v = eye.copy()
    rot = eye.copy()
    batch = np.arange(b)[:, None]
    # Columns below eps * ||A||_F are roundoff; rotating them never settles.
    floor = np.finfo(float).eps ** 2 * np.einsum("bij,bij->b", x, x)[:, None]
    for _ in range(MAX_SWEEPS):
        rotated = False
        for rows, cols in _round_robin(q):
            npair = len(rows) // 4
            gram = np.matmul(x.transpose(0, 2, 1), x)
            entries = gram[batch, rows[: 3 * npair], cols[: 3 * npair]]
            alpha, beta, gamma = np.split(entries, 3, axis=1)
            active = (np.abs(gamma) > ROTATION_TOL * np.sqrt(alpha * beta)) & (
                np.minimum(alpha, beta) > floor
            )
            if not active.any():
                continue
            rotated = True
            safe = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe)
            t = np.copysign(1.0, zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = np.where(active, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(active, c * t, 0.0)
            # Disjoint pairs: one block rotation applies the whole round.
            rot[batch, rows, cols] = np.concatenate([c, c, s, -s], axis=1)
            x = np.matmul(x, rot)
            v = np.matmul(v, rot)
            rot[batch, rows, cols] = eye[batch, rows, cols]
        if not rotated:
            break
    else:
        raise ConvergenceError(
            f"one-sided Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
        )

    sigma = np.sqrt(np.einsum("bij,bij->bj", x, x))
    order = np.argsort(-sigma, axis=1, kind="stable")
    sigma = np.take_along_axis(sigma, order, axis=1)
    x = np.take_along_axis(x, order[:, None, :], axis=2)
    v = np.take_along_axis(v, order[:, None, :], axis=2)

    u = np.zeros_like(x)
    eps = np.finfo(float).eps
    for k in range(b):
        good = sigma[k] > eps * max(sigma[k, 0], np.finfo(float).tiny) * p
        u[k][:, good] = x[k][:, good] / sigma[k, good]
        if not good.all():
            u[k] = _complete_basis(u[k], good)
    return u, sigma, v


def _complete_basis(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    # Fill columns of numerically-zero singular values with an orthonormal
    # complement, drawn deterministically from the standard basis.
    p = u.shape[0]
    basis = u[:, good]
    for col in np.flatnonzero(~good):
        best = None
        for e in range(p):
            cand = np.zeros(p)
            cand[e] = 1.0
            for _ in range(2):
                cand -= basis @ (basis.T @ cand)
            norm = np.linalg.norm(cand)
            if best is None or norm > best[0] + 1e-12:
                best = (norm, cand)
            if norm > 0.5:
                break
        vec = best[1] / best[0]
        u[:, col] = vec
        basis = np.column_stack([basis, vec])
    return u


def svd_batch(stack) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVDs of a stack of equally-shaped matrices (b, m, n).

    Returns ``U`` (b, m, r), ``S`` (b, r), ``V`` (b, n, r). Each matrix gets
    the same result it would get from :func:`svd` on its own.
    """
    stack = np.array(stack, dtype=np.float64, copy=True)
    if stack.ndim != 3 or 0 in stack.shape[1:]:
        raise ValueError(f"expected a (b, m, n) stack, got shape {stack.shape}")
    if not np.all(np.isfinite(stack)):
        bad = np.argwhere(~np.isfinite(stack))[0]
        raise NonFiniteError(f"stack has a non-finite entry at {tuple(bad)}")
    if stack.shape[0] == 0:
        m, n = stack.shape[1:]
        r = min(m, n)
        return np.zeros((0, m, r)), np.zeros((0, r)), np.zeros((0, n, r))
    m, n = stack.shape[1:]
    # Unit max-abs scaling keeps the Gram entries clear of under/overflow.
    scale = np.max(np.abs(stack), axis=(1, 2))
    scale[scale == 0] = 1.0
    stack /= scale[:, None, None]
    if m >= n:
        u, s, v = _jacobi_tall(stack)
        return u, s * scale[:, None], v
    # Wide: A.T = U' S V'.T  =>  A = V' S U'.T
    u, s, v = _jacobi_tall(np.ascontiguousarray(stack.transpose(0, 2, 1)))
    return v, s * scale[:, None], u


def svd(a) -> SvdFactors:
    """Thin singular value decomposition by one-sided Jacobi rotations.

    Parameters
    ----------
    a : array_like, shape (m, n)
        Finite real matrix.

    Returns
    -------
    SvdFactors
        ``U`` (m, r), ``S`` (r,) sorted descending, ``V`` (n, r) with
        ``r = min(m, n)``. Ties in ``S`` keep the order produced by the
        iteration (stable sort), so identical inputs give identical output.

    Raises
    ------
    NonFiniteError
        If ``a`` has NaN or infinite entries.
    ConvergenceError
        If the sweep cap (60) is exhausted.
    """
    a = as_matrix(a, "A")
    u, s, v = svd_batch(a[None])
    return SvdFactors(u[0], s[0], v[0])
