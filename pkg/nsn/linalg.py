"""
Dense real-matrix kernel: products, norms, a one-sided Jacobi SVD and seeded
random streams.

A ``Matrix`` is a 2-D C-contiguous ``numpy.float64`` array; every other module
builds on the helpers here.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .exceptions import DimensionError, NumericalError

logger = logging.getLogger(__name__)

Matrix = np.ndarray
RandomStream = np.random.Generator

SVD_TOLERANCE = 1e-12
SVD_MAX_SWEEPS = 60

# Columns whose norm is at or below this fraction of ||m||_F are numerical
# zeros: they are never rotated and report a zero singular value.
_NULL_FRACTION = 1e-14


def as_matrix(data) -> Matrix:
    """Coerce ``data`` into a finite float64 matrix."""
    m = np.ascontiguousarray(data, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f'expected a 2-D matrix, got shape {m.shape}')
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionError(f'matrix dimensions must be positive, got {m.shape}')
    if not np.all(np.isfinite(m)):
        raise ValueError('matrix has non-finite entries')
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f'cannot multiply {a.shape} by {b.shape}')
    return a @ b


def frobenius(m: Matrix) -> float:
    return float(np.linalg.norm(m))


def relative_error(actual, expected) -> float:
    """||actual - expected|| / ||expected||, falling back to the absolute error."""
    diff = np.linalg.norm(np.asarray(actual) - np.asarray(expected))
    scale = np.linalg.norm(expected)
    return float(diff / scale) if scale > np.finfo(np.float64).tiny else float(diff)


def seeded_rng(seed: int) -> RandomStream:
    """Deterministic stream for a 64-bit seed (PCG64)."""
    if seed < 0 or seed >= 2 ** 64:
        raise ValueError(f'seed must be an unsigned 64-bit integer, got {seed}')
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class SvdResult:
    u: Matrix
    singular_values: np.ndarray
    vt: Matrix

    @property
    def k(self) -> int:
        return self.singular_values.shape[0]

    def reconstruct(self, k: Optional[int] = None) -> Matrix:
        k = self.k if k is None else k
        return (self.u[:, :k] * self.singular_values[:k]) @ self.vt[:k]

    def tail_energy(self, k: int) -> float:
        """Eckart-Young residual sqrt(sum_{i>k} s_i^2) of the best rank-k fit."""
        return float(np.sqrt(np.sum(self.singular_values[k:] ** 2)))


def _round_robin(n: int) -> list:
    """Pairings covering every (p, q) once per sweep, n/2 disjoint pairs per round."""
    players = list(range(n + (n % 2)))
    size = len(players)
    rounds = []
    for _ in range(size - 1):
        p = np.array([players[i] for i in range(size // 2)])
        q = np.array([players[size - 1 - i] for i in range(size // 2)])
        keep = (p < n) & (q < n)
        lo, hi = np.minimum(p, q)[keep], np.maximum(p, q)[keep]
        rounds.append((lo, hi))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _jacobi_columns(a: Matrix, tol: float, max_sweeps: int):
    """Orthogonalize the columns of a tall matrix; returns (a @ v, v)."""
    a = a.copy()
    n = a.shape[1]
    v = np.eye(n)
    if n == 1:
        return a, v
    rounds = _round_robin(n)
    floor = (_NULL_FRACTION * np.linalg.norm(a)) ** 2
    for sweep in range(1, max_sweeps + 1):
        worst = 0.0
        for p, q in rounds:
            ap, aq = a[:, p], a[:, q]
            alpha = np.einsum('ij,ij->j', ap, ap)
            beta = np.einsum('ij,ij->j', aq, aq)
            gamma = np.einsum('ij,ij->j', ap, aq)
            scale = np.sqrt(alpha * beta)
            live = (alpha > floor) & (beta > floor)
            ratio = np.zeros_like(gamma)
            ratio[live] = np.abs(gamma[live]) / scale[live]
            if ratio.size:
                worst = max(worst, float(ratio.max()))
            rotate = ratio > tol
            if not rotate.any():
                continue
            zeta = np.where(rotate, (beta - alpha) / np.where(rotate, 2.0 * gamma, 1.0), 0.0)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = np.where(rotate, 1.0 / np.hypot(1.0, t), 1.0)
            s = np.where(rotate, c * t, 0.0)
            a[:, p], a[:, q] = c * ap - s * aq, s * ap + c * aq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if worst <= tol:
            logger.debug('jacobi converged after %d sweeps', sweep)
            return a, v
    raise NumericalError(
        f'Jacobi SVD did not converge within {max_sweeps} sweeps', iterations=max_sweeps
    )


def _complete_basis(u: Matrix, keep: np.ndarray) -> Matrix:
    """Replace the columns of ``u`` not in ``keep`` with an orthonormal completion."""
    if keep.all():
        return u
    m = u.shape[0]
    basis = u[:, keep]
    q, _ = np.linalg.qr(np.hstack([basis, np.eye(m)]))
    filler = q[:, basis.shape[1]:]
    u = u.copy()
    u[:, ~keep] = filler[:, : int((~keep).sum())]
    return u


def svd(m: Matrix, tol: float = SVD_TOLERANCE, max_sweeps: int = SVD_MAX_SWEEPS) -> SvdResult:
    """
    Thin SVD by one-sided Jacobi on the taller orientation.

    Singular values are sorted non-increasing; each column of U has its
    largest-magnitude entry non-negative (Vt rows flipped to match), so the
    result is deterministic for a given input.
    """
    m = as_matrix(m)
    transpose = m.shape[0] < m.shape[1]
    work = m.T if transpose else m
    # Unit max-abs keeps the squared column norms clear of underflow and overflow.
    peak = float(np.max(np.abs(work)))
    if peak > 0.0:
        work = work / peak

    rotated, v = _jacobi_columns(work, tol, max_sweeps)
    sigma = np.linalg.norm(rotated, axis=0)
    order = np.argsort(-sigma, kind='stable')
    sigma, rotated, v = sigma[order], rotated[:, order], v[:, order]

    keep = sigma > _NULL_FRACTION * np.linalg.norm(work)
    left = np.zeros_like(rotated)
    left[:, keep] = rotated[:, keep] / sigma[keep]
    left = _complete_basis(left, keep)
    sigma = np.where(keep, sigma, 0.0) if not keep.all() else sigma
    if peak > 0.0:
        sigma = sigma * peak

    # m = left diag(sigma) v^T in the working orientation.
    if transpose:
        u, vt = v, left.T
    else:
        u, vt = left, v.T

    pivots = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[pivots, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    u = np.ascontiguousarray(u * signs)
    vt = np.ascontiguousarray(vt * signs[:, None])
    return SvdResult(u=u, singular_values=sigma, vt=vt)
