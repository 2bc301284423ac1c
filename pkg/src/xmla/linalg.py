"""Truncated SVD via one-sided (Hestenes) Jacobi rotations.

Columns are orthogonalised pairwise using a round-robin tournament so that
each round rotates ``n/2`` disjoint column pairs in one vectorised step.
Everything runs in float64 regardless of the input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DimensionError, RankError
from .tensor import Tensor


@dataclass(frozen=True)
class SvdResult:
    u: Tensor  # m x r, orthonormal columns
    sigma: np.ndarray  # r, descending, nonnegative
    vt: Tensor  # r x n, orthonormal rows

    @property
    def rank(self) -> int:
        return len(self.sigma)

    def reconstruct(self) -> np.ndarray:
        return (self.u.data * self.sigma) @ self.vt.data

    def truncate(self, r: int) -> "SvdResult":
        if not 1 <= r <= self.rank:
            raise RankError(f"rank {r} outside [1, {self.rank}]")
        return SvdResult(Tensor(self.u.data[:, :r]), self.sigma[:r].copy(), Tensor(self.vt.data[:r]))


@lru_cache(maxsize=64)
def _round_robin(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Pair schedule for even ``n``: n-1 rounds of n/2 disjoint pairs."""
    players = list(range(n))
    ps, qs = [], []
    for _ in range(n - 1):
        half = n // 2
        ps.append(players[:half])
        qs.append(players[half:][::-1])
        players = [players[0], players[-1]] + players[1:-1]
    return np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)


def _jacobi_tall(a: np.ndarray, tol: float, max_sweeps: int):
    """One-sided Jacobi on a tall/square matrix; returns (w, v) with a @ v = w, w^T w diagonal."""
    m, n = a.shape
    odd = n % 2
    w = np.zeros((m, n + odd))
    w[:, :n] = a
    v = np.eye(n + odd)
    if n + odd < 2:
        return w[:, :n], v[:n, :n]
    ps, qs = _round_robin(n + odd)
    # columns below rounding level of ||a||_F are numerically zero; rotating
    # them only chases noise (rank-deficient inputs would never converge)
    floor = (np.finfo(np.float64).eps * np.linalg.norm(a)) ** 2
    for _ in range(max_sweeps):
        rotated = 0
        for p, q in zip(ps, qs):
            wp, wq = w[:, p], w[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            act = (np.abs(gamma) > tol * np.sqrt(alpha * beta)) & (alpha > floor) & (beta > floor)
            if not act.any():
                continue
            rotated += int(act.sum())
            g = np.where(act, gamma, 1.0)
            with np.errstate(over="ignore", invalid="ignore"):
                # tiny gamma sends zeta to inf, which yields t = 0 (no rotation)
                zeta = (beta - alpha) / (2.0 * g)
                t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(act, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            w[:, p], w[:, q] = c * wp - s * wq, s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if rotated == 0:
            break
    return w[:, :n], v[:n, :n]


def _complete_basis(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not flagged ``good`` with an orthonormal completion."""
    m = u.shape[0]
    basis = [u[:, j] for j in range(u.shape[1]) if good[j]]
    out = u.copy()
    e = 0
    for j in np.flatnonzero(~good):
        while e < m:
            cand = np.zeros(m)
            cand[e] = 1.0
            e += 1
            for _ in range(2):
                for b in basis:
                    cand -= (b @ cand) * b
            nrm = np.linalg.norm(cand)
            if nrm > 0.5:
                cand /= nrm
                basis.append(cand)
                out[:, j] = cand
                break
    return out


def svd_full(a, tol: float | None = None, max_sweeps: int = 80) -> SvdResult:
    """Thin SVD with all min(m, n) singular triplets."""
    arr = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    if arr.ndim != 2 or 0 in arr.shape:
        raise DimensionError(f"svd needs a non-empty 2-D matrix, got shape {arr.shape}")
    m, n = arr.shape
    flip = m < n
    work = arr.T if flip else arr
    if tol is None:
        tol = work.shape[0] * np.finfo(np.float64).eps
    w, v = _jacobi_tall(work, tol, max_sweeps)
    sigma = np.linalg.norm(w, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, w, v = sigma[order], w[:, order], v[:, order]
    cutoff = (sigma[0] if sigma.size else 0.0) * work.shape[0] * np.finfo(np.float64).eps
    good = sigma > cutoff
    left = np.zeros_like(w)
    left[:, good] = w[:, good] / sigma[good]
    if not good.all():
        left = _complete_basis(left, good)
        sigma = np.where(good, sigma, 0.0)
    # left singular vectors of `work`; v holds its right singular vectors
    u_mat, vt_mat = (v, left.T) if flip else (left, v.T)
    # deterministic signs: largest-magnitude entry of each u column is nonnegative
    pivot = np.argmax(np.abs(u_mat), axis=0)
    signs = np.where(u_mat[pivot, np.arange(u_mat.shape[1])] < 0, -1.0, 1.0)
    u_mat = u_mat * signs
    vt_mat = vt_mat * signs[:, None]
    return SvdResult(Tensor(np.ascontiguousarray(u_mat)), sigma, Tensor(np.ascontiguousarray(vt_mat)))


def svd_truncated(a, r: int) -> SvdResult:
    """Keep the ``r`` largest singular triplets of ``a``."""
    arr = np.asarray(a.data if isinstance(a, Tensor) else a)
    if arr.ndim != 2:
        raise DimensionError(f"svd needs a 2-D matrix, got shape {arr.shape}")
    full_rank = min(arr.shape)
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= full_rank:
        raise RankError(f"rank {r} outside [1, {full_rank}] for a {arr.shape[0]}x{arr.shape[1]} matrix")
    res = svd_full(arr)
    return res if r == full_rank else res.truncate(int(r))


def singular_values(a) -> np.ndarray:
    return svd_full(a).sigma


def relative_frobenius_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    denom = np.linalg.norm(a)
    return float(np.linalg.norm(a - b) / denom) if denom > 0 else float(np.linalg.norm(b))
