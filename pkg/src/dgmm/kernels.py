"""Polynomial-kernel row sums, exactly or through a Nystrom approximation.

The data-dependent part of the weighted objective and of the diagonal
weights only enters through

    s_k[n] = sum_{n'} <y_n, y_{n'}>^k,      k = 0, ..., 2 L,

their totals, and the diagonal powers <y_n, y_n>^k. Exact evaluation costs
O(N^2 (d + L)); the Nystrom path replaces each order-k Gram matrix by a
landmark cross-approximation and costs O(N d m) per order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from scipy.linalg import solve_triangular

from .model import SampleSet, spawn_rng

__all__ = [
    "KernelSumCache",
    "exact_kernel_sums",
    "kmeanspp_landmarks",
    "rp_cholesky",
    "nystrom_kernel_sums",
    "gram_rank",
    "default_landmark_count",
]

EXACT_GUARD_N = 20000
GRAM_GUARD_N = 5000

ArrayLike = Union[np.ndarray, SampleSet]


def _rows(data: ArrayLike) -> np.ndarray:
    y = data.data if isinstance(data, SampleSet) else np.asarray(data, dtype=float)
    return np.atleast_2d(y)


@dataclass(frozen=True)
class KernelSumCache:
    """Per-sample kernel row sums for orders 0..2L.

    row_sums    : (2L+1, N), row k holds s_k[n] (order 0 is exactly N)
    totals      : (2L+1,), totals[k] = sum_n s_k[n]
    diag_powers : (2L+1, N), <y_n, y_n>^k, always exact
    mode        : "exact" or "nystrom"
    max_order   : L (rows extend to 2L for the weight denominators)
    """

    row_sums: np.ndarray
    totals: np.ndarray
    diag_powers: np.ndarray
    mode: str
    max_order: int
    landmark_count: int = 0

    def __post_init__(self):
        for name in ("row_sums", "totals", "diag_powers"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.row_sums.shape[0] != 2 * self.max_order + 1:
            raise ValueError("row_sums must cover orders 0..2L")

    @property
    def n_samples(self) -> int:
        return self.row_sums.shape[1]


def exact_kernel_sums(
    data: ArrayLike, max_order: int, guard_n: int = EXACT_GUARD_N, chunk: int = 1024
) -> KernelSumCache:
    """Exact s_k by accumulating powers of the pairwise inner products.

    Row blocks of the Gram matrix are materialized one chunk at a time, so
    memory stays at O(chunk * N).
    """
    y = _rows(data)
    n = y.shape[0]
    if n > guard_n:
        raise ValueError(
            f"exact kernel sums on N={n} rows exceed the guard ({guard_n}); "
            "raise guard_n explicitly or use the Nystrom path"
        )
    n_orders = 2 * max_order + 1
    s = np.empty((n_orders, n))
    s[0] = float(n)
    sq = np.einsum("nd,nd->n", y, y)
    diag = np.vander(sq, n_orders, increasing=True).T  # diag[k] = sq**k

    for start in range(0, n, chunk):
        block = y[start : start + chunk] @ y.T  # (B, N)
        powers = np.ones_like(block)
        for k in range(1, n_orders):
            powers = powers * block
            s[k, start : start + chunk] = powers.sum(axis=1)
    return KernelSumCache(
        row_sums=s,
        totals=s.sum(axis=1),
        diag_powers=diag,
        mode="exact",
        max_order=max_order,
    )


def kmeanspp_landmarks(
    data: ArrayLike, kernel_order: int, m: int, seed: int
) -> np.ndarray:
    """Landmark indices by D^2 sampling in the feature space of the
    homogeneous polynomial kernel h(x, y) = <x, y>^k.

    The first landmark is uniform; each next one is drawn with probability
    proportional to its squared feature distance to the nearest chosen
    landmark, h(x,x) - 2 h(x,c) + h(c,c). Points coinciding with a chosen
    landmark in feature space carry zero weight and are never re-chosen
    while distinct candidates remain. Deterministic given the seed.
    """
    y = _rows(data)
    n = y.shape[0]
    if not (1 <= m <= n):
        raise ValueError("need 1 <= m <= N")
    rng = spawn_rng(seed, "landmarks", kernel_order)
    hxx = np.einsum("nd,nd->n", y, y) ** kernel_order

    chosen = np.empty(m, dtype=int)
    chosen[0] = rng.integers(n)
    best = np.full(n, np.inf)
    taken = np.zeros(n, dtype=bool)
    taken[chosen[0]] = True
    for t in range(1, m):
        c = chosen[t - 1]
        hxc = (y @ y[c]) ** kernel_order
        dist = np.maximum(hxx - 2.0 * hxc + hxx[c], 0.0)
        best = np.minimum(best, dist)
        weights = np.where(taken, 0.0, best)
        total = weights.sum()
        if total > 0.0:
            idx = rng.choice(n, p=weights / total)
        else:
            idx = rng.choice(np.flatnonzero(~taken))
        chosen[t] = idx
        taken[idx] = True
    return chosen


def rp_cholesky(
    w: np.ndarray,
    tol: float = 1e-10,
    max_rank: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
):
    """Randomly pivoted partial Cholesky of a PSD matrix.

    Pivots are sampled proportionally to the current diagonal residual;
    the loop stops when the trace residual drops to ``tol * trace(w)`` or
    the factor reaches ``max_rank`` columns. Returns (factor, pivots) with
    factor of shape (m, r) such that ||w - factor factor^T||_trace is below
    the tolerance, and factor[pivots, :] lower triangular in pivot order.
    """
    w = np.asarray(w, dtype=float)
    m = w.shape[0]
    if w.ndim != 2 or w.shape[1] != m:
        raise ValueError("w must be square")
    scale = max(np.abs(w).max(), 1.0)
    if not np.allclose(w, w.T, atol=1e-10 * scale):
        raise ValueError("w must be symmetric")
    if max_rank is None:
        max_rank = m
    if rng is None:
        rng = np.random.default_rng(0)

    residual = np.clip(np.diag(w).copy(), 0.0, None)
    trace = residual.sum()
    factor = np.zeros((m, max_rank))
    pivots = np.zeros(max_rank, dtype=int)
    rank = 0
    while rank < max_rank and residual.sum() > tol * trace and trace > 0.0:
        pivot = int(rng.choice(m, p=residual / residual.sum()))
        col = w[:, pivot] - factor[:, :rank] @ factor[pivot, :rank]
        head = col[pivot]
        if head <= 0.0:
            # numerically exhausted direction; remove it from the pool
            residual[pivot] = 0.0
            continue
        factor[:, rank] = col / math.sqrt(head)
        residual = np.clip(residual - factor[:, rank] ** 2, 0.0, None)
        pivots[rank] = pivot
        rank += 1
    return factor[:, :rank], pivots[:rank]


def _nystrom_row_sums(
    cross: np.ndarray, factor: np.ndarray, pivots: np.ndarray
) -> np.ndarray:
    """Row sums of the Nystrom approximation C W^{-1} C^T 1 through the
    pivoted factor: the triangular block factor[pivots] solves the pivot
    subsystem by forward/back substitution, which is the exact Nystrom
    extension on the retained pivot landmarks."""
    rank = factor.shape[1]
    if rank == 0:
        raise ValueError("degenerate kernel: pivoted factor has rank zero")
    tri = factor[pivots, :]  # (r, r) lower triangular in pivot order
    v = cross.sum(axis=0)[pivots]
    z = solve_triangular(tri, v, lower=True)
    u = solve_triangular(tri.T, z, lower=False)
    return cross[:, pivots] @ u


def default_landmark_count(n_components: int, rank_max: int, max_order: int, n: int) -> int:
    """Small multiple of the order-L feature-rank bound, capped at N."""
    bound = n_components * math.comb(rank_max + max_order - 1, max_order)
    return int(min(n, 4 * bound))


def nystrom_kernel_sums(
    data: ArrayLike,
    max_order: int,
    m: int,
    seed: int,
    jitter: float = 1e-10,
) -> KernelSumCache:
    """Approximate kernel row sums for orders 1..2L.

    Per order: select landmarks by kernel k-means++ (order-specific
    sub-seed), build the N x m cross matrix and the m x m landmark Gram
    (plus ``jitter * trace / m`` on its diagonal), factor it by randomly
    pivoted Cholesky, and extend C^T 1 through the factor. Order 0 and the
    diagonal powers are exact.
    """
    y = _rows(data)
    n = y.shape[0]
    if m > n:
        raise ValueError("landmark count cannot exceed the sample count")
    n_orders = 2 * max_order + 1
    s = np.empty((n_orders, n))
    s[0] = float(n)
    sq = np.einsum("nd,nd->n", y, y)
    diag = np.vander(sq, n_orders, increasing=True).T

    for k in range(1, n_orders):
        idx = kmeanspp_landmarks(y, k, m, seed)
        cross = (y @ y[idx].T) ** k  # (N, m)
        gram = cross[idx]
        if jitter > 0.0:
            gram = gram + np.eye(m) * (jitter * np.trace(gram) / m)
        factor, pivots = rp_cholesky(
            gram, rng=spawn_rng(seed, "pivot", k)
        )
        s[k] = _nystrom_row_sums(cross, factor, pivots)
    return KernelSumCache(
        row_sums=s,
        totals=s.sum(axis=1),
        diag_powers=diag,
        mode="nystrom",
        max_order=max_order,
        landmark_count=m,
    )


def gram_rank(
    data: ArrayLike, kernel_order: int, threshold: float = 1e-8, guard_n: int = GRAM_GUARD_N
) -> int:
    """Numerical rank of the order-k kernel Gram matrix: the number of
    eigenvalues above ``threshold`` times the largest."""
    y = _rows(data)
    if y.shape[0] > guard_n:
        raise ValueError(f"gram_rank builds the full Gram; N is capped at {guard_n}")
    gram = (y @ y.T) ** kernel_order
    eigs = np.abs(np.linalg.eigvalsh(gram))
    top = eigs.max()
    if top <= 0.0:
        return 0
    return int(np.count_nonzero(eigs > threshold * top))
