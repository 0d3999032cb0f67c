"""Explicit dense tensor arithmetic.

This is the brute-force reference path: every quantity the implicit
machinery produces can be recomputed here by materializing order-k tensors
with d**k entries. It doubles as the computational core of the explicit
method-of-moments baselines. Orders are capped (symmetrization enumerates
all k! index permutations) because explicit storage is exactly the thing
the implicit path avoids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import reduce
from itertools import permutations
from typing import List, Sequence, Union

import numpy as np

from .model import MixtureParams, SampleSet

__all__ = [
    "DenseTensor",
    "sym",
    "tensor_inner",
    "tensor_norm",
    "outer_power",
    "sample_moment_tensor",
    "population_moment_tensor",
    "moment_function_g",
    "sample_moment_stack",
    "moment_block_lengths",
    "moment_coefficient",
    "moment_linear_gradient",
]

MAX_SYM_ORDER = 6
MAX_DENSE_ENTRIES = 10**7
MAX_EXPLICIT_ORDER = 4

ArrayLike = Union[np.ndarray, Sequence]


@dataclass(frozen=True)
class DenseTensor:
    """Order-k tensor over R^d stored densely.

    ``values`` has shape (d,) * k; the flat view is the row-major (C order)
    vectorization, index(i_1..i_k) = sum_j i_j * d**(k-j).
    """

    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim < 1:
            raise ValueError("tensor order must be >= 1")
        if len(set(v.shape)) != 1:
            raise ValueError(f"all modes must share one dimension, got shape {v.shape}")
        if v.size > MAX_DENSE_ENTRIES:
            raise ValueError(
                f"dense tensor with {v.size} entries exceeds the "
                f"{MAX_DENSE_ENTRIES}-entry guard"
            )
        if not np.isfinite(v).all():
            raise ValueError("tensor entries must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def order(self) -> int:
        return self.values.ndim

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


def _check_same_shape(a: DenseTensor, b: DenseTensor):
    if a.values.shape != b.values.shape:
        raise ValueError(
            f"tensor shape mismatch: {a.values.shape} vs {b.values.shape}"
        )


def _sym_values(v: np.ndarray) -> np.ndarray:
    k = v.ndim
    if k > MAX_SYM_ORDER:
        raise ValueError(
            f"symmetrization is only supported up to order {MAX_SYM_ORDER} "
            f"(got {k}): it enumerates all k! permutations"
        )
    if k == 1:
        return v.copy()
    acc = np.zeros_like(v)
    for perm in permutations(range(k)):
        acc += np.transpose(v, perm)
    return acc / math.factorial(k)


def sym(t: DenseTensor) -> DenseTensor:
    """Average over all index permutations (orthogonal projection onto the
    symmetric tensors; idempotent)."""
    return DenseTensor(_sym_values(t.values))


def tensor_inner(a: DenseTensor, b: DenseTensor) -> float:
    _check_same_shape(a, b)
    return float(a.flat @ b.flat)


def tensor_norm(a: DenseTensor) -> float:
    return float(np.linalg.norm(a.flat))


def outer_power(y: ArrayLike, k: int) -> DenseTensor:
    """y^{tensor k}: entry (i_1..i_k) is the product of the y_{i_j}."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        raise ValueError("y must be a vector")
    if k < 1:
        raise ValueError("order must be >= 1")
    if y.shape[0] ** k > MAX_DENSE_ENTRIES:
        raise ValueError("outer power exceeds the dense-entry guard")
    return DenseTensor(reduce(np.multiply.outer, [y] * k))


def _as_rows(data: Union[SampleSet, ArrayLike]) -> np.ndarray:
    y = data.data if isinstance(data, SampleSet) else np.asarray(data, dtype=float)
    y = np.atleast_2d(y)
    if y.shape[0] < 1:
        raise ValueError("need at least one sample row")
    return y


def _mean_outer_values(y: np.ndarray, k: int) -> np.ndarray:
    n, d = y.shape
    if d**k > MAX_DENSE_ENTRIES:
        raise ValueError("sample moment exceeds the dense-entry guard")
    if k == 1:
        return y.mean(axis=0)
    if k == 2:
        return (y.T @ y) / n
    # higher orders: chunk rows so the (chunk, d**k) workspace stays small
    out = np.zeros((d,) * k)
    chunk = max(1, 10**6 // max(1, d**k))
    for start in range(0, n, chunk):
        block = y[start : start + chunk]
        acc = block
        for _ in range(k - 1):
            acc = acc[..., :, None] * block[(slice(None),) + (None,) * (acc.ndim - 1)]
        out += acc.sum(axis=0)
    return out / n


def sample_moment_tensor(data: Union[SampleSet, ArrayLike], k: int) -> DenseTensor:
    """Arithmetic mean of the k-fold outer powers of the rows."""
    if k < 1:
        raise ValueError("order must be >= 1")
    return DenseTensor(_mean_outer_values(_as_rows(data), k))


def moment_coefficient(k: int, l: int) -> float:
    """Multiplicity of the (centers^(k-2l), covariance^l) term in the order-k
    Gaussian moment: k! / ((k-2l)! l! 2**l)."""
    return math.factorial(k) / (
        math.factorial(k - 2 * l) * math.factorial(l) * 2**l
    )


def _population_moment_values(params: MixtureParams, k: int) -> np.ndarray:
    d = params.dim
    if d**k > MAX_DENSE_ENTRIES:
        raise ValueError("population moment exceeds the dense-entry guard")
    out = np.zeros((d,) * k)
    covs = params.covariances()
    for j in range(params.n_components):
        mu = params.centers[j]
        sig = covs[j]
        for l in range(k // 2 + 1):
            parts = [mu] * (k - 2 * l) + [sig] * l
            term = reduce(np.multiply.outer, parts)
            out += params.weights[j] * moment_coefficient(k, l) * _sym_values(term)
    return out


def population_moment_tensor(params: MixtureParams, k: int) -> DenseTensor:
    """Order-k moment tensor of the mixture, built explicitly as the weighted
    sum of symmetrized center/covariance outer products."""
    if k < 1:
        raise ValueError("order must be >= 1")
    if k > MAX_SYM_ORDER:
        raise ValueError(f"explicit population moments are capped at order {MAX_SYM_ORDER}")
    return DenseTensor(_population_moment_values(params, k))


def moment_block_lengths(d: int, max_order: int) -> List[int]:
    """Lengths d, d^2, ..., d^L of the stacked moment-condition blocks."""
    return [d**k for k in range(1, max_order + 1)]


def moment_function_g(params: MixtureParams, y: ArrayLike, max_order: int) -> np.ndarray:
    """Stacked moment conditions at a single observation: the row-major
    vectorizations of M^(k)(theta) - y^{tensor k} for k = 1..max_order."""
    if max_order > MAX_EXPLICIT_ORDER:
        raise ValueError(
            f"explicit moment conditions are capped at order {MAX_EXPLICIT_ORDER}"
        )
    y = np.asarray(y, dtype=float)
    blocks = []
    for k in range(1, max_order + 1):
        m_k = _population_moment_values(params, k)
        blocks.append((m_k - outer_power(y, k).values).ravel())
    return np.concatenate(blocks)


def sample_moment_stack(
    data: Union[SampleSet, ArrayLike], max_order: int
) -> List[np.ndarray]:
    """[mean outer power of order k for k = 1..max_order], computed once per
    dataset for the explicit baselines."""
    y = _as_rows(data)
    return [_mean_outer_values(y, k) for k in range(1, max_order + 1)]


def _contract(u: np.ndarray, mu: np.ndarray, sig: np.ndarray, n_mu: int, n_sig: int) -> np.ndarray:
    """Contract a symmetric tensor with n_sig copies of sig (two slots each)
    and n_mu copies of mu, always from the trailing modes; symmetry makes the
    slot choice immaterial."""
    w = u
    for _ in range(n_sig):
        w = np.tensordot(w, sig, axes=([w.ndim - 2, w.ndim - 1], [0, 1]))
    for _ in range(n_mu):
        w = np.tensordot(w, mu, axes=([w.ndim - 1], [0]))
    return w


def moment_linear_gradient(params: MixtureParams, u_tensors: Sequence[np.ndarray]):
    """Gradient blocks of F(theta) = sum_k <U_k, M^(k)(theta)> for symmetric
    tensors U_k (k = 1..len(u_tensors)).

    This is the workhorse of the explicit baselines: with U_k set to
    2 w_k (M^(k) - sample moment) it yields the gradient of the weighted
    squared-residual objective; with U_k the symmetrized blocks of
    2 W gbar it yields the fully-weighted version.

    Returns (grad_weights (K,), grad_centers (K, d), grad_factors (K, d, R)).
    """
    kmax = len(u_tensors)
    k_comp, d, r = params.n_components, params.dim, params.rank_max
    covs = params.covariances()
    g_pi = np.zeros(k_comp)
    g_mu = np.zeros((k_comp, d))
    g_v = np.zeros((k_comp, d, r))
    for j in range(k_comp):
        mu = params.centers[j]
        sig = covs[j]
        pi_j = params.weights[j]
        for k in range(1, kmax + 1):
            u = np.asarray(u_tensors[k - 1], dtype=float)
            for l in range(k // 2 + 1):
                c = moment_coefficient(k, l)
                n_mu = k - 2 * l
                g_pi[j] += c * float(_contract(u, mu, sig, n_mu, l))
                if n_mu >= 1:
                    g_mu[j] += pi_j * c * n_mu * _contract(u, mu, sig, n_mu - 1, l)
                if l >= 1:
                    t2 = _contract(u, mu, sig, n_mu, l - 1)
                    # d<T, Sigma>/dV = 2 T V for symmetric T, with multiplicity l
                    g_v[j] += pi_j * c * l * 2.0 * (t2 @ params.factors[j])
    return g_pi, g_mu, g_v
