"""Multi-step moment-matching estimation: MM, full-matrix GMM, and the
diagonally weighted variant (DGMM).

All methods minimize a weighted squared residual between model moments and
sample moments up to order L, alternating weight updates with inner
quasi-Newton solves:

    step t:  weights from the previous iterate  ->  minimize  ->  repeat
             until the packed parameter change drops below tol_theta or
             t reaches max_steps.

Methods
-------
mm-implicit   unit weights, tensor-free objective/gradient
dgmm          per-order diagonal weights, tensor-free
mm-explicit   unit weights, dense-tensor objective/gradient (baseline)
gmm-explicit  full inverse-covariance weighting, dense tensors (baseline)
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import line_search as _wolfe_line_search

from .kernels import (
    EXACT_GUARD_N,
    KernelSumCache,
    default_landmark_count,
    exact_kernel_sums,
    nystrom_kernel_sums,
)
from .model import (
    MixtureParams,
    PackedTheta,
    SampleSet,
    chain_simplex_gradient,
    pack,
    unpack,
)
from .moments import (
    moment_norm_sq,
    moment_norm_sq_gradients,
    pairwise_cumulants,
    sample_inner_values,
    sample_inner_weighted_sums,
)
from .tensors import (
    MAX_DENSE_ENTRIES,
    _population_moment_values,
    _sym_values,
    moment_block_lengths,
    moment_linear_gradient,
    sample_moment_stack,
)

__all__ = [
    "METHODS",
    "EstimatorConfig",
    "StepRecord",
    "EstimationTrace",
    "LbfgsResult",
    "dgmm_weights",
    "direct_diag_weights_from_S",
    "dgmm_objective_gradient",
    "lbfgs_minimize",
    "run_estimation",
    "assemble_moment_covariance",
    "gmm_full_weights",
]

METHODS = ("mm-explicit", "mm-implicit", "gmm-explicit", "dgmm")

GMM_GUARD_Q = 1500


@dataclass(frozen=True)
class EstimatorConfig:
    """Knobs of the multi-step estimation loop.

    max_order       : highest moment order L
    max_steps       : estimation steps T
    tol_theta       : Euclidean convergence tolerance on the packed vector
    max_inner       : iteration cap I of the inner quasi-Newton solver
    tau             : softmax temperature of the weight reparameterization
    kernel_mode     : "exact" or "nystrom" row-sum cache for implicit methods
    landmarks       : Nystrom landmark count (None -> small multiple of the
                      order-L feature-rank bound)
    gmm_ridge       : relative diagonal regularization of the sample moment
                      covariance before inversion (gmm-explicit only)
    """

    method: str = "dgmm"
    max_order: int = 3
    max_steps: int = 10
    tol_theta: float = 1e-4
    max_inner: int = 200
    tau: float = 1.0
    kernel_mode: str = "exact"
    landmarks: Optional[int] = None
    kernel_seed: int = 0
    jitter: float = 1e-10
    exact_guard: int = EXACT_GUARD_N
    lbfgs_memory: int = 10
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    grad_tol: float = 1e-8
    gmm_ridge: float = 1e-10

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.max_order < 1 or self.max_steps < 1 or self.tol_theta <= 0:
            raise ValueError("need max_order >= 1, max_steps >= 1, tol_theta > 0")
        if self.kernel_mode not in ("exact", "nystrom"):
            raise ValueError("kernel_mode must be 'exact' or 'nystrom'")


@dataclass
class StepRecord:
    """One estimation step: the weights used, the solved iterate, and the
    inner solver's bookkeeping."""

    step: int
    weights: Optional[np.ndarray]
    weight_cond: Optional[float]
    theta: np.ndarray
    objective: float
    inner_iterations: int
    wall_time: float
    solver_status: str
    degenerate_weighting: bool = False

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "weights": None if self.weights is None else list(map(float, self.weights)),
            "weight_cond": self.weight_cond,
            "objective": float(self.objective),
            "inner_iterations": int(self.inner_iterations),
            "wall_time": float(self.wall_time),
            "solver_status": self.solver_status,
            "degenerate_weighting": bool(self.degenerate_weighting),
            "theta": list(map(float, self.theta)),
        }


@dataclass
class EstimationTrace:
    steps: List[StepRecord] = field(default_factory=list)
    termination: str = ""

    @property
    def total_inner_iterations(self) -> int:
        return sum(s.inner_iterations for s in self.steps)

    def to_dict(self) -> dict:
        return {
            "termination": self.termination,
            "total_inner_iterations": self.total_inner_iterations,
            "steps": [s.to_dict() for s in self.steps],
        }


# ---------------------------------------------------------------------------
# Diagonal weights
# ---------------------------------------------------------------------------

def direct_diag_weights_from_S(s_hat: np.ndarray, dim: int, max_order: int) -> np.ndarray:
    """Order-pooled diagonal weights from an explicitly assembled moment
    covariance: for the index block I_k of order k,

        w_k = sum_{i in I_k} S_ii / sum_{i in I_k} sum_j S_ij^2.
    """
    s_hat = np.asarray(s_hat, dtype=float)
    lengths = moment_block_lengths(dim, max_order)
    q = sum(lengths)
    if s_hat.shape != (q, q):
        raise ValueError(f"expected a {q} x {q} matrix, got {s_hat.shape}")
    weights = np.empty(max_order)
    start = 0
    for k, length in enumerate(lengths, start=1):
        block = slice(start, start + length)
        num = np.trace(s_hat[block, block])
        den = float(np.sum(s_hat[block, :] ** 2))
        if den <= 0.0:
            raise ValueError("degenerate moment covariance: zero row mass")
        weights[k - 1] = num / den
        start += length
    return weights


def dgmm_weights(
    params_prev: MixtureParams,
    data: Union[SampleSet, np.ndarray],
    cache: KernelSumCache,
    max_order: int,
) -> np.ndarray:
    """Diagonal weights evaluated without assembling the moment covariance.

    With a_k = ||M^(k)||^2, b_k[n] = <M^(k), y_n^{tensor k}>, and the cached
    kernel sums s_k[n] = sum_{n'} <y_n, y_{n'}>^k with totals t_k, the
    pooled-diagonal weight of order k is N * sum_n (a_k - 2 b_k[n] +
    <y_n,y_n>^k) divided by

        D_k = sum_{k'} sum_{n,n'} (a_k - b_k[n] - b_k[n'] + <y_n,y_{n'}>^k)
                                  (a_k' - b_k'[n] - b_k'[n'] + <y_n,y_{n'}>^k').

    Expanding the product of the two brackets gives sixteen terms, each
    collapsing to cached quantities (S_k = sum_n b_k[n], B-dot products,
    cross sums against s_{k'}, and totals; the kernel-power product
    contributes t_{k+k'}, which is why the cache extends to order 2L):

        a_k a_k'                -> N^2 a_k a_k'
        -a_k b_k'[n] (x2 ways)  -> -2 N a_k S_k'
        -a_k' b_k[n] (x2 ways)  -> -2 N a_k' S_k
        a_k gamma'              -> a_k t_k'
        a_k' gamma              -> a_k' t_k
        b_k[n] b_k'[n] (x2)     -> 2 N sum_n b_k[n] b_k'[n]
        b_k[n] b_k'[n'] (x2)    -> 2 S_k S_k'
        -b_k[n] gamma' (x2)     -> -2 sum_n b_k[n] s_k'[n]
        -b_k'[n] gamma (x2)     -> -2 sum_n b_k'[n] s_k[n]
        gamma gamma'            -> t_{k+k'}

    so every (n, n') pair enters only through the cached row sums. The cost
    is O(N L^2) on top of one tensor-free pass for the b_k.
    """
    if cache.max_order < max_order:
        raise ValueError("kernel cache does not cover the requested order")
    rows = data.data if isinstance(data, SampleSet) else np.asarray(data, dtype=float)
    n = rows.shape[0]
    if cache.n_samples != n:
        raise ValueError("kernel cache was built for a different sample count")

    table = pairwise_cumulants(params_prev, max_order)
    alph = np.array(
        [moment_norm_sq(params_prev, k, table) for k in range(1, max_order + 1)]
    )
    b = sample_inner_values(params_prev, rows, max_order)  # (L, N)
    b_sum = b.sum(axis=1)
    t = cache.totals
    s = cache.row_sums

    num = n * (n * alph - 2.0 * b_sum + cache.diag_powers[1 : max_order + 1].sum(axis=1))

    bb = b @ b.T  # (L, L): sum_n b_k[n] b_k'[n]
    bs = b @ s[1 : max_order + 1].T  # (L, L): sum_n b_k[n] s_k'[n]
    a_col = alph[:, None]
    a_row = alph[None, :]
    d_kk = (
        n * n * a_col * a_row
        - 2.0 * n * (a_col * b_sum[None, :] + a_row * b_sum[:, None])
        + a_col * t[None, 1 : max_order + 1]
        + a_row * t[1 : max_order + 1, None]
        + 2.0 * n * bb
        + 2.0 * b_sum[:, None] * b_sum[None, :]
        - 2.0 * (bs + bs.T)
        + t[2 : 2 * max_order + 1].reshape(-1)[
            np.add.outer(np.arange(max_order), np.arange(max_order))
        ]
    )
    den = d_kk.sum(axis=1)
    if not np.all(np.isfinite(den)) or np.any(den <= 0.0):
        raise ValueError("degenerate data: weight denominator is not positive")
    weights = num / den
    if np.any(weights <= 0.0):
        raise ValueError("degenerate data: non-positive diagonal weight")
    return weights


# ---------------------------------------------------------------------------
# Objective and gradient, tensor-free path
# ---------------------------------------------------------------------------

def dgmm_objective_gradient(
    theta: PackedTheta,
    weights: np.ndarray,
    data: Union[SampleSet, np.ndarray],
    cache: KernelSumCache,
) -> Tuple[float, np.ndarray]:
    """Weighted moment-matching objective and its packed gradient.

    Q = sum_k w_k ( ||M^(k)||^2 - (2/N) sum_n <M^(k), y_n^{tensor k}>
                    + t_k / N^2 )

    assembled from the implicit quantities and cached kernel totals; the
    gradient combines the analytic norm and inner-product gradients and maps
    the weight block through the softmax Jacobian.
    """
    weights = np.asarray(weights, dtype=float)
    max_order = weights.shape[0]
    rows = data.data if isinstance(data, SampleSet) else np.asarray(data, dtype=float)
    n = rows.shape[0]
    params = unpack(theta)

    table = pairwise_cumulants(params, max_order)
    q_val = 0.0
    g_pi = np.zeros(params.n_components)
    g_mu = np.zeros_like(params.centers)
    g_v = np.zeros_like(params.factors)
    for k in range(1, max_order + 1):
        w_k = weights[k - 1]
        q_val += w_k * (
            moment_norm_sq(params, k, table) + cache.totals[k] / (n * n)
        )
        gp, gm, gv = moment_norm_sq_gradients(params, k, table)
        g_pi += w_k * gp
        g_mu += w_k * gm
        g_v += w_k * gv

    sums, bp, bm, bv = sample_inner_weighted_sums(params, rows, weights)
    q_val -= (2.0 / n) * float(weights @ sums)
    g_pi -= (2.0 / n) * bp
    g_mu -= (2.0 / n) * bm
    g_v -= (2.0 / n) * bv

    grad = np.concatenate(
        [
            chain_simplex_gradient(g_pi, params.weights, theta.tau),
            g_mu.ravel(),
            g_v.ravel(),
        ]
    )
    return q_val, grad


# ---------------------------------------------------------------------------
# Explicit-tensor objective paths (baselines)
# ---------------------------------------------------------------------------

def _explicit_residuals(params: MixtureParams, targets: Sequence[np.ndarray]):
    return [
        _population_moment_values(params, k) - targets[k - 1]
        for k in range(1, len(targets) + 1)
    ]


def explicit_objective_gradient(
    theta: PackedTheta,
    weights: np.ndarray,
    targets: Sequence[np.ndarray],
) -> Tuple[float, np.ndarray]:
    """Dense-tensor evaluation of sum_k w_k ||M^(k) - sample moment||^2."""
    params = unpack(theta)
    residuals = _explicit_residuals(params, targets)
    q_val = sum(
        w * float(r.ravel() @ r.ravel()) for w, r in zip(weights, residuals)
    )
    u_tensors = [2.0 * w * r for w, r in zip(weights, residuals)]
    g_pi, g_mu, g_v = moment_linear_gradient(params, u_tensors)
    grad = np.concatenate(
        [
            chain_simplex_gradient(g_pi, params.weights, theta.tau),
            g_mu.ravel(),
            g_v.ravel(),
        ]
    )
    return q_val, grad


def gmm_objective_gradient(
    theta: PackedTheta,
    weight_matrix: np.ndarray,
    targets: Sequence[np.ndarray],
) -> Tuple[float, np.ndarray]:
    """Fully weighted objective gbar^T W gbar with a dense q x q W."""
    params = unpack(theta)
    residuals = _explicit_residuals(params, targets)
    gbar = np.concatenate([r.ravel() for r in residuals])
    wg = weight_matrix @ gbar
    q_val = float(gbar @ wg)
    u_tensors = []
    start = 0
    for r in residuals:
        block = wg[start : start + r.size].reshape(r.shape)
        u_tensors.append(2.0 * _sym_values(block))
        start += r.size
    g_pi, g_mu, g_v = moment_linear_gradient(params, u_tensors)
    grad = np.concatenate(
        [
            chain_simplex_gradient(g_pi, params.weights, theta.tau),
            g_mu.ravel(),
            g_v.ravel(),
        ]
    )
    return q_val, grad


def _moment_outer_stats(rows: np.ndarray, max_order: int):
    """Dataset-level statistics for the moment covariance: the mean stacked
    outer-power vector and the mean of its self outer products."""
    n, d = rows.shape
    lengths = moment_block_lengths(d, max_order)
    q = sum(lengths)
    if q > GMM_GUARD_Q:
        raise ValueError(
            f"explicit moment covariance needs q={q} > {GMM_GUARD_Q} conditions"
        )
    u2 = np.zeros((q, q))
    ubar = np.zeros(q)
    chunk = max(1, 10**6 // q)
    for start in range(0, n, chunk):
        block = rows[start : start + chunk]
        pieces = []
        acc = block
        pieces.append(acc)
        for _ in range(max_order - 1):
            acc = acc[..., :, None] * block[(slice(None),) + (None,) * (acc.ndim - 1)]
            pieces.append(acc)
        z = np.concatenate([p.reshape(p.shape[0], -1) for p in pieces], axis=1)
        u2 += z.T @ z
        ubar += z.sum(axis=0)
    return u2 / n, ubar / n


def assemble_moment_covariance(
    params: MixtureParams,
    data: Union[SampleSet, np.ndarray],
    max_order: int,
    stats=None,
) -> np.ndarray:
    """Sample covariance of the stacked moment conditions at ``params``:
    (1/N) sum_n g g^T with g = vec(M^(k)) - vec(y_n^{tensor k}) stacked.

    Since g = m - u_n with m fixed, S = m m^T - m ubar^T - ubar m^T + U2,
    where (U2, ubar) depend on the data only and may be passed in."""
    rows = data.data if isinstance(data, SampleSet) else np.asarray(data, dtype=float)
    if stats is None:
        stats = _moment_outer_stats(rows, max_order)
    u2, ubar = stats
    m = np.concatenate(
        [
            _population_moment_values(params, k).ravel()
            for k in range(1, max_order + 1)
        ]
    )
    return u2 + np.outer(m, m) - np.outer(m, ubar) - np.outer(ubar, m)


def _invert_weighting(s_hat: np.ndarray, ridge: float):
    """Regularized symmetric inverse of the moment covariance; a zero matrix
    is flagged degenerate and mapped to a scaled identity."""
    q = s_hat.shape[0]
    trace = float(np.trace(s_hat))
    if trace <= 0.0:
        return np.eye(q) / max(ridge, np.finfo(float).tiny), True
    s_reg = s_hat + np.eye(q) * (ridge * trace / q)
    factor = cho_factor(s_reg, lower=True)
    return cho_solve(factor, np.eye(q)), False


def gmm_full_weights(
    params_prev: MixtureParams,
    data: Union[SampleSet, np.ndarray],
    max_order: int,
    regularization: float = 1e-10,
    stats=None,
) -> np.ndarray:
    """Full q x q weighting matrix: the regularized inverse of the sample
    moment covariance at the previous iterate."""
    s_hat = assemble_moment_covariance(params_prev, data, max_order, stats=stats)
    w, _ = _invert_weighting(s_hat, regularization)
    return w


# ---------------------------------------------------------------------------
# Inner solver
# ---------------------------------------------------------------------------

@dataclass
class LbfgsResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    iterations: int
    status: str
    n_evals: int


class _EvalCache:
    """Joint value/gradient evaluator memoized on the exact point, so the
    line search's separate f and f' probes cost one evaluation."""

    def __init__(self, fg: Callable[[np.ndarray], Tuple[float, np.ndarray]]):
        self._fg = fg
        self._store: dict = {}
        self.n_evals = 0

    def __call__(self, x: np.ndarray) -> Tuple[float, np.ndarray]:
        key = x.tobytes()
        hit = self._store.get(key)
        if hit is None:
            hit = self._fg(np.asarray(x, dtype=float))
            self.n_evals += 1
            if len(self._store) > 8:
                self._store.clear()
            self._store[key] = hit
        return hit

    def value(self, x: np.ndarray) -> float:
        return self(x)[0]

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self(x)[1]


def _two_loop_direction(grad, s_list, y_list, rho_list):
    q = -grad
    alphas = []
    for s, y, rho in zip(reversed(s_list), reversed(y_list), reversed(rho_list)):
        a = rho * (s @ q)
        alphas.append(a)
        q = q - a * y
    if s_list:
        s, y = s_list[-1], y_list[-1]
        q = q * ((s @ y) / (y @ y))
    for (s, y, rho), a in zip(zip(s_list, y_list, rho_list), reversed(alphas)):
        b = rho * (y @ q)
        q = q + (a - b) * s
    return q


def lbfgs_minimize(
    fg: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    x0: np.ndarray,
    max_iter: int,
    memory: int = 10,
    c1: float = 1e-4,
    c2: float = 0.9,
    grad_tol: float = 1e-8,
    stall_tol: float = 1e-14,
) -> LbfgsResult:
    """Limited-memory quasi-Newton descent with a strong Wolfe line search.

    Terminates on ||g|| <= grad_tol * max(1, ||x||), on an objective stall,
    or at the iteration cap. The objective is non-increasing across
    accepted steps; a failed line search is reported in the status and the
    best iterate so far is returned.
    """
    cache = _EvalCache(fg)
    x = np.array(x0, dtype=float)
    f, g = cache(x)
    if not np.isfinite(f):
        raise ValueError("objective is not finite at the starting point")

    def converged(xv, gv):
        return np.linalg.norm(gv) <= grad_tol * max(1.0, np.linalg.norm(xv))

    if converged(x, g):
        return LbfgsResult(x, f, float(np.linalg.norm(g)), 0, "converged-gradient", cache.n_evals)

    s_list: List[np.ndarray] = []
    y_list: List[np.ndarray] = []
    rho_list: List[float] = []
    status = "max-iterations"
    iterations = 0
    old_f = None
    for it in range(1, max_iter + 1):
        direction = _two_loop_direction(g, s_list, y_list, rho_list)
        if direction @ g >= 0.0:
            s_list, y_list, rho_list = [], [], []
            direction = -g
        if not s_list:
            # no curvature information yet: take a unit-length first step
            direction = direction / max(1.0, np.linalg.norm(direction))

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            alpha, _, _, f_new, _, _ = _wolfe_line_search(
                cache.value, cache.grad, x, direction,
                gfk=g, old_fval=f, old_old_fval=old_f, c1=c1, c2=c2, maxiter=30,
            )
        if alpha is None:
            # Wolfe search failed; fall back to plain backtracking
            alpha, f_new = _backtrack(cache, x, f, g, direction, c1)
            if alpha is None:
                status = "line-search-failed"
                break

        x_new = x + alpha * direction
        f_new, g_new = cache(x_new)
        step = x_new - x
        dg = g_new - g
        curvature = step @ dg
        if curvature > 1e-10 * np.linalg.norm(step) * np.linalg.norm(dg):
            s_list.append(step)
            y_list.append(dg)
            rho_list.append(1.0 / curvature)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
                rho_list.pop(0)

        old_f, x, f, g = f, x_new, f_new, g_new
        iterations = it
        if converged(x, g):
            status = "converged-gradient"
            break
        if abs(old_f - f) <= stall_tol * max(1.0, abs(old_f), abs(f)):
            status = "stalled"
            break
    return LbfgsResult(x, f, float(np.linalg.norm(g)), iterations, status, cache.n_evals)


def _backtrack(cache, x, f, g, direction, c1, max_halvings=40):
    slope = g @ direction
    alpha = 1.0
    for _ in range(max_halvings):
        f_try = cache.value(x + alpha * direction)
        if np.isfinite(f_try) and f_try <= f + c1 * alpha * slope:
            return alpha, f_try
        alpha *= 0.5
    return None, None


# ---------------------------------------------------------------------------
# Multi-step loop
# ---------------------------------------------------------------------------

def _build_cache(rows: np.ndarray, params: MixtureParams, config: EstimatorConfig):
    if config.kernel_mode == "exact":
        return exact_kernel_sums(rows, config.max_order, guard_n=config.exact_guard)
    m = config.landmarks
    if m is None:
        m = default_landmark_count(
            params.n_components, params.rank_max, config.max_order, rows.shape[0]
        )
    return nystrom_kernel_sums(
        rows, config.max_order, m, config.kernel_seed, jitter=config.jitter
    )


def run_estimation(
    data: Union[SampleSet, np.ndarray],
    config: EstimatorConfig,
    init: MixtureParams,
) -> Tuple[MixtureParams, EstimationTrace]:
    """Run the configured method from ``init`` and return the final
    parameters with the per-step trace.

    Each step computes method-specific weights at the previous iterate (unit
    weights for the MM variants, pooled diagonal weights for dgmm, a
    regularized inverse covariance for gmm-explicit), then warm-starts the
    inner solve from that iterate.
    """
    rows = data.data if isinstance(data, SampleSet) else np.atleast_2d(np.asarray(data, dtype=float))
    if rows.shape[1] != init.dim:
        raise ValueError("data dimension does not match the initialization")
    n = rows.shape[0]
    max_order = config.max_order
    theta = pack(init, config.tau)
    x = np.array(theta.values)

    implicit = config.method in ("dgmm", "mm-implicit")
    cache = _build_cache(rows, init, config) if implicit else None
    targets = None
    gmm_stats = None
    if config.method in ("mm-explicit", "gmm-explicit"):
        if init.dim**max_order > MAX_DENSE_ENTRIES:
            raise ValueError("explicit baseline exceeds the dense-entry guard")
        targets = sample_moment_stack(rows, max_order)
    if config.method == "gmm-explicit":
        gmm_stats = _moment_outer_stats(rows, max_order)

    trace = EstimationTrace()
    termination = "max-steps"
    for step in range(1, config.max_steps + 1):
        start_time = time.perf_counter()
        params_prev = unpack(theta.replace_values(x))
        weights = None
        weight_cond = None
        degenerate = False

        if config.method in ("mm-implicit", "mm-explicit"):
            weights = np.ones(max_order)
        elif config.method == "dgmm":
            weights = dgmm_weights(params_prev, rows, cache, max_order)
        else:  # gmm-explicit
            s_hat = assemble_moment_covariance(
                params_prev, rows, max_order, stats=gmm_stats
            )
            w_full, degenerate = _invert_weighting(s_hat, config.gmm_ridge)
            weight_cond = float(np.linalg.cond(s_hat)) if not degenerate else np.inf

        if config.method in ("dgmm", "mm-implicit"):
            def fg(v, _w=weights):
                return dgmm_objective_gradient(
                    theta.replace_values(v), _w, rows, cache
                )
        elif config.method == "mm-explicit":
            def fg(v, _w=weights):
                return explicit_objective_gradient(theta.replace_values(v), _w, targets)
        else:
            def fg(v, _wf=w_full):
                return gmm_objective_gradient(theta.replace_values(v), _wf, targets)

        result = lbfgs_minimize(
            fg,
            x,
            config.max_inner,
            memory=config.lbfgs_memory,
            c1=config.wolfe_c1,
            c2=config.wolfe_c2,
            grad_tol=config.grad_tol,
        )
        delta = float(np.linalg.norm(result.x - x))
        x = result.x
        trace.steps.append(
            StepRecord(
                step=step,
                weights=None if weights is None else np.array(weights),
                weight_cond=weight_cond,
                theta=np.array(x),
                objective=result.fun,
                inner_iterations=result.iterations,
                wall_time=time.perf_counter() - start_time,
                solver_status=result.status,
                degenerate_weighting=degenerate,
            )
        )
        if delta < config.tol_theta:
            termination = "converged-theta"
            break
    trace.termination = termination
    return unpack(theta.replace_values(x)), trace
