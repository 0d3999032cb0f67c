"""Tensor-free moment quantities via pairwise cumulants and Bell recurrences.

Everything the weighted moment-matching objective needs reduces to two
scalar families that never materialize a tensor:

- ``moment_norm_sq(theta, k)``: the squared norm of the order-k model
  moment, obtained by summing complete Bell polynomials of the cumulants of
  <X_i, X_j> over component pairs;
- ``moment_sample_inner(theta, y, k)``: the inner product of the order-k
  model moment with y^{tensor k}, a two-argument Bell recurrence per
  component.

All pairwise quantities are evaluated through thin R x R intermediates
(P = V_i^T V_j and its Gram powers), never through d x d products, so the
per-entry cost is O(l d R^2) instead of O(l d^2 R).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple, Union

import numpy as np

from .model import MixtureParams

__all__ = [
    "CumulantTable",
    "pairwise_cumulants",
    "bell_complete",
    "bell_two_arg",
    "moment_norm_sq",
    "moment_norm_sq_gradients",
    "moment_sample_inner",
    "moment_sample_inner_gradients",
    "sample_inner_values",
    "sample_inner_weighted_sums",
]

ArrayLike = Union[np.ndarray, Sequence, float]


def bell_complete(x: ArrayLike) -> np.ndarray:
    """All complete Bell polynomial values B_0..B_k of the arguments
    x[0..k-1], via the binomial recurrence

        B_0 = 1,   B_t = sum_{l=0}^{t-1} C(t-1, l) B_{t-l-1} x_{l+1}.

    ``x`` may carry trailing batch axes; the recurrence is elementwise.
    Returns an array of shape (k+1,) + batch shape.
    """
    x = np.asarray(x, dtype=float)
    k = x.shape[0]
    out = np.empty((k + 1,) + x.shape[1:])
    out[0] = 1.0
    for t in range(1, k + 1):
        acc = np.zeros(x.shape[1:])
        for l in range(t):
            acc = acc + math.comb(t - 1, l) * out[t - l - 1] * x[l]
        out[t] = acc
    return out


def bell_two_arg(a: ArrayLike, b: ArrayLike, k: int) -> np.ndarray:
    """B_0..B_k with arguments (a, b, 0, ..., 0): the general recurrence
    collapses to B_t = a B_{t-1} + (t-1) b B_{t-2}.

    Batched elementwise over broadcast a, b. Returns shape (k+1,) + batch.
    """
    if k < 0:
        raise ValueError("order must be >= 0")
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    out = np.empty((k + 1,) + a.shape)
    out[0] = 1.0
    if k >= 1:
        out[1] = a
    for t in range(2, k + 1):
        out[t] = a * out[t - 1] + (t - 1) * b * out[t - 2]
    return out


@dataclass(frozen=True)
class CumulantTable:
    """Cumulants of <X_i, X_j> for all component pairs, plus the cached thin
    geometry needed by the analytic gradients.

    kappa   : (L, K, K), kappa[l-1, i, j] is the l-th cumulant
    mu_dot  : (K, K) center inner products
    a       : (K, K, R), a[i, j] = V_i^T mu_j
    p       : (K, K, R, R), p[i, j] = V_i^T V_j
    g_pows  : (S, K, K, R, R), g_pows[s, i, j] = (p[i,j] p[i,j]^T)^s
              (the pair (j, i) entry doubles as (p^T p)^s for pair (i, j))
    """

    kappa: np.ndarray
    mu_dot: np.ndarray
    a: np.ndarray
    p: np.ndarray
    g_pows: np.ndarray

    @property
    def max_order(self) -> int:
        return self.kappa.shape[0]


def pairwise_cumulants(params: MixtureParams, max_order: int) -> CumulantTable:
    """Cumulants of the scalar product of two independent components.

    For independent X_i ~ N(mu_i, V_i V_i^T) and X_j ~ N(mu_j, V_j V_j^T),
    with P = V_i^T V_j, G = P P^T, H = P^T P, a_ij = V_i^T mu_j:

        l = 1   : <mu_j, mu_i>
        l even  : (l-1)! tr(G^{l/2})
                  + (l!/2) a_ji^T H^{(l-2)/2} a_ji
                  + (l!/2) a_ij^T G^{(l-2)/2} a_ij
        l odd   : l! a_ij^T G^{(l-3)/2} P a_ji           (l >= 3)

    Zero factors degenerate gracefully (all l >= 2 terms vanish with P).
    """
    if max_order < 1:
        raise ValueError("max_order must be >= 1")
    mu = params.centers
    v = params.factors
    k = params.n_components

    mu_dot = mu @ mu.T
    a = np.einsum("idr,jd->ijr", v, mu)
    p = np.einsum("idr,jds->ijrs", v, v)

    n_pows = max_order // 2 + 2
    g_pows = np.empty((n_pows, k, k, params.rank_max, params.rank_max))
    g_pows[0] = np.eye(params.rank_max)
    g1 = np.einsum("ijrs,ijts->ijrt", p, p)  # P P^T
    if n_pows > 1:
        g_pows[1] = g1
    for s in range(2, n_pows):
        g_pows[s] = np.einsum("ijrs,ijst->ijrt", g_pows[s - 1], g1)

    a_t = np.swapaxes(a, 0, 1)  # a_t[i, j] = a[j, i] = V_j^T mu_i
    g_t = np.swapaxes(g_pows, 1, 2)  # g_t[s, i, j] = (P^T P)^s for pair (i, j)

    kappa = np.empty((max_order, k, k))
    kappa[0] = mu_dot
    for l in range(2, max_order + 1):
        if l % 2 == 0:
            m = (l - 2) // 2
            tr = np.einsum("ijrr->ij", g_pows[l // 2])
            qa = np.einsum("ijr,ijrs,ijs->ij", a_t, g_t[m], a_t)
            qb = np.einsum("ijr,ijrs,ijs->ij", a, g_pows[m], a)
            kappa[l - 1] = (
                math.factorial(l - 1) * tr
                + math.factorial(l) / 2.0 * (qa + qb)
            )
        else:
            m = (l - 1) // 2
            gp = np.einsum("ijrs,ijst->ijrt", g_pows[m - 1], p)
            kappa[l - 1] = math.factorial(l) * np.einsum(
                "ijr,ijrs,ijs->ij", a, gp, a_t
            )
    return CumulantTable(kappa=kappa, mu_dot=mu_dot, a=a, p=p, g_pows=g_pows)


def moment_norm_sq(params: MixtureParams, k: int, table: CumulantTable) -> float:
    """||M^(k)(theta)||^2 = sum_{i,j} pi_i pi_j B_k(cumulants of <X_i, X_j>)."""
    if table.max_order < k:
        raise ValueError(f"cumulant table covers order {table.max_order} < {k}")
    bells = bell_complete(table.kappa[:k])
    w = params.weights
    return float(np.einsum("i,j,ij->", w, w, bells[k]))


def _pair_grad_pieces(table: CumulantTable, l: int):
    """Per-pair gradient of kappa^(l) w.r.t. the second component's center
    and factor, reduced to thin pieces.

    Returns (mu_coef, vec_mu, row_mu, smat) such that

        d kappa^(l) / d mu_j = mu_coef * mu_i + V_i @ vec_mu
        d kappa^(l) / d V_j  = mu_i (x) row_mu + V_i @ smat

    with shapes vec_mu (K,K,R), row_mu (K,K,R), smat (K,K,R,R); any entry
    may be None when structurally zero. The identities used:

        (V_i V_i^T V_j V_j^T)^s                  = V_i G^{s-1} P V_j^T
        (V_i V_i^T V_j V_j^T)^s V_i V_i^T mu_j   = V_i G^s a_ij
        (V_i V_i^T V_j V_j^T)^s V_i V_i^T V_j    = V_i G^s P
        mu_i^T (V_j V_j^T V_i V_i^T)^s V_j       = (H^s a_ji)^T
        mu_j^T (V_i V_i^T V_j V_j^T)^s V_i V_i^T V_j = (P^T G^s a_ij)^T
    """
    a, p, g_pows = table.a, table.p, table.g_pows
    a_t = np.swapaxes(a, 0, 1)
    g_t = np.swapaxes(g_pows, 1, 2)
    fl = float(math.factorial(l))

    def ga(s):  # G^s a_ij
        return np.einsum("ijrs,ijs->ijr", g_pows[s], a)

    def ha(s):  # H^s a_ji
        return np.einsum("ijrs,ijs->ijr", g_t[s], a_t)

    def gpa(s):  # G^s P a_ji
        return np.einsum("ijrs,ijst,ijt->ijr", g_pows[s], p, a_t)

    def ptga(s):  # P^T G^s a_ij
        return np.einsum("ijsr,ijs->ijr", p, ga(s))

    if l == 1:
        return 1.0, None, None, None

    if l % 2 == 0:
        m = (l - 2) // 2
        vec_mu = fl * ga(m)
        row_mu = fl * ha(m)
        smat = fl * np.einsum("ijrs,ijst->ijrt", g_pows[m], p)
        for q in range(1, m + 1):
            smat = smat + fl * np.einsum("ijr,ijs->ijrs", gpa(q - 1), ha(m - q))
        for q in range(0, m):
            smat = smat + fl * np.einsum(
                "ijr,ijs->ijrs", ga(q), ptga(m - 1 - q)
            )
        return 0.0, vec_mu, row_mu, smat

    m = (l - 1) // 2
    vec_mu = fl * gpa(m - 1)
    row_mu = fl * ptga(m - 1)
    smat = None
    for q in range(0, m):
        term = fl * np.einsum("ijr,ijs->ijrs", ga(q), ha(m - 1 - q))
        smat = term if smat is None else smat + term
    for q in range(1, m):
        smat = smat + fl * np.einsum(
            "ijr,ijs->ijrs", gpa(q - 1), ptga(m - 1 - q)
        )
    return 0.0, vec_mu, row_mu, smat


def moment_norm_sq_gradients(
    params: MixtureParams, k: int, table: CumulantTable
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradient blocks of ||M^(k)(theta)||^2.

    Uses dB_k/dx_l = C(k, l) B_{k-l} and the chain rule through the pairwise
    cumulants; the symmetry kappa_ij = kappa_ji contributes the factor two.
    Returns (grad_weights (K,), grad_centers (K, d), grad_factors (K, d, R)).
    """
    if table.max_order < k:
        raise ValueError(f"cumulant table covers order {table.max_order} < {k}")
    w = params.weights
    mu = params.centers
    v = params.factors
    bells = bell_complete(table.kappa[:k])

    g_pi = 2.0 * np.einsum("i,ij->j", w, bells[k])

    g_mu = np.zeros_like(mu)
    g_v = np.zeros_like(v)
    for l in range(1, k + 1):
        coef = 2.0 * math.comb(k, l) * np.einsum("i,j,ij->ij", w, w, bells[k - l])
        mu_coef, vec_mu, row_mu, smat = _pair_grad_pieces(table, l)
        if mu_coef:
            g_mu += mu_coef * np.einsum("ij,id->jd", coef, mu)
        if vec_mu is not None:
            g_mu += np.einsum("ij,idr,ijr->jd", coef, v, vec_mu)
        if row_mu is not None:
            g_v += np.einsum("ij,id,ijr->jdr", coef, mu, row_mu)
        if smat is not None:
            g_v += np.einsum("ij,idr,ijrs->jds", coef, v, smat)
    return g_pi, g_mu, g_v


def _component_bells(params: MixtureParams, rows: np.ndarray, max_order: int):
    """Per-component Bell values for a batch of observations.

    Returns (bells, proj) with bells[t, n, j] = B_t(y_n^T mu_j, ||V_j^T y_n||^2)
    and proj[n, j] = y_n @ V_j of shape (N, K, R).
    """
    a = rows @ params.centers.T  # (N, K)
    proj = np.einsum("nd,kdr->nkr", rows, params.factors)
    b = np.einsum("nkr,nkr->nk", proj, proj)
    return bell_two_arg(a, b, max_order), proj


def moment_sample_inner(params: MixtureParams, y: ArrayLike, k: int) -> float:
    """<M^(k)(theta), y^{tensor k}> via the collapsed Bell recurrence with
    arguments (y^T mu_j, ||V_j^T y||^2)."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    bells, _ = _component_bells(params, y, k)
    return float(bells[k][0] @ params.weights)


def moment_sample_inner_gradients(
    params: MixtureParams, y: ArrayLike, k: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradient blocks of <M^(k)(theta), y^{tensor k}>:

        d/d pi_j  = B_k
        d/d mu_j  = k pi_j B_{k-1} y
        d/d V_j   = 2 C(k, 2) pi_j B_{k-2} y (V_j^T y)^T

    The factor gradient keeps the rank-one structure (no d x d matrix).
    """
    y = np.asarray(y, dtype=float)
    rows = np.atleast_2d(y)
    bells, proj = _component_bells(params, rows, k)
    w = params.weights
    g_pi = bells[k][0]
    g_mu = (k * w * bells[k - 1][0])[:, None] * y[None, :]
    if k >= 2:
        coef = 2.0 * math.comb(k, 2) * w * bells[k - 2][0]
        g_v = coef[:, None, None] * np.einsum("d,kr->kdr", y, proj[0])
    else:
        g_v = np.zeros_like(params.factors)
    return g_pi, g_mu, g_v


def sample_inner_values(
    params: MixtureParams, rows: np.ndarray, max_order: int
) -> np.ndarray:
    """Matrix of <M^(k), y_n^{tensor k}> with shape (max_order, N); row k-1
    holds order k. The per-sample work is the designated data-parallel loop."""
    bells, _ = _component_bells(params, np.asarray(rows, dtype=float), max_order)
    return np.einsum("knj,j->kn", bells[1:], params.weights)


def sample_inner_weighted_sums(
    params: MixtureParams, rows: np.ndarray, coeffs: np.ndarray
):
    """Per-order sums sum_n <M^(k), y_n^{tensor k}> together with the
    gradient blocks of sum_k coeffs[k-1] * sum_n <M^(k), y_n^{tensor k}>.

    One pass over the data serves both the objective value (which needs the
    plain per-order sums) and its gradient (which needs the coefficient-
    weighted combination).
    """
    rows = np.asarray(rows, dtype=float)
    coeffs = np.asarray(coeffs, dtype=float)
    max_order = coeffs.shape[0]
    bells, proj = _component_bells(params, rows, max_order)
    w = params.weights

    sums = np.einsum("knj,j->k", bells[1:], w)

    # d/d pi_j: sum_k c_k sum_n B_k[n, j]
    g_pi = np.einsum("k,knj->j", coeffs, bells[1:])

    # d/d mu_j: sum_k c_k k pi_j sum_n B_{k-1}[n, j] y_n
    mu_coef = np.einsum("k,knj->nj", coeffs * np.arange(1, max_order + 1), bells[:-1])
    g_mu = w[:, None] * (mu_coef.T @ rows)

    # d/d V_j: sum_k c_k 2 C(k,2) pi_j sum_n B_{k-2}[n, j] y_n (V_j^T y_n)^T
    g_v = np.zeros_like(params.factors)
    if max_order >= 2:
        pair_counts = np.array(
            [2.0 * math.comb(k, 2) for k in range(2, max_order + 1)]
        )
        v_coef = np.einsum("k,knj->nj", coeffs[1:] * pair_counts, bells[:-2])
        for j in range(params.n_components):
            g_v[j] = w[j] * (rows.T @ (v_coef[:, j : j + 1] * proj[:, j]))
    return sums, g_pi, g_mu, g_v
