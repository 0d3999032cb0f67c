"""Estimation error metrics with component alignment.

Component labels are arbitrary, so estimates are aligned to the ground
truth before computing errors: the permutation minimizing the summed
relative center error wins, with ties broken by the covariance error and
then lexicographically. Covariances are always reconstructed as V V^T, so
right-rotations of the factors never affect the reported errors.
"""

from __future__ import annotations

from itertools import permutations
from typing import Tuple

import numpy as np

from .model import MixtureParams

__all__ = ["align_components", "error_metrics"]

MAX_ALIGN_COMPONENTS = 10


def _center_cost(est: MixtureParams, truth: MixtureParams, perm) -> float:
    return sum(
        np.linalg.norm(est.centers[p] - truth.centers[j])
        / np.linalg.norm(truth.centers[j])
        for j, p in enumerate(perm)
    )


def _cov_cost(est_cov, truth_cov, perm) -> float:
    return sum(
        np.linalg.norm(est_cov[p] - truth_cov[j], ord=2)
        / np.linalg.norm(truth_cov[j], ord=2)
        for j, p in enumerate(perm)
    )


def align_components(est: MixtureParams, truth: MixtureParams) -> Tuple[int, ...]:
    """Permutation sigma such that est component sigma(j) matches truth
    component j, found by exhaustive search over K! candidates."""
    k = truth.n_components
    if est.n_components != k or est.dim != truth.dim:
        raise ValueError("estimate and truth must share K and d")
    if k > MAX_ALIGN_COMPONENTS:
        raise ValueError(f"exhaustive alignment is capped at K={MAX_ALIGN_COMPONENTS}")
    est_cov = est.covariances()
    truth_cov = truth.covariances()
    best = None
    best_key = None
    for perm in permutations(range(k)):
        key = (
            round(_center_cost(est, truth, perm), 12),
            round(_cov_cost(est_cov, truth_cov, perm), 12),
            perm,
        )
        if best_key is None or key < best_key:
            best_key = key
            best = perm
    return best


def error_metrics(
    est: MixtureParams, truth: MixtureParams, cov_norm: str = "spectral"
) -> Tuple[float, float, float]:
    """Average relative errors (weights, centers, covariances) after
    alignment.

    The weight error averages the per-component scalar relative errors
    |pi_hat - pi*| / pi*; center errors are relative Euclidean norms; the
    covariance error uses the spectral norm by default (``cov_norm`` may be
    "frobenius", which shifts absolute values but not method rankings).
    """
    if cov_norm not in ("spectral", "frobenius"):
        raise ValueError("cov_norm must be 'spectral' or 'frobenius'")
    ord_ = 2 if cov_norm == "spectral" else "fro"
    perm = align_components(est, truth)
    est_cov = est.covariances()
    truth_cov = truth.covariances()
    k = truth.n_components

    err_pi = 0.0
    err_mu = 0.0
    err_sigma = 0.0
    for j, p in enumerate(perm):
        err_pi += abs(est.weights[p] - truth.weights[j]) / truth.weights[j]
        err_mu += np.linalg.norm(est.centers[p] - truth.centers[j]) / np.linalg.norm(
            truth.centers[j]
        )
        err_sigma += np.linalg.norm(
            est_cov[p] - truth_cov[j], ord=ord_
        ) / np.linalg.norm(truth_cov[j], ord=ord_)
    return err_pi / k, err_mu / k, err_sigma / k
