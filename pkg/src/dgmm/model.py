"""Mixture parameterization, sampling, and the unconstrained repacking.

Conventions
-----------
- K is the number of mixture components, d the ambient dimension, R the
  common factor width (maximum covariance rank).
- Weights are stored on the open simplex; centers as rows of a (K, d)
  array; covariance factors as a (K, d, R) array with Sigma_j = V_j V_j^T.
  Columns of V_j past a component's true rank are zero.
- Every stochastic operation takes an explicit integer seed and derives a
  counter-based generator from it, so results are reproducible and
  substreams never collide across operations.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "MixtureParams",
    "PackedTheta",
    "SampleSet",
    "GroundTruthSpec",
    "spawn_rng",
    "sample_mixture",
    "generate_ground_truth",
    "default_initialization",
    "softmax_weights",
    "pack",
    "unpack",
    "chain_simplex_gradient",
]

_WEIGHT_SUM_TOL = 1e-12


def spawn_rng(seed: int, *stream) -> np.random.Generator:
    """Counter-based generator for a named substream of ``seed``.

    ``stream`` elements may be strings (hashed stably) or integers; distinct
    streams of the same seed are statistically independent.
    """
    key = tuple(
        zlib.crc32(s.encode()) if isinstance(s, str) else int(s) for s in stream
    )
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(seq))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class MixtureParams:
    """Structured mixture parameters.

    weights : (K,) probabilities, strictly positive, summing to one
    centers : (K, d) component means
    factors : (K, d, R) covariance factors, Sigma_j = factors[j] @ factors[j].T
    """

    weights: np.ndarray
    centers: np.ndarray
    factors: np.ndarray

    def __post_init__(self):
        w = _readonly(np.atleast_1d(self.weights))
        mu = _readonly(np.atleast_2d(self.centers))
        v = _readonly(self.factors)
        if v.ndim != 3:
            raise ValueError("factors must have shape (K, d, R)")
        k = w.shape[0]
        if mu.shape[0] != k or v.shape[0] != k or v.shape[1] != mu.shape[1]:
            raise ValueError(
                f"inconsistent shapes: weights {w.shape}, centers {mu.shape}, "
                f"factors {v.shape}"
            )
        if not (np.isfinite(w).all() and np.isfinite(mu).all() and np.isfinite(v).all()):
            raise ValueError("parameters must be finite")
        if np.any(w <= 0.0) or np.any(w > 1.0 + _WEIGHT_SUM_TOL):
            raise ValueError("weights must lie in (0, 1]")
        if abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to one, got {w.sum()!r}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "centers", mu)
        object.__setattr__(self, "factors", v)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def rank_max(self) -> int:
        return self.factors.shape[2]

    def covariances(self) -> np.ndarray:
        """(K, d, d) array of Sigma_j = V_j V_j^T."""
        return np.einsum("kir,kjr->kij", self.factors, self.factors)


@dataclass(frozen=True)
class PackedTheta:
    """Flat unconstrained optimization vector.

    Layout (row-major / C order throughout):
        [logits (K); centers (K*d); factors (K*d*R)]
    with ``weights = softmax((logits - max) / tau)``.
    """

    values: np.ndarray
    n_components: int
    dim: int
    rank_max: int
    tau: float = 1.0

    def __post_init__(self):
        v = _readonly(np.atleast_1d(self.values))
        k, d, r = self.n_components, self.dim, self.rank_max
        expected = k + k * d + k * d * r
        if v.shape != (expected,):
            raise ValueError(f"packed vector must have length {expected}, got {v.shape}")
        if not (self.tau > 0):
            raise ValueError("tau must be positive")
        object.__setattr__(self, "values", v)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def replace_values(self, values: np.ndarray) -> "PackedTheta":
        return PackedTheta(values, self.n_components, self.dim, self.rank_max, self.tau)


@dataclass(frozen=True)
class SampleSet:
    """Immutable (N, d) matrix of observations.

    ``labels`` optionally records the generating component index per row;
    it is diagnostic metadata only and never used by estimators.
    """

    data: np.ndarray
    seed: Optional[int] = None
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        y = _readonly(np.atleast_2d(self.data))
        if y.shape[0] < 1:
            raise ValueError("sample set must contain at least one row")
        if not np.isfinite(y).all():
            raise ValueError("samples must be finite")
        object.__setattr__(self, "data", y)
        if self.labels is not None:
            lab = np.array(self.labels, dtype=int)
            lab.setflags(write=False)
            if lab.shape != (y.shape[0],):
                raise ValueError("labels must have one entry per row")
            object.__setattr__(self, "labels", lab)

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class GroundTruthSpec:
    """Recipe for a random ground-truth mixture.

    rank_mode : "identical" (all ranks equal rank_max) or "uniform-random"
        (per-component rank uniform on {1, ..., rank_max}).
    ranks : optional explicit per-component ranks, overriding rank_mode.
    weights : optional pinned mixing probabilities, overriding the random
        draw (used by benchmark configurations that fix them).
    Eigenvalues are drawn uniformly from [lambda_min, lambda_max]; with
    lambda_min well above one the covariance mass dominates the unit-norm
    centers, i.e. the low signal-to-noise regime.
    """

    n_components: int
    dim: int
    rank_max: int
    rank_mode: str = "identical"
    lambda_min: float = 25.0
    lambda_max: float = 100.0
    seed: int = 0
    weights: Optional[Sequence[float]] = None
    ranks: Optional[Sequence[int]] = None

    def __post_init__(self):
        if not (1 <= self.rank_max <= self.dim):
            raise ValueError("rank_max must satisfy 1 <= rank_max <= dim")
        if not (0 < self.lambda_min <= self.lambda_max):
            raise ValueError("need 0 < lambda_min <= lambda_max")
        if self.rank_mode not in ("identical", "uniform-random"):
            raise ValueError(f"unknown rank_mode {self.rank_mode!r}")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (self.n_components,) or np.any(w <= 0):
                raise ValueError("pinned weights must be positive, one per component")
            if abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("pinned weights must sum to one")
        if self.ranks is not None:
            r = np.asarray(self.ranks, dtype=int)
            if r.shape != (self.n_components,) or np.any(r < 1) or np.any(r > self.rank_max):
                raise ValueError("explicit ranks must lie in [1, rank_max]")


def sample_mixture(params: MixtureParams, n: int, seed: int) -> SampleSet:
    """Draw ``n`` i.i.d. rows: pick a component, then y = mu_h + V_h z.

    ``z`` is a standard normal vector of length R; zero factor columns
    contribute nothing. Deterministic for a fixed seed.
    """
    if n < 1:
        raise ValueError("cannot draw an empty sample (n must be >= 1)")
    rng = spawn_rng(seed, "sample")
    k = params.n_components
    h = rng.choice(k, size=n, p=params.weights)
    z = rng.standard_normal((n, params.rank_max))
    y = params.centers[h] + np.einsum("ndr,nr->nd", params.factors[h], z)
    return SampleSet(data=y, seed=seed, labels=h)


def _random_unit_vectors(rng: np.random.Generator, k: int, d: int) -> np.ndarray:
    x = rng.standard_normal((k, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _random_orthonormal(rng: np.random.Generator, d: int, r: int) -> np.ndarray:
    """Haar-distributed d x r orthonormal matrix (QR with sign-fixed diagonal)."""
    a = rng.standard_normal((d, r))
    q, rr = np.linalg.qr(a)
    signs = np.sign(np.diag(rr))
    signs[signs == 0] = 1.0
    return q * signs


def generate_ground_truth(spec: GroundTruthSpec) -> MixtureParams:
    """Random ground truth: normalized-uniform weights, unit-sphere centers,
    random orthonormal eigenvectors with eigenvalues in the configured range."""
    rng = spawn_rng(spec.seed, "truth")
    k, d, rmax = spec.n_components, spec.dim, spec.rank_max

    if spec.weights is not None:
        w = np.asarray(spec.weights, dtype=float)
    else:
        u = rng.uniform(0.0, 1.0, size=k)
        w = u / u.sum()

    centers = _random_unit_vectors(rng, k, d)

    if spec.ranks is not None:
        ranks = np.asarray(spec.ranks, dtype=int)
    elif spec.rank_mode == "identical":
        ranks = np.full(k, rmax, dtype=int)
    else:
        ranks = rng.integers(1, rmax + 1, size=k)

    factors = np.zeros((k, d, rmax))
    for j in range(k):
        r = int(ranks[j])
        lam = rng.uniform(spec.lambda_min, spec.lambda_max, size=r)
        u_j = _random_orthonormal(rng, d, r)
        factors[j, :, :r] = u_j * np.sqrt(lam)

    return MixtureParams(weights=w, centers=centers, factors=factors)


def default_initialization(
    n_components: int, dim: int, rank_max: int, seed: int
) -> MixtureParams:
    """Uniform weights, unit-sphere centers, orthonormal factors (Sigma = U U^T)."""
    if not (1 <= rank_max <= dim):
        raise ValueError("rank_max must satisfy 1 <= rank_max <= dim")
    rng = spawn_rng(seed, "init")
    w = np.full(n_components, 1.0 / n_components)
    centers = _random_unit_vectors(rng, n_components, dim)
    factors = np.stack(
        [_random_orthonormal(rng, dim, rank_max) for _ in range(n_components)]
    )
    return MixtureParams(weights=w, centers=centers, factors=factors)


def softmax_weights(logits: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """Max-shifted softmax with temperature; output sums to one exactly in
    exact arithmetic and is invariant to a common shift of the logits."""
    z = (np.asarray(logits, dtype=float) - np.max(logits)) / tau
    e = np.exp(z)
    return e / e.sum()


def pack(params: MixtureParams, tau: float = 1.0) -> PackedTheta:
    """Flatten params, mapping weights to logits ``tau * log(pi)`` so that
    ``unpack`` recovers them through the softmax."""
    if np.any(params.weights <= 0.0):
        raise ValueError("pack requires weights in the open simplex")
    logits = tau * np.log(params.weights)
    values = np.concatenate(
        [logits, params.centers.ravel(), params.factors.ravel()]
    )
    return PackedTheta(
        values, params.n_components, params.dim, params.rank_max, tau
    )


def unpack(theta: PackedTheta) -> MixtureParams:
    k, d, r = theta.n_components, theta.dim, theta.rank_max
    v = theta.values
    w = softmax_weights(v[:k], theta.tau)
    centers = v[k : k + k * d].reshape(k, d)
    factors = v[k + k * d :].reshape(k, d, r)
    return MixtureParams(weights=w, centers=centers, factors=factors)


def chain_simplex_gradient(
    grad_pi: np.ndarray, pi: np.ndarray, tau: float = 1.0
) -> np.ndarray:
    """Pull a gradient w.r.t. the weights back through the softmax.

    The softmax Jacobian is J_ab = pi_a (delta_ab - pi_b) / tau, so
    (J^T g)_b = pi_b (g_b - <g, pi>) / tau. A constant gradient maps to zero
    (the softmax is shift-invariant).
    """
    g = np.asarray(grad_pi, dtype=float)
    pi = np.asarray(pi, dtype=float)
    return pi * (g - float(g @ pi)) / tau
