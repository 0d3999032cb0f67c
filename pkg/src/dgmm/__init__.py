"""Diagonally weighted method-of-moments estimation for low-rank Gaussian
mixtures, with tensor-free moment computations and Nystrom-accelerated
kernel sums."""

from .estimator import (
    METHODS,
    EstimationTrace,
    EstimatorConfig,
    dgmm_objective_gradient,
    dgmm_weights,
    direct_diag_weights_from_S,
    gmm_full_weights,
    lbfgs_minimize,
    run_estimation,
)
from .experiments import (
    ExperimentConfig,
    ExperimentResult,
    benchmark_scaling,
    export_scatter,
    run_experiment,
)
from .kernels import (
    KernelSumCache,
    exact_kernel_sums,
    gram_rank,
    kmeanspp_landmarks,
    nystrom_kernel_sums,
    rp_cholesky,
)
from .metrics import align_components, error_metrics
from .model import (
    GroundTruthSpec,
    MixtureParams,
    PackedTheta,
    SampleSet,
    chain_simplex_gradient,
    default_initialization,
    generate_ground_truth,
    pack,
    sample_mixture,
    unpack,
)
from .moments import (
    CumulantTable,
    bell_complete,
    bell_two_arg,
    moment_norm_sq,
    moment_norm_sq_gradients,
    moment_sample_inner,
    moment_sample_inner_gradients,
    pairwise_cumulants,
)
from .tensors import (
    DenseTensor,
    moment_function_g,
    outer_power,
    population_moment_tensor,
    sample_moment_tensor,
    sym,
    tensor_inner,
    tensor_norm,
)

__version__ = "0.1.0"
