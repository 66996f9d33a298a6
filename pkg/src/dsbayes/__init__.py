"""Matrix-free Bayesian linear inversion with quotient-space Golub-Kahan bidiagonalization.

The posterior of ``y = G x + η``, ``x ~ N(0, λ^{-1}Σ)``, ``η ~ N(0, Γ)`` is
approximated in a data-informed Krylov subspace while ``λ`` is estimated by
empirical Bayes at every step.  Computable bounds certify the
approximation.
"""

from .diagnostics import (
    BoundTrace,
    TraceSeeds,
    bound_trace,
    forstner_distance,
    kl_gaussian,
    mstd,
    resolvent_difference_bound_check,
    trace_seeds,
)
from .inference import (
    DiagnosticsTrace,
    EbRecord,
    EbTrace,
    InferenceConfig,
    LambdaEstimate,
    PosteriorApproximation,
    RitzPair,
    estimate_lambda,
    marginal_nll,
    projected_solution,
    ritz_pairs,
    run_inference,
)
from .operators import GramMap, LinearMap, SpdMap, circulant_apply, kronecker_apply, weighted_inner, weighted_norm
from .priors import (
    KernelSpec,
    PriorCovariance,
    circulant_covariance,
    dense_covariance,
    kernel_eval,
    separable_covariance,
    uniform_grid,
)
from .oracle import (
    DenseProblem,
    exact_marginal_nll,
    exact_posterior,
    generalized_eig,
    lis_posterior,
    posterior_gap,
    sqrt_form,
)
from .problems import (
    PRESET_SEEDS,
    PRESETS,
    ProblemInstance,
    build_problem,
    deblur2d,
    deblur_problem,
    dense_problem,
    fredholm1d,
    fredholm_problem,
    make_data,
    make_rng,
    sample_prior,
)
from .qgkb import BidiagonalMatrix, QgkbState, bidiagonal, qgkb_init, qgkb_step

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
