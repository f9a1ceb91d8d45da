"""Approximate message passing for mixed regression models.

Estimation of multiple signal vectors from generalized-linear observations
(mixed linear regression, max-affine regression, mixture-of-experts), with
deterministic state-evolution predictions of the iterate law, Bayes-optimal
and soft-threshold denoisers, an expectation-maximization loop for unknown
max-affine intercepts, and a config-driven experiment runner.
"""

__version__ = "0.1.0"

from .amp import AmpRun, AmpState, amp_step, initial_state, run_amp
from .channels import (
    Instance,
    MaxAffineChannel,
    MixedLinearChannel,
    MixtureOfExpertsChannel,
    evaluate_row,
    generate_instance,
)
from .denoisers import (
    Diagnostics,
    GaussianPosteriorDenoiser,
    LinearDenoiser,
    MixturePosteriorScore,
    MonteCarloScore,
    SoftThresholdDenoiser,
    SparseDiscreteDenoiser,
    conditional_mean_given_y,
    make_signal_denoiser,
)
from .em import EmAmpRun, em_update, run_em_amp, run_oracle_amp
from .estimators import MatrixGlmAmp, MaxAffineEmAmp
from .priors import GaussianPrior, SparseDiscretePrior, correlated_pair_prior, prior_moments
from .state_evolution import (
    SeRun,
    SeState,
    effective_noise,
    initial_se_state,
    predict_metrics,
    run_se,
    se_step,
    theta_params,
)
from .validation import DivergedRunError, NumericalFailureError

__all__ = [
    "AmpRun", "AmpState", "amp_step", "initial_state", "run_amp",
    "Instance", "MaxAffineChannel", "MixedLinearChannel",
    "MixtureOfExpertsChannel", "evaluate_row", "generate_instance",
    "Diagnostics", "GaussianPosteriorDenoiser", "LinearDenoiser",
    "MixturePosteriorScore", "MonteCarloScore", "SoftThresholdDenoiser",
    "SparseDiscreteDenoiser", "conditional_mean_given_y", "make_signal_denoiser",
    "EmAmpRun", "em_update", "run_em_amp", "run_oracle_amp",
    "MatrixGlmAmp", "MaxAffineEmAmp",
    "GaussianPrior", "SparseDiscretePrior", "correlated_pair_prior", "prior_moments",
    "SeRun", "SeState", "effective_noise", "initial_se_state", "predict_metrics",
    "run_se", "se_step", "theta_params",
    "DivergedRunError", "NumericalFailureError",
    "__version__",
]
