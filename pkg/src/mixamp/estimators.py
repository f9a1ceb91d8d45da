"""Scikit-learn style estimators wrapping the iterative solvers.

``MatrixGlmAmp`` fits the multi-signal matrix from (X, y) for any of the
supported channels; ``MaxAffineEmAmp`` additionally estimates the two
max-affine intercepts. Both follow the standard conventions (constructor
stores hyperparameters verbatim, ``fit`` returns self, fitted attributes
carry trailing underscores) so they compose with pipelines, ``clone`` and
``get_params``/``set_params``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .amp import run_amp
from .channels import (
    Instance,
    MaxAffineChannel,
    MixedLinearChannel,
    MixtureOfExpertsChannel,
)
from .em import run_em_amp
from .validation import check_matrix, check_vector


def _as_instance(x, y, channel, reference_signals=None):
    x = check_matrix(x, "X")
    y = check_vector(np.asarray(y, dtype=float).ravel(), "y", size=x.shape[0])
    n, p = x.shape
    signals = (np.zeros((p, channel.n_signals)) if reference_signals is None
               else reference_signals)
    return Instance(x=x, signals=signals, aux=np.zeros((n, channel.n_aux)),
                    y=y, labels=np.zeros(n, dtype=int), delta=n / p, seed=0,
                    channel=channel)


class MatrixGlmAmp(BaseEstimator):
    """Signal-matrix estimation for a multi-signal generalized linear model.

    Parameters
    ----------
    channel : channel object describing how y is generated from B^T x.
    prior : signal prior (``GaussianPrior`` or ``SparseDiscretePrior``).
    denoiser : "bayes" or "soft-threshold".
    zeta : threshold multiplier for the soft-threshold denoiser.
    iterations : number of iterations.
    mc_samples : per-row Monte-Carlo budget for channels without a closed
        form score.
    weights_assumed : mixture weights the score should assume, when they
        differ from the channel's true weights.
    random_state : master seed for all internal randomness.
    """

    def __init__(self, channel=None, prior=None, denoiser="bayes", zeta=1.1402,
                 iterations=10, mc_samples=1000, weights_assumed=None,
                 random_state=0):
        self.channel = channel
        self.prior = prior
        self.denoiser = denoiser
        self.zeta = zeta
        self.iterations = iterations
        self.mc_samples = mc_samples
        self.weights_assumed = weights_assumed
        self.random_state = random_state

    def fit(self, X, y):
        if self.channel is None or self.prior is None:
            raise ValueError("channel and prior must be provided")
        inst = _as_instance(X, y, self.channel)
        run = run_amp(
            inst, self.prior, self.channel,
            denoiser=self.denoiser,
            iterations=self.iterations,
            seed=self.random_state if self.random_state is not None else 0,
            zeta=self.zeta,
            mc_samples=self.mc_samples,
            weights_assumed=self.weights_assumed,
        )
        self.signals_ = run.state.b_hat
        self.state_ = run.state
        self.n_iter_ = self.iterations
        self.diagnostics_ = run.diagnostics
        return self

    def _check_fitted(self):
        if not hasattr(self, "signals_"):
            raise NotFittedError("call fit before using this estimator")

    def projections(self, X):
        """X @ B_hat: one column of fitted responses per signal."""
        self._check_fitted()
        return check_matrix(X, "X", shape=(None, self.signals_.shape[0])) @ self.signals_

    def predict(self, X):
        """Plug-in conditional mean of y given x under the fitted model."""
        self._check_fitted()
        theta = self.projections(X)
        ch = self.channel
        if isinstance(ch, MixedLinearChannel):
            return theta @ np.asarray(ch.weights)
        if isinstance(ch, MaxAffineChannel):
            return (theta + np.asarray(ch.intercepts)).max(axis=1)
        if isinstance(ch, MixtureOfExpertsChannel):
            gate = 1.0 / (1.0 + np.exp(theta[:, 3] - theta[:, 2]))
            return gate * theta[:, 0] + (1.0 - gate) * theta[:, 1]
        raise ValueError(f"no prediction rule for channel {type(ch).__name__}")

    def predict_labels(self, X, y):
        """Most plausible branch per row: the one with least squared residual."""
        self._check_fitted()
        theta = self.projections(X)
        if isinstance(self.channel, MaxAffineChannel):
            theta = theta + np.asarray(self.channel.intercepts)
        resid = (np.asarray(y, dtype=float)[:, None] - theta) ** 2
        return np.argmin(resid, axis=1)


class MaxAffineEmAmp(BaseEstimator):
    """Joint signal and intercept estimation for two-branch max-affine data."""

    def __init__(self, prior=None, noise=0.1, outer_iterations=5,
                 inner_iterations=5, mc_samples=1000, ez_samples=4000,
                 random_state=0):
        self.prior = prior
        self.noise = noise
        self.outer_iterations = outer_iterations
        self.inner_iterations = inner_iterations
        self.mc_samples = mc_samples
        self.ez_samples = ez_samples
        self.random_state = random_state

    def fit(self, X, y):
        if self.prior is None:
            raise ValueError("prior must be provided")
        channel = MaxAffineChannel((0.0, 0.0), self.noise)
        inst = _as_instance(X, y, channel)
        run = run_em_amp(
            inst, self.prior, self.noise,
            m_max=self.outer_iterations,
            k_max=self.inner_iterations,
            mc_samples=self.mc_samples,
            ez_samples=self.ez_samples,
            seed=self.random_state if self.random_state is not None else 0,
        )
        self.signals_ = run.state.b_hat
        self.intercepts_ = run.state.intercepts
        self.intercept_trace_ = run.intercept_trace
        self.diagnostics_ = run.diagnostics
        return self

    def predict(self, X):
        if not hasattr(self, "signals_"):
            raise NotFittedError("call fit before using this estimator")
        x = check_matrix(X, "X", shape=(None, self.signals_.shape[0]))
        return (x @ self.signals_ + self.intercepts_).max(axis=1)
