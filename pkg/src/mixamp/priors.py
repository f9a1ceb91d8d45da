"""Signal priors: the row distribution of the signal matrix.

Two families are supported. ``GaussianPrior`` draws each row from a joint
Gaussian with arbitrary mean and covariance; ``SparseDiscretePrior`` draws
each coordinate independently from the three-point law
(eps/2) at +1, (1 - eps) at 0, (eps/2) at -1.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .validation import check_psd, check_vector, gaussian_factor


@dataclass(frozen=True)
class GaussianPrior:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = check_vector(self.mean, "prior mean")
        cov = check_psd(self.cov, "prior covariance")
        if cov.shape[0] != mean.size:
            raise ValueError("prior mean and covariance sizes disagree")
        # a singular second moment is legitimate (perfectly correlated
        # signals); only an identically-zero signal is rejected
        if np.trace(cov + np.outer(mean, mean)) <= 0:
            raise ValueError("prior must have nonzero signal energy")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def n_signals(self) -> int:
        return self.mean.size

    def second_moment(self):
        return self.cov + np.outer(self.mean, self.mean)

    def sample(self, p: int, rng) -> np.ndarray:
        """p rows drawn i.i.d. from the prior."""
        factor = gaussian_factor(self.cov)
        return self.mean + rng.standard_normal((p, self.n_signals)) @ factor.T

    def sample_from_uniforms(self, u) -> np.ndarray:
        from scipy.stats import norm

        factor = gaussian_factor(self.cov)
        return self.mean + norm.ppf(u) @ factor.T


def correlated_pair_prior(rho: float) -> GaussianPrior:
    """Two unit-variance signals with correlation rho (the two-signal default)."""
    return GaussianPrior(mean=np.zeros(2), cov=np.array([[1.0, rho], [rho, 1.0]]))


@dataclass(frozen=True)
class SparseDiscretePrior:
    eps: float
    n_signals: int = 2

    def __post_init__(self):
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError(f"eps must be in [0, 1], got {self.eps}")
        if self.n_signals < 1:
            raise ValueError("need at least one signal")

    @property
    def mean(self):
        return np.zeros(self.n_signals)

    @property
    def cov(self):
        return self.eps * np.eye(self.n_signals)

    def second_moment(self):
        return self.eps * np.eye(self.n_signals)

    def support(self):
        """All 3^L support points of a row and their log prior weights.

        Zero-probability points (eps = 0 or 1) are dropped so downstream
        log-space mixture sums never see -inf weights.
        """
        points = np.array(list(itertools.product((-1.0, 0.0, 1.0), repeat=self.n_signals)))
        probs = np.array([self.eps / 2.0, 1.0 - self.eps, self.eps / 2.0])
        idx = (points + 1).astype(int)
        weights = np.prod(probs[idx], axis=1)
        keep = weights > 0
        return points[keep], np.log(weights[keep])

    def _coords_from_uniforms(self, u):
        out = np.zeros_like(u)
        out[u < self.eps / 2.0] = -1.0
        out[u > 1.0 - self.eps / 2.0] = 1.0
        return out

    def sample(self, p: int, rng) -> np.ndarray:
        return self._coords_from_uniforms(rng.random((p, self.n_signals)))

    def sample_from_uniforms(self, u) -> np.ndarray:
        return self._coords_from_uniforms(np.asarray(u))


def prior_moments(prior):
    """Exact (mean, covariance, second moment) triple of a prior."""
    return prior.mean, prior.cov, prior.second_moment()
