"""Output channels of the matrix GLM and synthetic instance generation.

A channel maps a row of signal projections z = B^T x and an auxiliary row
(latent label / gate draw plus additive noise) to a scalar observation.
Channels also expose the observation log-likelihood log p(y | z), which the
Monte-Carlo denoisers and the grid oracle integrate against.

Noise convention: data generation always uses the exact noise level,
including 0. Densities are undefined at zero noise, so every likelihood
evaluation uses ``noise_floor`` as a lower bound on the standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .validation import check_vector, make_rng

NOISE_FLOOR = 1e-4

# Substream tags for instance generation.
_STREAM_X = 0
_STREAM_B = 1
_STREAM_PSI = 2
_STREAM_NOISE = 3
STREAM_INIT = 4
STREAM_SE = 5
STREAM_G_MC = 6


def _log_normal_pdf(x, scale):
    return -0.5 * (x / scale) ** 2 - np.log(scale) - 0.5 * np.log(2.0 * np.pi)


@dataclass(frozen=True)
class MixedLinearChannel:
    """y = z_c + noise, with the branch label c drawn from ``weights``.

    ``weights`` has one probability per signal; length 2 is the classic
    two-component mixture with weights (alpha, 1 - alpha). Length 1 reduces
    to standard linear regression.
    """

    weights: tuple
    noise: float = 0.0

    def __post_init__(self):
        w = tuple(float(a) for a in self.weights)
        if any(a < 0 for a in w):
            raise ValueError("mixture weights must be nonnegative")
        if abs(sum(w) - 1.0) > 1e-12:
            raise ValueError(f"mixture weights must sum to 1, got {sum(w)}")
        if self.noise < 0:
            raise ValueError("noise level must be nonnegative")
        object.__setattr__(self, "weights", w)

    @property
    def n_signals(self) -> int:
        return len(self.weights)

    @property
    def n_aux(self) -> int:
        return 2  # label, noise

    @property
    def noise_eff(self) -> float:
        return max(self.noise, NOISE_FLOOR)

    def aux_from_uniforms(self, u):
        u = np.atleast_2d(u)
        labels = np.searchsorted(np.cumsum(self.weights), u[:, 0]).astype(float)
        eps = norm.ppf(u[:, 1]) * self.noise
        return np.column_stack([labels, eps])

    def sample_aux(self, n, rng_psi, rng_noise):
        labels = np.searchsorted(np.cumsum(self.weights), rng_psi.random(n)).astype(float)
        eps = rng_noise.standard_normal(n) * self.noise
        return np.column_stack([labels, eps])

    def evaluate(self, theta, aux):
        theta = np.atleast_2d(theta)
        labels = aux[:, 0].astype(int)
        return theta[np.arange(theta.shape[0]), labels] + aux[:, 1]

    def labels(self, theta, aux):
        return aux[:, 0].astype(int)

    def log_likelihood(self, y, z):
        """log p(y | z): a Gaussian mixture over the branch label.

        ``z`` has shape (..., L); ``y`` broadcasts against z[..., 0].
        """
        z = np.asarray(z)
        y = np.asarray(y)
        comps = _log_normal_pdf(y[..., None] - z, self.noise_eff)
        with np.errstate(divide="ignore"):
            comps = comps + np.log(self.weights)
        return logsumexp_last(comps)


@dataclass(frozen=True)
class MaxAffineChannel:
    """y = max_l (z_l + intercept_l) + noise.

    Ties go to the highest branch index, matching the weak inequality used
    by the intercept update rule.
    """

    intercepts: tuple
    noise: float = 0.0

    def __post_init__(self):
        b = tuple(float(v) for v in self.intercepts)
        if self.noise < 0:
            raise ValueError("noise level must be nonnegative")
        object.__setattr__(self, "intercepts", b)

    @property
    def n_signals(self) -> int:
        return len(self.intercepts)

    @property
    def n_aux(self) -> int:
        return 1  # noise

    @property
    def noise_eff(self) -> float:
        return max(self.noise, NOISE_FLOOR)

    def aux_from_uniforms(self, u):
        u = np.atleast_2d(u)
        return norm.ppf(u[:, :1]) * self.noise

    def sample_aux(self, n, rng_psi, rng_noise):
        del rng_psi  # no latent beyond the noise
        return rng_noise.standard_normal((n, 1)) * self.noise

    def evaluate(self, theta, aux):
        shifted = np.atleast_2d(theta) + np.asarray(self.intercepts)
        return shifted.max(axis=1) + aux[:, 0]

    def labels(self, theta, aux):
        shifted = np.atleast_2d(theta) + np.asarray(self.intercepts)
        # argmax of the reversed row picks the largest index among ties
        return shifted.shape[1] - 1 - np.argmax(shifted[:, ::-1], axis=1)

    def log_likelihood(self, y, z):
        z = np.asarray(z)
        y = np.asarray(y)
        zmax = (z + np.asarray(self.intercepts)).max(axis=-1)
        return _log_normal_pdf(y - zmax, self.noise_eff)


@dataclass(frozen=True)
class MixtureOfExpertsChannel:
    """Two experts with a softmax gate: signals are (beta1, beta2, w1, w2).

    The gate probability of expert 1 is sigmoid(z3 - z4); a uniform draw
    psi <= gate selects expert 1 (closed on the left). The activation is
    the identity.
    """

    noise: float = 0.0

    def __post_init__(self):
        if self.noise < 0:
            raise ValueError("noise level must be nonnegative")

    @property
    def n_signals(self) -> int:
        return 4

    @property
    def n_aux(self) -> int:
        return 2  # gate draw, noise

    @property
    def noise_eff(self) -> float:
        return max(self.noise, NOISE_FLOOR)

    def aux_from_uniforms(self, u):
        u = np.atleast_2d(u)
        eps = norm.ppf(u[:, 1]) * self.noise
        return np.column_stack([u[:, 0], eps])

    def sample_aux(self, n, rng_psi, rng_noise):
        psi = rng_psi.random(n)
        eps = rng_noise.standard_normal(n) * self.noise
        return np.column_stack([psi, eps])

    def _gate(self, theta):
        # sigmoid(z3 - z4), computed stably
        d = theta[..., 2] - theta[..., 3]
        return 0.5 * (1.0 + np.tanh(0.5 * d))

    def evaluate(self, theta, aux):
        theta = np.atleast_2d(theta)
        use_first = aux[:, 0] <= self._gate(theta)
        return np.where(use_first, theta[:, 0], theta[:, 1]) + aux[:, 1]

    def labels(self, theta, aux):
        return np.where(aux[:, 0] <= self._gate(np.atleast_2d(theta)), 0, 1)

    def log_likelihood(self, y, z):
        z = np.asarray(z)
        y = np.asarray(y)
        d = z[..., 2] - z[..., 3]
        log_gate = -np.logaddexp(0.0, -d)
        log_gate_c = -np.logaddexp(0.0, d)
        c1 = log_gate + _log_normal_pdf(y - z[..., 0], self.noise_eff)
        c2 = log_gate_c + _log_normal_pdf(y - z[..., 1], self.noise_eff)
        return np.logaddexp(c1, c2)


def logsumexp_last(a):
    m = np.max(a, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, -1) + np.log(np.sum(np.exp(a - m), axis=-1))


def evaluate_row(channel, z, psi):
    """Scalar channel map on a single (z, psi) pair."""
    z = check_vector(z, "z", size=channel.n_signals)
    psi = check_vector(psi, "psi", size=channel.n_aux)
    return float(channel.evaluate(z[None, :], psi[None, :])[0])


@dataclass(frozen=True)
class Instance:
    """One synthetic problem, with ground truth kept for evaluation."""

    x: np.ndarray        # n x p design, entries N(0, 1/n)
    signals: np.ndarray  # p x L signal matrix
    aux: np.ndarray      # n x L_psi auxiliary rows
    y: np.ndarray        # n observations
    labels: np.ndarray   # per-row branch used at generation time
    delta: float
    seed: int
    channel: object = None

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


def generate_instance(channel, prior, n: int, p: int, seed: int) -> Instance:
    """Draw (X, B, aux, Y) for a channel/prior pair, reproducibly.

    Independent substreams for X, the signals, the latent part of the
    auxiliaries, and the additive noise are derived from the master seed,
    so the same seed always reproduces the instance bit for bit.
    """
    if n < 1 or p < 1:
        raise ValueError("n and p must be positive")
    if prior.n_signals != channel.n_signals:
        raise ValueError(
            f"prior has {prior.n_signals} signals but channel expects {channel.n_signals}"
        )
    x = make_rng(seed, _STREAM_X).standard_normal((n, p)) / np.sqrt(n)
    signals = prior.sample(p, make_rng(seed, _STREAM_B))
    aux = channel.sample_aux(n, make_rng(seed, _STREAM_PSI), make_rng(seed, _STREAM_NOISE))
    theta = x @ signals
    y = channel.evaluate(theta, aux)
    labels = channel.labels(theta, aux)
    return Instance(
        x=x, signals=signals, aux=aux, y=y, labels=labels, delta=n / p,
        seed=int(seed), channel=channel,
    )
