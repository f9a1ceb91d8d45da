"""Deterministic state-evolution recursion predicting the AMP iterate law.

The recursion tracks the joint second-moment matrix of (signal projection,
estimate projection) together with the alignment/noise pair (mu_b, tau_b)
describing the signal-side iterate: in the wide limit the rows of the
iterate behave like mu_b @ b + noise, noise ~ N(0, tau_b).

Expectations are evaluated with scrambled-Sobol quasi Monte Carlo on
seeded substreams, except where the Gaussian prior and an affine denoiser
give closed forms (then the update is exact given the channel expectation).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .channels import STREAM_SE, MixedLinearChannel
from .denoisers import (
    GaussianPosteriorDenoiser,
    LinearDenoiser,
    MixturePosteriorScore,
    MonteCarloScore,
    SoftThresholdDenoiser,
)
from .priors import GaussianPrior
from .validation import (
    clip_psd,
    gaussian_factor,
    pinv_or_inv,
    ridge_inverse,
    sobol_uniforms,
    symmetrize,
)

DEFAULT_SAMPLES = 100_000
# Outer sample count when the score itself needs per-row Monte Carlo.
DEFAULT_SAMPLES_MC_CHANNEL = 8_192


@dataclass(frozen=True)
class SeState:
    k: int
    delta: float
    sigma: np.ndarray           # 2L x 2L joint second-moment matrix
    mu_b: np.ndarray | None     # L x L alignment (None before iteration 1)
    tau_b: np.ndarray | None    # L x L iterate noise covariance


def initial_se_state(prior, delta: float) -> SeState:
    from .amp import moment_sigma

    return SeState(k=0, delta=float(delta), sigma=moment_sigma(prior, delta),
                   mu_b=None, tau_b=None)


def theta_params(sigma, n_signals: int):
    """Alignment and noise covariance of the observation-side iterate.

    Standard Gaussian conditioning of the estimate block on the signal
    block; the noise covariance is the Schur complement, hence PSD.
    """
    s11 = sigma[:n_signals, :n_signals]
    s21 = sigma[n_signals:, :n_signals]
    s12 = sigma[:n_signals, n_signals:]
    s22 = sigma[n_signals:, n_signals:]
    if np.linalg.cond(s11) > 1e14:
        raise ValueError("signal block of the joint covariance is singular")
    s11_inv = np.linalg.inv(s11)
    mu_theta = s21 @ s11_inv
    tau_theta = symmetrize(s22 - s21 @ s11_inv @ s12)
    return mu_theta, tau_theta


def effective_noise(mu, tau):
    """Covariance of the noise on the alignment-corrected iterate.

    Uses the pseudoinverse when the alignment matrix is singular.
    """
    mu_inv = pinv_or_inv(mu)
    return symmetrize(mu_inv @ tau @ mu_inv.T)


def _split_normal(uniforms, cov):
    factor = gaussian_factor(cov)
    return norm.ppf(uniforms) @ factor.T


def _score_for(sigma, channel, weights_assumed, mc_inner, seed, k):
    if isinstance(channel, MixedLinearChannel):
        weights = channel.weights if weights_assumed is None else tuple(weights_assumed)
        return MixturePosteriorScore(sigma, weights, channel.noise_eff)
    return MonteCarloScore(sigma, channel, mc_inner, seed, iteration=k)


def _channel_moments(state, channel, mc_samples, seed, weights_assumed,
                     mc_inner, optimal_score):
    """One pass over the channel expectation: (mu_next, tau_next).

    tau is the score's second moment. Under the optimal score the alignment
    equals it; otherwise the alignment comes from the joint-Gaussian Stein
    identity applied to the sampled (signal, estimate, score) triple.
    """
    n_sig = channel.n_signals
    n_aux = channel.n_aux
    u = sobol_uniforms(int(mc_samples), 2 * n_sig + n_aux, seed, STREAM_SE, state.k, 0)
    zzk = _split_normal(u[:, : 2 * n_sig], state.sigma)
    z, zk = zzk[:, :n_sig], zzk[:, n_sig:]
    aux = channel.aux_from_uniforms(u[:, 2 * n_sig:])
    y = channel.evaluate(z, aux)
    score = _score_for(state.sigma, channel, weights_assumed, mc_inner, seed, state.k)
    g = score.apply(zk, y)
    m = g.shape[0]
    tau_next = symmetrize(g.T @ g / m)
    if optimal_score:
        # same information bound as the iteration applies to its estimates
        from .amp import cap_below

        tau_next = cap_below(tau_next, symmetrize(score.cond_cov_inv), margin=0.0)
        mu_next = tau_next
    else:
        joint = zzk.T @ g / m                      # E[(Z, Z^k) g^T], (2L x L)
        stacked = ridge_inverse(state.sigma) @ joint
        mu_next = stacked[:n_sig, :].T             # E[d g / d Z]
    return mu_next, tau_next


def _affine_coefficients(f):
    """(A, c) with f(s) = A s + c for the affine denoiser families."""
    if isinstance(f, GaussianPosteriorDenoiser):
        return f.gain, f.offset
    if isinstance(f, LinearDenoiser):
        return f.weight, np.zeros(f.weight.shape[0])
    return None


def _sigma_blocks_affine(f, prior, mu_law, tau):
    """Exact E[b f^T] and E[f f^T] for a Gaussian prior and affine denoiser."""
    a, c = _affine_coefficients(f)
    m = prior.mean
    s_mean = mu_law @ m
    s_cov = mu_law @ prior.cov @ mu_law.T + tau
    f_mean = a @ s_mean + c
    eff = a @ s_cov @ a.T + np.outer(f_mean, f_mean)
    ebf = np.outer(m, f_mean) + prior.cov @ mu_law.T @ a.T
    return ebf, symmetrize(eff)


def _sigma_blocks_mc(f, prior, mu_law, tau, mc_samples, seed, k, tower_rule):
    n_sig = prior.n_signals
    u = sobol_uniforms(int(mc_samples), 2 * n_sig, seed, STREAM_SE, k, 1)
    b = prior.sample_from_uniforms(u[:, :n_sig])
    g_noise = _split_normal(u[:, n_sig:], tau)
    s = b @ mu_law.T + g_noise
    fs = f.apply(s)
    m = fs.shape[0]
    eff = symmetrize(fs.T @ fs / m)
    ebf = eff if tower_rule else b.T @ fs / m
    return ebf, eff


def se_step(state, prior, channel, f_builder=None, denoiser="bayes", zeta=None,
            mc_samples=None, seed=0, weights_assumed=None, mc_inner=1000):
    """Advance the recursion one iteration.

    ``f_builder(mu, tau)`` overrides the signal denoiser (used for
    denoiser-comparison studies); otherwise ``denoiser`` selects the same
    families the iteration itself uses. ``weights_assumed`` mirrors a run
    whose score assumes wrong mixture weights; the alignment then comes
    from the Stein identity instead of the optimal-score shortcut.
    """
    if mc_samples is None:
        mc_samples = (DEFAULT_SAMPLES if isinstance(channel, MixedLinearChannel)
                      else DEFAULT_SAMPLES_MC_CHANNEL)
    optimal_score = weights_assumed is None
    mu_next, tau_next = _channel_moments(state, channel, mc_samples, seed,
                                         weights_assumed, mc_inner, optimal_score)
    # The iteration plugs its score Gram matrix in for both context matrices,
    # which converges to tau; under the optimal score mu equals tau anyway.
    if f_builder is not None:
        f = f_builder(tau_next, tau_next)
    else:
        from .denoisers import make_signal_denoiser

        f = make_signal_denoiser(denoiser, prior, tau_next, tau_next, zeta=zeta)

    n_sig = prior.n_signals
    delta = state.delta
    if isinstance(prior, GaussianPrior) and _affine_coefficients(f) is not None:
        ebf, eff = _sigma_blocks_affine(f, prior, mu_next, tau_next)
    else:
        tower = not isinstance(f, (SoftThresholdDenoiser, LinearDenoiser))
        ebf, eff = _sigma_blocks_mc(f, prior, mu_next, tau_next, mc_samples,
                                    seed, state.k, tower_rule=tower)
    posterior_mean_f = f_builder is None and denoiser == "bayes"
    s11 = state.sigma[:n_sig, :n_sig]
    s22 = eff / delta
    if posterior_mean_f:
        from .amp import cap_below

        s22 = cap_below(s22, s11)
        s12 = s22
    else:
        s12 = ebf / delta
    sigma = np.zeros_like(state.sigma)
    sigma[:n_sig, :n_sig] = s11
    sigma[:n_sig, n_sig:] = s12
    sigma[n_sig:, :n_sig] = s12.T
    sigma[n_sig:, n_sig:] = s22
    if not posterior_mean_f:
        # mixed exact/sampled blocks can drift slightly indefinite
        from .amp import project_joint_psd

        sigma = project_joint_psd(symmetrize(sigma), s11)
        sigma = clip_psd(sigma, tol=-1e-6)
    # the posterior-mean path is PSD by construction (the estimate block is
    # capped below the signal block) and keeps its two blocks bit-identical
    return SeState(k=state.k + 1, delta=state.delta, sigma=sigma,
                   mu_b=mu_next, tau_b=tau_next)


def initial_metrics(prior):
    """Metrics of an estimate drawn from the prior, independent of the signal."""
    m = prior.mean
    m2 = np.diag(prior.second_moment())
    var = m2 - m**2
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(m2 > 0, (m**2) ** 2 / m2**2, 0.0)
    mse = 2.0 * var
    return corr, mse, m2 > 0


def predict_metrics(state, prior, f_builder=None, denoiser="bayes", zeta=None,
                    mc_samples=DEFAULT_SAMPLES, seed=0):
    """Per-signal (correlation^2, mse) predictions at the state's iteration.

    Requires at least one completed step. A denoiser component with zero
    second moment leaves the correlation undefined; it is reported as 0
    with its flag cleared.
    """
    if state.mu_b is None:
        raise ValueError("predictions need a state at iteration >= 1")
    if f_builder is not None:
        f = f_builder(state.tau_b, state.tau_b)
    else:
        from .denoisers import make_signal_denoiser

        f = make_signal_denoiser(denoiser, prior, state.tau_b, state.tau_b, zeta=zeta)
    n_sig = prior.n_signals
    m2 = np.diag(prior.second_moment())
    if isinstance(prior, GaussianPrior) and _affine_coefficients(f) is not None:
        a, c = _affine_coefficients(f)
        s_mean = state.mu_b @ prior.mean
        s_cov = state.mu_b @ prior.cov @ state.mu_b.T + state.tau_b
        f_mean = a @ s_mean + c
        e_bf = np.diag(np.outer(prior.mean, f_mean) + prior.cov @ state.mu_b.T @ a.T)
        e_ff = np.diag(a @ s_cov @ a.T) + f_mean**2
        mse = m2 - 2.0 * e_bf + e_ff
    else:
        u = sobol_uniforms(int(mc_samples), 2 * n_sig, seed, STREAM_SE, state.k, 2)
        b = prior.sample_from_uniforms(u[:, :n_sig])
        s = b @ state.mu_b.T + _split_normal(u[:, n_sig:], state.tau_b)
        fs = f.apply(s)
        e_bf = np.mean(b * fs, axis=0)
        e_ff = np.mean(fs**2, axis=0)
        mse = np.mean((b - fs) ** 2, axis=0)
    den = e_ff * m2
    ok = den > 1e-300
    corr = np.zeros(n_sig)
    corr[ok] = e_bf[ok] ** 2 / den[ok]
    return corr, np.asarray(mse), ok


@dataclass
class SeRun:
    states: list
    corr: np.ndarray      # (iterations+1) x L
    mse: np.ndarray
    corr_ok: np.ndarray


def run_se(prior, channel, delta, iterations=10, denoiser="bayes", zeta=None,
           mc_samples=None, seed=0, weights_assumed=None, mc_inner=1000,
           f_builder=None):
    """Run the recursion and collect per-iteration metric predictions."""
    state = initial_se_state(prior, delta)
    states = [state]
    corr0, mse0, ok0 = initial_metrics(prior)
    corr, mse, ok = [corr0], [mse0], [ok0]
    metric_samples = mc_samples if mc_samples is not None else DEFAULT_SAMPLES
    for _ in range(iterations):
        state = se_step(state, prior, channel, f_builder=f_builder,
                        denoiser=denoiser, zeta=zeta, mc_samples=mc_samples,
                        seed=seed, weights_assumed=weights_assumed,
                        mc_inner=mc_inner)
        states.append(state)
        c, m, o = predict_metrics(state, prior, f_builder=f_builder,
                                  denoiser=denoiser, zeta=zeta,
                                  mc_samples=metric_samples, seed=seed)
        corr.append(c)
        mse.append(m)
        ok.append(o)
    return SeRun(states=states, corr=np.array(corr), mse=np.array(mse),
                 corr_ok=np.array(ok))
