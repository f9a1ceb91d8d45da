"""Row-wise denoising functions for the AMP iteration.

Signal-side denoisers map a noisy iterate row s (distributed like
M b + G with G ~ N(0, T)) to an estimate of the signal row b. Each one
exposes the map itself, its analytic Jacobian with respect to s, and the
row-averaged Jacobian used for the memory-term coefficient.

Observation-side denoisers ("scores") map (u, y) to
Cov[Z|Z^k=u]^{-1} (E[Z | Z^k=u, Y=y] - E[Z | Z^k=u]) under the joint
Gaussian law N(0, sigma_joint) of (Z, Z^k). The mixture channel admits a
closed form; max-affine and mixture-of-experts use per-row Monte Carlo.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channels import STREAM_G_MC, logsumexp_last
from .validation import (
    check_matrix,
    conditional_gaussian,
    gaussian_factor,
    make_rng,
    mvn_logpdf,
    pinv_or_inv,
    ridge_inverse,
    symmetrize,
)


@dataclass
class Diagnostics:
    """Counters surfaced in run results."""

    ridge_activations: int = 0
    flagged_rows: int = 0
    rejected_runs: int = 0


def _softmax_last(logw):
    m = np.max(logw, axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    w = np.exp(logw - m)
    with np.errstate(invalid="ignore", divide="ignore"):
        return w / np.sum(w, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# signal-side denoisers
# ---------------------------------------------------------------------------


class GaussianPosteriorDenoiser:
    """Posterior mean of a Gaussian signal row: an affine shrinkage map."""

    def __init__(self, prior, mu, tau, diagnostics=None):
        self.prior = prior
        self.mu = check_matrix(mu, "mu", ndim=2)
        self.tau = check_matrix(tau, "tau", ndim=2)
        inner = self.mu @ prior.cov @ self.mu.T + self.tau
        inner_inv = ridge_inverse(symmetrize(inner), diagnostics)
        self.gain = prior.cov @ self.mu.T @ inner_inv
        self.offset = prior.mean - self.gain @ (self.mu @ prior.mean)

    def apply(self, s):
        return self.offset + s @ self.gain.T

    def apply_one(self, s):
        return self.apply(np.atleast_2d(s))[0]

    def jacobian(self, s):
        del s  # affine map
        return self.gain

    def average_jacobian(self, s_rows):
        del s_rows
        return self.gain

    def cross_moment(self, s_rows, denoised_rows, prior):
        # posterior mean: E[b f^T] = E[f f^T] by the tower rule
        del s_rows, denoised_rows, prior
        return None


class SparseDiscreteDenoiser:
    """Posterior mean under the three-point coordinate prior.

    The posterior is a weighted sum over the 3^L support points; weights are
    formed in log space so small tau never underflows to 0/0.
    """

    def __init__(self, prior, mu, tau, diagnostics=None):
        self.prior = prior
        self.mu = check_matrix(mu, "mu", ndim=2)
        self.tau = check_matrix(tau, "tau", ndim=2)
        self.points, self.log_weights = prior.support()
        self.tau_inv = ridge_inverse(symmetrize(self.tau), diagnostics)
        self.means = self.points @ self.mu.T  # (K, L)

    def _posterior(self, s_rows):
        diff = s_rows[:, None, :] - self.means[None, :, :]      # (p, K, L)
        sol = diff @ self.tau_inv                                # (p, K, L)
        logp = self.log_weights - 0.5 * np.sum(diff * sol, axis=-1)
        return _softmax_last(logp), -sol                         # weights, grad of log-lik

    def apply(self, s_rows):
        s_rows = np.atleast_2d(s_rows)
        w, _ = self._posterior(s_rows)
        return w @ self.points

    def apply_one(self, s):
        return self.apply(np.atleast_2d(s))[0]

    def jacobian(self, s):
        s = np.atleast_2d(s)
        w, v = self._posterior(s)
        f = w @ self.points
        jac = np.einsum("pk,kl,pkm->plm", w, self.points, v)
        vbar = np.einsum("pk,pkm->pm", w, v)
        jac -= f[:, :, None] * vbar[:, None, :]
        return jac[0]

    def average_jacobian(self, s_rows):
        s_rows = np.atleast_2d(s_rows)
        w, v = self._posterior(s_rows)
        f = w @ self.points
        p = s_rows.shape[0]
        jac = np.einsum("pk,kl,pkm->lm", w, self.points, v) / p
        vbar = np.einsum("pk,pkm->pm", w, v)
        jac -= f.T @ vbar / p
        return jac

    def cross_moment(self, s_rows, denoised_rows, prior):
        del s_rows, denoised_rows, prior
        return None


class SoftThresholdDenoiser:
    """Coordinatewise soft thresholding of the rescaled iterate.

    Each coordinate of M^{-1} s is thresholded at zeta times the standard
    deviation of its effective noise.
    """

    def __init__(self, mu, tau, zeta, diagnostics=None):
        if zeta <= 0:
            raise ValueError("zeta must be positive")
        self.mu = check_matrix(mu, "mu", ndim=2)
        self.tau = check_matrix(tau, "tau", ndim=2)
        self.zeta = float(zeta)
        self.mu_inv = pinv_or_inv(self.mu)
        self.noise_cov = self.mu_inv @ self.tau @ self.mu_inv.T
        self.thresholds = self.zeta * np.sqrt(np.clip(np.diag(self.noise_cov), 0.0, None))

    def _rescale(self, s_rows):
        return s_rows @ self.mu_inv.T

    def apply(self, s_rows):
        r = self._rescale(np.atleast_2d(s_rows))
        return np.sign(r) * np.maximum(np.abs(r) - self.thresholds, 0.0)

    def apply_one(self, s):
        return self.apply(np.atleast_2d(s))[0]

    def active_mask(self, s_rows):
        r = self._rescale(np.atleast_2d(s_rows))
        return np.abs(r) > self.thresholds

    def jacobian(self, s):
        mask = self.active_mask(np.atleast_2d(s))[0]
        return mask[:, None] * self.mu_inv

    def average_jacobian(self, s_rows):
        frac = self.active_mask(s_rows).mean(axis=0)
        return frac[:, None] * self.mu_inv

    def cross_moment(self, s_rows, denoised_rows, prior):
        """Signal/estimate cross moment: sparsity weight times exceedance rate.

        Per-coordinate, each row contributes the prior weight of a nonzero
        coordinate when its rescaled iterate clears the threshold, zero
        otherwise; off-diagonal entries are set to zero. For priors without
        a sparsity weight, falls back to the measurable Stein form
        M^{-1} (E[s f^T] - T E[f']^T).
        """
        eps = getattr(prior, "eps", None)
        if eps is None:
            s_rows = np.atleast_2d(s_rows)
            p = s_rows.shape[0]
            corr = s_rows.T @ denoised_rows / p
            avg_jac = self.average_jacobian(s_rows)
            return self.mu_inv @ (corr - self.tau @ avg_jac.T)
        return np.diag(eps * self.exceedance_fraction(s_rows))

    def exceedance_fraction(self, s_rows):
        """Per-coordinate fraction of rows beyond the threshold."""
        return self.active_mask(s_rows).mean(axis=0)


class LinearDenoiser:
    """f(s) = W s; used for mismatched-denoiser comparisons and tests."""

    def __init__(self, weight):
        self.weight = check_matrix(weight, "weight", ndim=2)

    def apply(self, s_rows):
        return np.atleast_2d(s_rows) @ self.weight.T

    def apply_one(self, s):
        return self.apply(np.atleast_2d(s))[0]

    def jacobian(self, s):
        del s
        return self.weight

    def average_jacobian(self, s_rows):
        del s_rows
        return self.weight

    def cross_moment(self, s_rows, denoised_rows, prior):
        del s_rows, denoised_rows, prior
        return None


# ---------------------------------------------------------------------------
# observation-side denoisers
# ---------------------------------------------------------------------------


class MixturePosteriorScore:
    """Closed-form optimal score for the linear mixture channel.

    Conditioned on the branch label, (Z, Z^k, Y) is jointly Gaussian, so
    E[Z | Z^k, Y] is a label-posterior mixture of linear regressions. Works
    for any number of branches, including one (plain linear regression).
    """

    def __init__(self, sigma_joint, weights, noise_eff, diagnostics=None):
        weights = np.asarray(weights, dtype=float)
        n_sig = weights.size
        sig = check_matrix(sigma_joint, "sigma_joint", ndim=2)
        self.n_signals = n_sig
        self.diagnostics = diagnostics
        self.cond_op, self.cond_cov = conditional_gaussian(sig, n_sig, diagnostics)
        self.cond_cov_inv = pinv_or_inv(self.cond_cov)
        with np.errstate(divide="ignore"):
            self.log_prior = np.log(weights)
        self.branch_ops = []
        self.branch_covs = []
        for l in range(n_sig):
            cov_zw = np.column_stack([sig[:n_sig, n_sig:], sig[:n_sig, l]])
            cov_ww = np.zeros((n_sig + 1, n_sig + 1))
            cov_ww[:n_sig, :n_sig] = sig[n_sig:, n_sig:]
            cov_ww[:n_sig, n_sig] = sig[n_sig:, l]
            cov_ww[n_sig, :n_sig] = sig[l, n_sig:]
            cov_ww[n_sig, n_sig] = sig[l, l] + noise_eff**2
            self.branch_ops.append(cov_zw @ ridge_inverse(symmetrize(cov_ww), diagnostics))
            self.branch_covs.append(symmetrize(cov_ww))

    def posterior_weights(self, u_rows, y):
        w = np.column_stack([np.atleast_2d(u_rows), np.asarray(y, dtype=float)])
        logp = np.stack(
            [self.log_prior[l] + mvn_logpdf(w, self.branch_covs[l], self.diagnostics)
             for l in range(self.n_signals)],
            axis=-1,
        )
        return _softmax_last(logp)

    def conditional_mean(self, u_rows, y):
        """E[Z | Z^k = u, Y = y], one row per input row."""
        u_rows = np.atleast_2d(u_rows)
        w = np.column_stack([u_rows, np.asarray(y, dtype=float)])
        weights = self.posterior_weights(u_rows, y)
        out = np.zeros_like(u_rows)
        for l in range(self.n_signals):
            out += weights[:, l:l + 1] * (w @ self.branch_ops[l].T)
        return out

    def apply(self, u_rows, y):
        u_rows = np.atleast_2d(u_rows)
        resid = self.conditional_mean(u_rows, y) - u_rows @ self.cond_op.T
        return resid @ self.cond_cov_inv

    def apply_one(self, u, y):
        return self.apply(np.atleast_2d(u), np.atleast_1d(float(y)))[0]


class MonteCarloScore:
    """Optimal score with E[Z | Z^k, Y] approximated by importance-free MC.

    Samples Z from its Gaussian conditional given Z^k = u, weights the
    samples by the channel likelihood of y, and reuses the same samples for
    the numerator and denominator of the posterior-mean ratio. Weight
    normalization happens in log space; a row whose every sample has zero
    likelihood is retried once with a widened proposal and otherwise flagged
    (score zero).
    """

    def __init__(self, sigma_joint, channel, mc_samples, seed, iteration=0,
                 diagnostics=None):
        if mc_samples < 1:
            raise ValueError("mc_samples must be positive")
        n_sig = channel.n_signals
        sig = check_matrix(sigma_joint, "sigma_joint", ndim=2)
        self.channel = channel
        self.mc_samples = int(mc_samples)
        self.seed = int(seed)
        self.iteration = int(iteration)
        self.diagnostics = diagnostics
        self.cond_op, self.cond_cov = conditional_gaussian(sig, n_sig, diagnostics)
        self.cond_cov_inv = pinv_or_inv(self.cond_cov)
        self.factor = gaussian_factor(self.cond_cov)

    def _estimate(self, means, y, rng, widen=1.0):
        n, n_sig = means.shape
        noise = rng.standard_normal((n, self.mc_samples, n_sig))
        # center each row's sample set so an uninformative likelihood
        # returns the conditional mean exactly
        noise -= noise.mean(axis=1, keepdims=True)
        z = means[:, None, :] + widen * (noise @ self.factor.T)
        logw = self.channel.log_likelihood(np.asarray(y)[:, None], z)
        if widen != 1.0:
            # importance correction back to the N(mean, cond_cov) proposal
            logw = logw + mvn_logpdf((z - means[:, None, :]).reshape(-1, n_sig), self.cond_cov).reshape(n, -1)
            logw = logw - mvn_logpdf((z - means[:, None, :]).reshape(-1, n_sig),
                                     widen**2 * self.cond_cov).reshape(n, -1)
        dead = ~np.isfinite(logw.max(axis=1))
        weights = _softmax_last(logw)
        est = np.einsum("nm,nml->nl", weights, z)
        return est, dead

    def conditional_mean(self, u_rows, y):
        u_rows = np.atleast_2d(u_rows)
        y = np.asarray(y, dtype=float)
        n_sig = u_rows.shape[1]
        means = u_rows @ self.cond_op.T
        rng = make_rng(self.seed, STREAM_G_MC, self.iteration)
        est = np.zeros_like(means)
        dead = np.zeros(y.size, dtype=bool)
        # bound the (rows x samples x signals) working set
        chunk = max(1, 4_000_000 // (self.mc_samples * n_sig))
        for start in range(0, y.size, chunk):
            sl = slice(start, min(start + chunk, y.size))
            est[sl], dead[sl] = self._estimate(means[sl], y[sl], rng)
        if np.any(dead) and np.trace(self.cond_cov) > 0:
            idx = np.flatnonzero(dead)
            retry_est, retry_dead = self._estimate(means[idx], y[idx], rng, widen=2.0)
            est[idx] = retry_est
            dead = np.zeros(y.size, dtype=bool)
            dead[idx[retry_dead]] = True
        if np.any(dead):
            est[dead] = means[dead]
            if self.diagnostics is not None:
                self.diagnostics.flagged_rows += int(dead.sum())
        return est, dead

    def apply(self, u_rows, y):
        u_rows = np.atleast_2d(u_rows)
        means = u_rows @ self.cond_op.T
        est, dead = self.conditional_mean(u_rows, y)
        scores = (est - means) @ self.cond_cov_inv
        scores[dead] = 0.0
        return scores

    def apply_one(self, u, y):
        return self.apply(np.atleast_2d(u), np.atleast_1d(float(y)))[0]


def conditional_mean_given_y(y_values, prior_cov, channel, mc_samples, seed,
                             iteration=0, chunk=512, diagnostics=None):
    """E[Z | Y = y] for each y, over Z ~ N(0, prior_cov).

    One shared sample set is drawn and reused for every y (and for the
    numerator and denominator of each ratio).
    """
    y_values = np.atleast_1d(np.asarray(y_values, dtype=float))
    n_sig = channel.n_signals
    rng = make_rng(seed, STREAM_G_MC, iteration, 1)
    z = rng.standard_normal((int(mc_samples), n_sig)) @ gaussian_factor(prior_cov).T
    out = np.zeros((y_values.size, n_sig))
    flagged = 0
    for start in range(0, y_values.size, chunk):
        ys = y_values[start:start + chunk]
        logw = channel.log_likelihood(ys[:, None], z[None, :, :])
        dead = ~np.isfinite(logw.max(axis=1))
        w = _softmax_last(logw)
        out[start:start + chunk] = w @ z
        if np.any(dead):
            out[start:start + chunk][dead] = 0.0
            flagged += int(dead.sum())
    if diagnostics is not None:
        diagnostics.flagged_rows += flagged
    return out


def make_signal_denoiser(kind, prior, mu, tau, zeta=None, diagnostics=None):
    """Factory keyed on the configured denoiser family."""
    if kind == "bayes":
        from .priors import GaussianPrior

        if isinstance(prior, GaussianPrior):
            return GaussianPosteriorDenoiser(prior, mu, tau, diagnostics)
        return SparseDiscreteDenoiser(prior, mu, tau, diagnostics)
    if kind == "soft-threshold":
        if zeta is None:
            raise ValueError("soft-threshold denoiser needs zeta")
        return SoftThresholdDenoiser(mu, tau, zeta, diagnostics)
    raise ValueError(f"unknown signal denoiser kind: {kind!r}")
