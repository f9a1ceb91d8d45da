"""The AMP iteration with Onsager memory terms and its running estimates.

Each step alternates a matrix multiply with a row-wise denoiser on both the
observation side and the signal side. The memory terms debias the iterates
so their rows behave like the signal corrupted by Gaussian noise; the
state-tracking matrices (mu_b, tau_b, sigma_hat) are estimated from the
iterates themselves and feed the next step's denoisers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .channels import STREAM_INIT, MixedLinearChannel
from .denoisers import (
    Diagnostics,
    MixturePosteriorScore,
    MonteCarloScore,
    make_signal_denoiser,
)
from .validation import (
    DivergedRunError,
    check_matrix,
    make_rng,
    ridge_inverse,
    symmetrize,
)


@dataclass(frozen=True)
class AmpState:
    """All matrices carried from one iteration to the next."""

    k: int
    theta: np.ndarray      # n x L observation-side iterate
    rhat: np.ndarray       # n x L scored observations
    b_mat: np.ndarray      # p x L signal-side iterate (pre-denoising)
    b_hat: np.ndarray      # p x L current signal estimate
    f_mat: np.ndarray      # L x L signal-denoiser memory coefficient
    c_mat: np.ndarray      # L x L observation-denoiser memory coefficient
    mu_b: np.ndarray       # L x L iterate alignment estimate
    tau_b: np.ndarray      # L x L iterate noise covariance estimate
    sigma_hat: np.ndarray  # 2L x 2L joint second-moment estimate
    # how far the raw alignment Gram exceeded its information bound (>= 1
    # means at the bound; large values flag a broken iterate law)
    info_excess: float = 0.0


def moment_sigma(prior, delta: float) -> np.ndarray:
    """Initial joint second-moment matrix from exact prior moments.

    For an estimate drawn from the prior independently of the signal, the
    diagonal blocks are the prior second moment and the off-diagonal blocks
    the outer product of the prior mean, all scaled by 1/delta.
    """
    m2 = prior.second_moment()
    cross = np.outer(prior.mean, prior.mean)
    return np.block([[m2, cross], [cross, m2]]) / delta


def empirical_sigma(signals, b_hat0, n: int) -> np.ndarray:
    """Joint second-moment matrix measured from actual initializer matrices."""
    top = np.column_stack([signals, b_hat0])
    return symmetrize(top.T @ top / n)


def initial_state(instance, prior, init_mode="prior-random", b_hat0=None, seed=0):
    """Starting state: random prior draw or a caller-provided estimate.

    The provided-matrix mode measures the joint second moments empirically
    (so an oracle initialization carries its alignment into the first
    iteration); the prior-random mode uses exact prior moments.
    """
    n, p = instance.x.shape
    n_sig = prior.n_signals
    if init_mode == "prior-random":
        if b_hat0 is not None:
            raise ValueError("b_hat0 only makes sense with init_mode='provided-matrix'")
        b_hat0 = prior.sample(p, make_rng(seed, STREAM_INIT))
        sigma0 = moment_sigma(prior, instance.delta)
    elif init_mode == "provided-matrix":
        b_hat0 = check_matrix(b_hat0, "b_hat0", shape=(p, n_sig))
        sigma0 = empirical_sigma(instance.signals, b_hat0, n)
    else:
        raise ValueError(f"unknown init_mode: {init_mode!r}")
    zeros_n = np.zeros((n, n_sig))
    return AmpState(
        k=0,
        theta=zeros_n,
        rhat=zeros_n.copy(),
        b_mat=b_hat0.copy(),
        b_hat=b_hat0,
        f_mat=np.eye(n_sig),
        c_mat=np.zeros((n_sig, n_sig)),
        mu_b=np.zeros((n_sig, n_sig)),
        tau_b=np.zeros((n_sig, n_sig)),
        sigma_hat=sigma0,
    )


def estimate_mu_tau(rhat):
    """Alignment and noise-covariance estimates from the scored observations.

    Both equal the Gram matrix of the scores; the identification of the
    alignment with it is valid when the observation-side denoiser is the
    Bayes-optimal score.
    """
    n = rhat.shape[0]
    gram = symmetrize(rhat.T @ rhat / n)
    return gram, gram


def estimate_onsager(theta, rhat, sigma_hat, mu_next, diagnostics=None):
    """Memory coefficient for the signal-side update, via Stein's identity.

    Rearranges the joint-Gaussian Stein identity to express the average
    Jacobian of the score in its first argument through measurable
    quantities: the iterate/score correlation and the alignment estimate.
    """
    n, n_sig = rhat.shape
    s21 = sigma_hat[n_sig:, :n_sig]
    s22 = sigma_hat[n_sig:, n_sig:]
    corr = theta.T @ rhat / n
    inner = ridge_inverse(s22, diagnostics) @ (corr - s21 @ mu_next.T)
    return inner.T


# Fraction of the signal block the estimate block must stay strictly below,
# keeping the conditional covariance of the signal given the estimate on the
# PSD cone with a hair of slack. The recursion and its deterministic
# prediction apply the same cap, so their agreement is unaffected; it is
# small enough never to bind before the fit-guarded stopping rule does.
INFO_CAP_MARGIN = 1e-6


def cap_below(s22, s11, margin=INFO_CAP_MARGIN):
    """Project s22 so that (1 - margin) s11 - s22 is PSD.

    For posterior-mean denoisers the limit law guarantees the estimate
    block never exceeds the signal block (Jensen); finite-size overshoot
    breaks that ordering and flips the sign of the conditional covariance.
    """
    target = (1.0 - margin) * s11
    diff = symmetrize(target - s22)
    w, v = np.linalg.eigh(diff)
    if w.min() >= 0:
        return s22
    w = np.clip(w, 0.0, None)
    return symmetrize(target - (v * w) @ v.T)


def project_joint_psd(sigma, s11, rounds: int = 12):
    """Nearest matrix that is PSD with its leading block pinned to s11.

    The blocks of the joint second-moment matrix are estimated from
    different sources (exact prior moments, data averages, indicator
    formulas), so the assembly can drift slightly indefinite; an indefinite
    joint matrix corrupts every conditional computation downstream.
    Alternates eigenvalue clipping with re-pinning the signal block.
    """
    n_sig = s11.shape[0]
    out = symmetrize(np.asarray(sigma, dtype=float))
    for _ in range(rounds):
        w, v = np.linalg.eigh(out)
        if w.min() >= 0:
            break
        out = symmetrize((v * np.clip(w, 0.0, None)) @ v.T)
        out[:n_sig, :n_sig] = s11
    return out


def next_sigma(sigma_hat, b_mat, b_hat_next, f, prior, n: int):
    """Joint second-moment estimate for the next iteration.

    The signal block is pinned at its initial value; the estimate blocks are
    the Gram matrix of the denoised iterate. Denoisers that are not
    posterior means supply their own signal/estimate cross-moment.
    """
    p, n_sig = b_hat_next.shape
    s11 = sigma_hat[:n_sig, :n_sig]
    s22 = symmetrize(b_hat_next.T @ b_hat_next / n)
    cross = f.cross_moment(b_mat, b_hat_next, prior)
    if cross is None:
        s22 = cap_below(s22, s11)
        s12 = s22
    else:
        s12 = (p / n) * cross
    out = sigma_hat.copy()
    out[:n_sig, n_sig:] = s12
    out[n_sig:, :n_sig] = s12.T
    out[n_sig:, n_sig:] = s22
    out = symmetrize(out)
    if cross is not None:
        out = project_joint_psd(out, s11)
    return out


def _require_finite(a, what: str, iteration: int):
    if not np.all(np.isfinite(a)):
        raise DivergedRunError(f"non-finite values in {what}", iteration)


def amp_step(state, x, y, f_factory, g_factory, prior, diagnostics=None):
    """One full iteration; runs in O(n p L) time.

    ``f_factory(mu, tau)`` and ``g_factory(sigma_hat, k)`` build the
    denoisers for this iteration from the current tracking estimates.

    The alignment estimate is capped at the inverse conditional covariance
    of the score context: for the optimal score the alignment equals the
    covariance of conditional means scaled by that inverse, so it can never
    exceed it. The empirical Gram blows through the bound when exact
    recovery of a signal makes the residual law non-Gaussian, and an
    uncapped estimate locks the denoiser into overconfident decisions.
    """
    n, p = x.shape
    k = state.k
    theta = x @ state.b_hat - state.rhat @ state.f_mat.T
    score = g_factory(state.sigma_hat, k)
    rhat = score.apply(theta, y)
    _require_finite(rhat, "scored observations", k)
    mu_next, tau_next = estimate_mu_tau(rhat)
    info_excess = 0.0
    info_bound = getattr(score, "cond_cov_inv", None)
    if info_bound is not None:
        bound = symmetrize(info_bound)
        bound_scale = max(float(np.linalg.eigvalsh(bound).max()), 1e-300)
        info_excess = float(np.linalg.eigvalsh(mu_next).max()) / bound_scale
        mu_next = cap_below(mu_next, bound, margin=0.0)
        tau_next = mu_next
    c_mat = estimate_onsager(theta, rhat, state.sigma_hat, mu_next, diagnostics)
    b_mat = x.T @ rhat - state.b_hat @ c_mat.T
    f = f_factory(mu_next, tau_next)
    b_hat = f.apply(b_mat)
    _require_finite(b_hat, "signal estimate", k)
    f_mat = (p / n) * f.average_jacobian(b_mat)
    sigma = next_sigma(state.sigma_hat, b_mat, b_hat, f, prior, n)
    return AmpState(
        k=k + 1,
        theta=theta,
        rhat=rhat,
        b_mat=b_mat,
        b_hat=b_hat,
        f_mat=f_mat,
        c_mat=c_mat,
        mu_b=mu_next,
        tau_b=tau_next,
        sigma_hat=sigma,
        info_excess=info_excess,
    )


def signal_metrics(b_hat, signals):
    """Per-signal (normalized squared correlation, mean squared error).

    A zero estimate or zero signal makes the correlation undefined; those
    entries are reported as 0 with the accompanying flag set.
    """
    num = np.einsum("pl,pl->l", b_hat, signals) ** 2
    den = np.einsum("pl,pl->l", b_hat, b_hat) * np.einsum("pl,pl->l", signals, signals)
    ok = den > 0
    corr = np.zeros(b_hat.shape[1])
    corr[ok] = num[ok] / den[ok]
    mse = np.mean((signals - b_hat) ** 2, axis=0)
    return corr, mse, ok


def default_g_factory(channel, seed, mc_samples=1000, weights_assumed=None,
                      diagnostics=None):
    """Observation-side denoiser family for a channel.

    The mixture channel gets the closed-form conditional-Gaussian score
    (optionally with assumed mixture weights differing from the truth);
    other channels get the Monte-Carlo score.
    """
    if isinstance(channel, MixedLinearChannel):
        weights = channel.weights if weights_assumed is None else tuple(weights_assumed)

        def factory(sigma_hat, k):
            del k
            return MixturePosteriorScore(sigma_hat, weights, channel.noise_eff,
                                         diagnostics)
    else:
        def factory(sigma_hat, k):
            return MonteCarloScore(sigma_hat, channel, mc_samples, seed,
                                   iteration=k, diagnostics=diagnostics)
    return factory


def default_f_factory(kind, prior, zeta=None, diagnostics=None):
    def factory(mu, tau):
        return make_signal_denoiser(kind, prior, mu, tau, zeta=zeta,
                                    diagnostics=diagnostics)
    return factory


@dataclass
class AmpRun:
    """Final state plus the per-iteration metric trace."""

    state: AmpState
    corr: np.ndarray        # (iterations+1) x L
    mse: np.ndarray         # (iterations+1) x L
    corr_ok: np.ndarray     # (iterations+1) x L validity flags
    mu_trace: list
    tau_trace: list
    diagnostics: Diagnostics
    stopped_at: int | None = None


def run_amp(instance, prior, channel, denoiser="bayes", iterations=10, seed=0,
            zeta=None, mc_samples=1000, weights_assumed=None,
            init_mode="prior-random", b_hat0=None, f_factory=None,
            g_factory=None, channel_override=None, fit_guard=True):
    """Run the full iteration against one instance and record metrics.

    ``channel_override`` substitutes the channel used to build the
    observation-side denoiser (the data keep the instance's channel); the
    intercept-estimation loop uses this to run with current intercepts.

    With ``fit_guard`` the run monitors the spectrum of its own alignment
    estimate, which grows direction by direction while the iteration is
    healthy. Losing a direction, or having the weakest tracked direction
    collapse, is the signature of the finite-size overshoot that noiseless
    problems hit near exact recovery; the run then stops on the last good
    state. The trace repeats the kept values so its length stays
    ``iterations + 1``.
    """
    diagnostics = Diagnostics()
    score_channel = channel if channel_override is None else channel_override
    if g_factory is None:
        g_factory = default_g_factory(score_channel, seed, mc_samples,
                                      weights_assumed, diagnostics)
    if f_factory is None:
        f_factory = default_f_factory(denoiser, prior, zeta, diagnostics)
    state = initial_state(instance, prior, init_mode=init_mode, b_hat0=b_hat0,
                          seed=seed)
    corr0, mse0, ok0 = signal_metrics(state.b_hat, instance.signals)
    corr, mse, ok = [corr0], [mse0], [ok0]
    mu_trace, tau_trace = [], []

    def spectrum(candidate):
        w = np.linalg.eigvalsh(candidate.mu_b)
        significant = w[w > 1e-10 * max(w.max(), 1e-300)]
        if significant.size == 0:
            return 0, 0.0
        return significant.size, float(significant.min())

    best_rank, best_floor = 0, 0.0
    stopped_at = None
    previous = state
    for _ in range(iterations):
        candidate = amp_step(state, instance.x, instance.y, f_factory,
                             g_factory, prior, diagnostics)
        if fit_guard:
            rank, floor = spectrum(candidate)
            broken = (rank < best_rank
                      or (rank == best_rank and floor < 0.5 * best_floor)
                      or candidate.info_excess > 3.0)
            if broken:
                # the estimates feeding this step already reflect the break,
                # so the damage dates to the step before the detection
                stopped_at = candidate.k
                state = previous
                corr = corr[:max(1, state.k + 1)]
                mse = mse[:max(1, state.k + 1)]
                ok = ok[:max(1, state.k + 1)]
                break
            if rank > best_rank:
                best_rank, best_floor = rank, floor
            else:
                best_floor = max(best_floor, floor)
        previous = state
        state = candidate
        c, m, o = signal_metrics(state.b_hat, instance.signals)
        corr.append(c)
        mse.append(m)
        ok.append(o)
        mu_trace.append(state.mu_b)
        tau_trace.append(state.tau_b)
    if stopped_at is not None:
        c, m, o = signal_metrics(state.b_hat, instance.signals)
        corr.append(c)
        mse.append(m)
        ok.append(o)
    while len(corr) < iterations + 1:
        corr.append(corr[-1])
        mse.append(mse[-1])
        ok.append(ok[-1])
    return AmpRun(
        state=state,
        corr=np.array(corr),
        mse=np.array(mse),
        corr_ok=np.array(ok),
        mu_trace=mu_trace,
        tau_trace=tau_trace,
        diagnostics=diagnostics,
        stopped_at=stopped_at,
    )
