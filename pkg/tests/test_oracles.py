import numpy as np
import pytest

from mixamp.amp import run_amp
from mixamp.channels import MaxAffineChannel, MixedLinearChannel, generate_instance
from mixamp.denoisers import GaussianPosteriorDenoiser, MixturePosteriorScore
from mixamp.oracles import (
    empirical_vs_se,
    fd_jacobian,
    grid_posterior_mean,
    scalar_linear_regression_se,
    stein_check,
)
from mixamp.priors import GaussianPrior, correlated_pair_prior
from mixamp.validation import make_rng


def random_psd(dim, seed, jitter=0.3):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((dim, dim))
    return a @ a.T / dim + jitter * np.eye(dim)


# --- finite differences ------------------------------------------------------


def test_fd_identity_and_constant():
    x = np.array([0.3, -0.8])
    np.testing.assert_allclose(fd_jacobian(lambda v: v.copy(), x), np.eye(2), atol=1e-11)
    np.testing.assert_allclose(fd_jacobian(lambda v: np.ones(2), x), np.zeros((2, 2)), atol=1e-12)


def test_fd_exact_for_affine_denoiser():
    prior = GaussianPrior(np.array([0.1, -0.2]), random_psd(2, 1))
    den = GaussianPosteriorDenoiser(prior, random_psd(2, 2), random_psd(2, 3))
    x = np.array([0.5, 1.2])
    np.testing.assert_allclose(fd_jacobian(den.apply_one, x), den.jacobian(x), atol=1e-6)


def test_fd_rejects_bad_step():
    with pytest.raises(ValueError):
        fd_jacobian(lambda v: v, np.zeros(2), h=0.0)


# --- grid quadrature ---------------------------------------------------------


def test_grid_uninformative_channel_returns_conditional_mean():
    sig = random_psd(4, 4)
    ch = MixedLinearChannel((0.7, 0.3), 1e5)
    u = np.array([0.4, -0.2])
    out = grid_posterior_mean(ch, sig, u, 0.7, grid_points=200)
    w = sig[:2, 2:] @ np.linalg.inv(sig[2:, 2:])
    np.testing.assert_allclose(out.value, w @ u, atol=1e-4)


def test_grid_single_branch_matches_conjugate_closed_form():
    sig = random_psd(4, 5)
    ch = MixedLinearChannel((1.0, 0.0), 0.5)
    score = MixturePosteriorScore(sig, (1.0, 0.0), 0.5)
    u = np.array([0.2, 0.3])
    y = 0.8
    out = grid_posterior_mean(ch, sig, u, y, grid_points=300)
    closed = score.conditional_mean(u[None, :], np.array([y]))[0]
    np.testing.assert_allclose(out.value, closed, atol=1e-6)


def test_grid_refinement_failure_raises():
    sig = random_psd(4, 6)
    ch = MixedLinearChannel((0.7, 0.3), 0.02)  # near-singular likelihood vs grid
    with pytest.raises(RuntimeError):
        grid_posterior_mean(ch, sig, np.array([4.0, -4.0]), 25.0, grid_points=8)


def test_grid_rejects_high_dimension():
    from mixamp.channels import MixtureOfExpertsChannel

    with pytest.raises(ValueError):
        grid_posterior_mean(MixtureOfExpertsChannel(0.1), np.eye(8),
                            np.zeros(4), 0.0)


# --- Stein identity ----------------------------------------------------------


def test_stein_linear_map_residual_zero_mean():
    cov = random_psd(2, 7)
    a = np.array([[0.7, -0.2], [0.4, 1.1]])
    res = stein_check(cov, lambda x: x @ a.T,
                      lambda x: np.broadcast_to(a, (x.shape[0], 2, 2)),
                      100_000, seed=1)
    assert res.max_sigmas() < 4.0


def test_stein_constant_map_exact_zero():
    cov = random_psd(2, 8)
    res = stein_check(cov, lambda x: np.ones_like(x),
                      lambda x: np.zeros((x.shape[0], 2, 2)), 10_000, seed=2)
    np.testing.assert_allclose(res.residual, np.zeros((2, 2)), atol=1e-10)


def test_stein_tanh_scalar():
    res = stein_check(np.array([[1.0]]), lambda x: np.tanh(x),
                      lambda x: (1 - np.tanh(x) ** 2)[:, :, None],
                      1_000_000, seed=3)
    assert res.max_sigmas() < 3.0


def test_stein_requires_positive_definite():
    with pytest.raises(ValueError):
        stein_check(np.zeros((2, 2)), lambda x: x, lambda x: x, 100)


# --- empirical-vs-limit comparison -------------------------------------------


def test_empirical_vs_se_on_exact_law():
    rng = make_rng(11, 0)
    p = 100_000
    tau = np.array([[0.5, 0.1], [0.1, 0.3]])
    mu = np.array([[1.2, 0.0], [0.2, 0.9]])
    signals = rng.standard_normal((p, 2))
    resid = rng.multivariate_normal(np.zeros(2), tau, size=p, method="cholesky")
    rows = signals @ mu.T + resid
    comp = empirical_vs_se(rows, signals, mu, tau)
    # each discrepancy within ~5 standard errors of its own estimator
    assert comp.max_discrepancy() < 5 * np.sqrt(2.0 / p) * 3


def test_empirical_vs_se_detects_wrong_noise():
    # deliberate failure: zero residuals against a nonzero predicted noise
    rng = make_rng(12, 0)
    p = 5000
    tau = 0.5 * np.eye(2)
    mu = np.eye(2)
    signals = rng.standard_normal((p, 2))
    comp = empirical_vs_se(signals @ mu.T, signals, mu, tau)
    np.testing.assert_allclose(comp.cov_discrepancy, 0.5, atol=1e-12)


def test_empirical_vs_se_on_amp_run():
    prior = correlated_pair_prior(0.0)
    channel = MixedLinearChannel((0.7, 0.3), 0.3)
    inst = generate_instance(channel, prior, 8000, 2000, seed=13)
    run = run_amp(inst, prior, channel, iterations=5, seed=13)
    comp = empirical_vs_se(run.state.b_mat, inst.signals, run.state.mu_b,
                           run.state.tau_b)
    assert comp.max_discrepancy() <= 0.05


# --- single-signal closed-form recursion --------------------------------------


def test_scalar_recursion_monotone_to_one_noiseless():
    corr = scalar_linear_regression_se(4.0, 0.0, 1.0, 10)
    assert (np.diff(corr) >= -1e-12).all()
    assert corr[-1] > 0.999


def test_scalar_recursion_first_step_value():
    # first-step signal-to-noise is 1/(s11 + noise^2) with s11 = v/delta
    delta, noise, v = 4.0, 0.5, 1.0
    corr = scalar_linear_regression_se(delta, noise, v, 1)
    m = 1.0 / (v / delta + noise**2)
    np.testing.assert_allclose(corr[1], v * m / (v * m + 1.0), rtol=1e-12)


def test_scalar_recursion_degrades_with_noise():
    quiet = scalar_linear_regression_se(4.0, 0.1, 1.0, 10)
    loud = scalar_linear_regression_se(4.0, 1.0, 1.0, 10)
    assert loud[-1] < quiet[-1]
