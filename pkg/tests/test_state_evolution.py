import numpy as np
import pytest

from mixamp.amp import moment_sigma
from mixamp.channels import MaxAffineChannel, MixedLinearChannel
from mixamp.denoisers import LinearDenoiser
from mixamp.priors import GaussianPrior, SparseDiscretePrior, correlated_pair_prior
from mixamp.state_evolution import (
    effective_noise,
    initial_metrics,
    initial_se_state,
    predict_metrics,
    run_se,
    se_step,
    theta_params,
)
from mixamp.oracles import scalar_linear_regression_se


def random_psd(dim, seed, jitter=0.2):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((dim, dim))
    return a @ a.T / dim + jitter * np.eye(dim)


# --- conditional parameters of the observation-side iterate ------------------


def test_theta_params_perfect_estimate():
    block = random_psd(2, 0)
    sigma = np.block([[block, block], [block, block]])
    mu, tau = theta_params(sigma, 2)
    np.testing.assert_allclose(mu, np.eye(2), atol=1e-10)
    np.testing.assert_allclose(tau, np.zeros((2, 2)), atol=1e-10)


def test_theta_params_uninformative_estimate():
    s11, s22 = random_psd(2, 1), random_psd(2, 2)
    sigma = np.block([[s11, np.zeros((2, 2))], [np.zeros((2, 2)), s22]])
    mu, tau = theta_params(sigma, 2)
    np.testing.assert_allclose(mu, np.zeros((2, 2)), atol=1e-12)
    np.testing.assert_allclose(tau, s22, atol=1e-12)


def test_theta_params_schur_complement_psd():
    rng = np.random.default_rng(3)
    for trial in range(20):
        a = rng.standard_normal((4, 4))
        sigma = a @ a.T / 4 + 0.1 * np.eye(4)
        _, tau = theta_params(sigma, 2)
        assert np.linalg.eigvalsh(tau).min() >= -1e-12


def test_theta_params_singular_signal_block_rejected():
    sigma = np.zeros((4, 4))
    sigma[2:, 2:] = np.eye(2)
    with pytest.raises(ValueError):
        theta_params(sigma, 2)


# --- effective noise ---------------------------------------------------------


def test_effective_noise_identity_alignment():
    tau = random_psd(2, 4)
    np.testing.assert_allclose(effective_noise(np.eye(2), tau), tau, atol=1e-12)


def test_effective_noise_scaling():
    np.testing.assert_allclose(effective_noise(2 * np.eye(2), np.eye(2)),
                               np.eye(2) / 4, atol=1e-12)


def test_effective_noise_pseudoinverse_path():
    n = effective_noise(np.diag([1.0, 0.0]), np.eye(2))
    np.testing.assert_allclose(n, np.diag([1.0, 0.0]), atol=1e-12)


# --- recursion steps ---------------------------------------------------------


def test_zero_denoiser_zeroes_estimate_blocks():
    prior = correlated_pair_prior(0.0)
    channel = MixedLinearChannel((0.7, 0.3), 0.3)
    state = initial_se_state(prior, 2.0)
    out = se_step(state, prior, channel,
                  f_builder=lambda mu, tau: LinearDenoiser(np.zeros((2, 2))),
                  mc_samples=20000, seed=0)
    np.testing.assert_allclose(out.sigma[:2, 2:], np.zeros((2, 2)), atol=1e-12)
    np.testing.assert_allclose(out.sigma[2:, 2:], np.zeros((2, 2)), atol=1e-12)


def test_degenerate_mixture_second_signal_uninformed():
    # with every observation from the first branch, the channel carries no
    # information about the second signal beyond the prior correlation
    prior = correlated_pair_prior(0.0)
    channel = MixedLinearChannel((1.0, 0.0), 0.0)
    state = initial_se_state(prior, 4.0)
    for _ in range(3):
        state = se_step(state, prior, channel, mc_samples=40000, seed=1)
    corr, _, _ = predict_metrics(state, prior, mc_samples=40000, seed=1)
    assert corr[0] > 0.9
    assert corr[1] < 0.05


def test_bayes_identities_alignment_equals_noise_and_cross_equals_estimate():
    prior = correlated_pair_prior(0.0)
    channel = MixedLinearChannel((0.7, 0.3), 0.2)
    state = initial_se_state(prior, 4.0)
    for _ in range(3):
        state = se_step(state, prior, channel, mc_samples=30000, seed=2)
        np.testing.assert_array_equal(state.mu_b, state.tau_b)
        np.testing.assert_array_equal(state.sigma[:2, 2:], state.sigma[2:, 2:])


def test_sigma_symmetric():
    prior = SparseDiscretePrior(0.1, 2)
    channel = MixedLinearChannel((0.6, 0.4), 0.0)
    state = initial_se_state(prior, 3.0)
    for _ in range(4):
        state = se_step(state, prior, channel, denoiser="soft-threshold",
                        zeta=1.1402, mc_samples=30000, seed=3)
        np.testing.assert_allclose(state.sigma, state.sigma.T, atol=1e-10)


def test_self_consistency_across_sample_counts():
    # quasi Monte Carlo keeps the one-step update stable between sample
    # budgets on the same scrambled stream
    prior = correlated_pair_prior(0.0)
    channel = MixedLinearChannel((0.7, 0.3), 0.2)
    state = initial_se_state(prior, 4.0)
    small = se_step(state, prior, channel, mc_samples=100_000, seed=4)
    large = se_step(state, prior, channel, mc_samples=400_000, seed=4)
    scale = np.abs(large.sigma).max()
    assert np.abs(small.sigma - large.sigma).max() / scale <= 0.005


# --- metric predictions ------------------------------------------------------


def test_initial_metrics_zero_mean_prior():
    corr, mse, ok = initial_metrics(correlated_pair_prior(0.0))
    np.testing.assert_allclose(corr, [0.0, 0.0])
    np.testing.assert_allclose(mse, [2.0, 2.0])


def test_predict_metrics_noiseless_fixed_point():
    prior = correlated_pair_prior(0.0)
    state = initial_se_state(prior, 4.0)
    state = type(state)(k=1, delta=4.0, sigma=state.sigma,
                        mu_b=np.eye(2), tau_b=1e-12 * np.eye(2))
    corr, mse, ok = predict_metrics(state, prior, mc_samples=20000, seed=5)
    np.testing.assert_allclose(corr, [1.0, 1.0], atol=1e-6)
    np.testing.assert_allclose(mse, [0.0, 0.0], atol=1e-6)


def test_predict_metrics_zero_denoiser_flagged():
    prior = correlated_pair_prior(0.0)
    state = initial_se_state(prior, 4.0)
    state = type(state)(k=1, delta=4.0, sigma=state.sigma,
                        mu_b=np.eye(2), tau_b=np.eye(2))
    corr, mse, ok = predict_metrics(
        state, prior, f_builder=lambda mu, tau: LinearDenoiser(np.zeros((2, 2))),
        mc_samples=20000, seed=6)
    assert not ok.any()
    np.testing.assert_allclose(corr, [0.0, 0.0])
    np.testing.assert_allclose(mse, [1.0, 1.0], atol=0.02)


def test_identical_signals_match_single_signal_recursion():
    # perfectly correlated signals collapse to standard linear regression
    prior = correlated_pair_prior(1.0)
    channel = MixedLinearChannel((0.7, 0.3), 0.0)
    se = run_se(prior, channel, 4.0, iterations=6, mc_samples=60000, seed=7)
    oracle = scalar_linear_regression_se(4.0, 1e-4, 1.0, 6)
    np.testing.assert_allclose(se.corr[-1], oracle[-1] * np.ones(2), atol=0.02)
    # both signals' predictions coincide
    np.testing.assert_allclose(se.corr[:, 0], se.corr[:, 1], atol=1e-6)


def test_monotone_information_at_bayes_denoisers():
    # the first iteration's alignment is rank-deficient under the symmetric
    # initialization (the pseudoinverse trace only covers the informative
    # subspace), so the monotone decrease starts once full rank is reached
    prior = correlated_pair_prior(0.0)
    channel = MixedLinearChannel((0.7, 0.3), 0.3)
    run = run_se(prior, channel, 4.0, iterations=6, mc_samples=60000, seed=8)
    run2 = run_se(prior, channel, 4.0, iterations=6, mc_samples=60000, seed=9)
    traces = []
    for r in (run, run2):
        tr = [np.trace(effective_noise(s.mu_b, s.tau_b)) for s in r.states[2:]]
        traces.append(np.array(tr))
    stderr = np.abs(traces[0] - traces[1])
    for k in range(len(traces[0]) - 1):
        tol = 2 * max(stderr[k], stderr[k + 1], 1e-6)
        assert traces[0][k + 1] <= traces[0][k] + tol


def test_optimal_denoiser_minimizes_theta_noise():
    # replacing the posterior mean by a mismatched linear map strictly
    # increases the observation-side effective noise at the next iteration
    prior = correlated_pair_prior(0.0)
    channel = MixedLinearChannel((0.7, 0.3), 0.3)
    state = initial_se_state(prior, 4.0)
    state = se_step(state, prior, channel, mc_samples=60000, seed=10)

    def theta_noise(state_next):
        mu_t, tau_t = theta_params(state_next.sigma, 2)
        return np.trace(effective_noise(mu_t, tau_t))

    bayes_next = se_step(state, prior, channel, mc_samples=60000, seed=11)
    mismatched = LinearDenoiser(0.5 * np.linalg.pinv(state.tau_b + 1e-12 * np.eye(2)) @ state.tau_b)
    mis_next = se_step(state, prior, channel,
                       f_builder=lambda mu, tau: mismatched,
                       mc_samples=60000, seed=11)
    assert theta_noise(mis_next) > theta_noise(bayes_next)


def test_mismatched_weights_alignment_differs_from_noise():
    # a score built with wrong mixture weights loses the optimality identity
    prior = correlated_pair_prior(0.0)
    channel = MixedLinearChannel((0.7, 0.3), 0.2)
    state = initial_se_state(prior, 4.0)
    state = se_step(state, prior, channel, mc_samples=60000, seed=12)
    out = se_step(state, prior, channel, weights_assumed=(0.5, 0.5),
                  mc_samples=60000, seed=12)
    assert np.abs(out.mu_b - out.tau_b).max() > 1e-3


def test_max_affine_channel_recursion_runs():
    prior = GaussianPrior(np.array([0.0, 1.0]), np.eye(2))
    channel = MaxAffineChannel((1.0, 0.0), 0.1)
    run = run_se(prior, channel, 6.0, iterations=2, mc_samples=3000,
                 mc_inner=400, seed=13)
    assert run.corr.shape == (3, 2)
    assert (run.corr[-1] > run.corr[0]).all()
