"""Independent brute-force verification tools.

These deliberately avoid the library's own numerical paths (beyond the
channel density definitions) so the test suite can cross-check denoisers,
memory-term estimators, and the iterate-law predictions against slow but
transparent computations: finite differences, tensor-grid quadrature,
plain Monte Carlo, and a closed-form scalar recursion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .validation import make_rng

STREAM_ORACLE = 99


def fd_jacobian(fn, x, h=1e-5):
    """Central-difference Jacobian of fn: R^L -> R^L at x."""
    if h <= 0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=float)
    d = x.size
    out = np.zeros((np.atleast_1d(fn(x)).size, d))
    for j in range(d):
        step = np.zeros(d)
        step[j] = h
        out[:, j] = (np.asarray(fn(x + step)) - np.asarray(fn(x - step))) / (2.0 * h)
    return out


@dataclass
class GridResult:
    value: np.ndarray
    refinement_change: float


def grid_posterior_mean(channel, sigma_joint, u, y, grid_points=600, span=6.0,
                        tolerance=1e-3):
    """E[Z | Z^k = u, Y = y] by tensor-grid quadrature.

    Integrates z * N(z; m, V) * p(y|z) over a grid covering ``span``
    conditional standard deviations around the conditional mean m, then
    repeats at double resolution; disagreement beyond ``tolerance``
    (relative) raises, since then the oracle itself is untrustworthy.
    Supports one or two signal dimensions.
    """
    u = np.asarray(u, dtype=float)
    n_sig = channel.n_signals
    if n_sig > 2:
        raise ValueError("grid integration supports at most two signal dimensions")
    sig = np.asarray(sigma_joint, dtype=float)
    s11 = sig[:n_sig, :n_sig]
    s12 = sig[:n_sig, n_sig:]
    s22 = sig[n_sig:, n_sig:]
    w = s12 @ np.linalg.inv(s22)
    v = s11 - w @ s12.T
    if np.linalg.eigvalsh(v).min() <= 0:
        raise ValueError("conditional covariance must be positive definite")
    mean = w @ u
    v_inv = np.linalg.inv(v)

    def integrate(n_points):
        axes = [
            np.linspace(mean[i] - span * np.sqrt(v[i, i]),
                        mean[i] + span * np.sqrt(v[i, i]), n_points)
            for i in range(n_sig)
        ]
        grids = np.meshgrid(*axes, indexing="ij")
        z = np.stack([g.ravel() for g in grids], axis=-1)
        centered = z - mean
        log_prior = -0.5 * np.einsum("ni,ij,nj->n", centered, v_inv, centered)
        logw = log_prior + channel.log_likelihood(np.full(z.shape[0], float(y)), z)
        logw -= logw.max()
        wts = np.exp(logw)
        # trapezoid weights as an outer product over the axes
        tw = np.ones(z.shape[0])
        for i, ax in enumerate(axes):
            w1 = np.ones(n_points)
            w1[0] = w1[-1] = 0.5
            shape = [1] * n_sig
            shape[i] = n_points
            tw = tw * np.broadcast_to(w1.reshape(shape), grids[0].shape).ravel()
        wts = wts * tw
        return (z * wts[:, None]).sum(axis=0) / wts.sum()

    coarse = integrate(grid_points)
    fine = integrate(2 * grid_points)
    scale = max(1.0, float(np.abs(fine).max()))
    change = float(np.abs(fine - coarse).max()) / scale
    if change > tolerance:
        raise RuntimeError(
            f"grid refinement did not converge (relative change {change:.2e})"
        )
    return GridResult(value=fine, refinement_change=change)


@dataclass
class SteinResult:
    residual: np.ndarray
    stderr: np.ndarray

    def max_sigmas(self) -> float:
        with np.errstate(invalid="ignore", divide="ignore"):
            ratio = np.abs(self.residual) / self.stderr
        return float(np.nanmax(ratio))


def stein_check(cov, fn, jac, samples, seed=0):
    """Monte-Carlo residual of the multivariate Stein identity.

    For X ~ N(0, cov) the average Jacobian of a smooth map equals
    (cov^{-1} E[X fn(X)^T])^T; the residual of that identity is averaged
    over ``samples`` draws, with entrywise standard errors.

    ``fn`` maps (n, d) -> (n, d) and ``jac`` maps (n, d) -> (n, d, d).
    """
    cov = np.asarray(cov, dtype=float)
    d = cov.shape[0]
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise ValueError("covariance must be positive definite")
    rng = make_rng(seed, STREAM_ORACLE)
    x = rng.multivariate_normal(np.zeros(d), cov, size=int(samples),
                                method="cholesky")
    vals = fn(x)
    jacs = jac(x)
    cov_inv = np.linalg.inv(cov)
    sol = x @ cov_inv.T                                    # cov^{-1} x per row
    stein_terms = sol[:, :, None] * vals[:, None, :]       # (n, d, d)
    per_sample = jacs - np.transpose(stein_terms, (0, 2, 1))
    residual = per_sample.mean(axis=0)
    stderr = per_sample.std(axis=0, ddof=1) / np.sqrt(per_sample.shape[0])
    return SteinResult(residual=residual, stderr=stderr)


@dataclass
class MomentComparison:
    mean_discrepancy: float
    cov_discrepancy: float
    test_function_discrepancy: float
    scale: float

    def max_discrepancy(self) -> float:
        return max(self.mean_discrepancy, self.cov_discrepancy,
                   self.test_function_discrepancy)


def empirical_vs_se(iterate_rows, signals, mu, tau):
    """Compare the empirical iterate-residual law against its prediction.

    Residual rows (iterate - signals mu^T) are compared against N(0, tau)
    through the mean, the covariance, and three pseudo-Lipschitz test
    functions (squared norm, coordinate absolute values, pairwise products)
    whose Gaussian expectations are closed-form. Discrepancies are reported
    relative to the predicted noise scale max(1, |tau|_max), since raw
    moments grow with the iterates.
    """
    iterate_rows = np.asarray(iterate_rows, dtype=float)
    signals = np.asarray(signals, dtype=float)
    resid = iterate_rows - signals @ np.asarray(mu).T
    p, n_sig = resid.shape
    tau = np.asarray(tau, dtype=float)
    scale = max(1.0, float(np.abs(tau).max()))

    mean_disc = float(np.abs(resid.mean(axis=0)).max())
    emp_cov = resid.T @ resid / p
    cov_disc = float(np.abs(emp_cov - tau).max())

    quad_emp = np.mean(np.sum(resid**2, axis=1))
    quad_th = np.trace(tau)
    abs_emp = np.mean(np.abs(resid), axis=0)
    abs_th = np.sqrt(2.0 * np.clip(np.diag(tau), 0.0, None) / np.pi)
    iu = np.triu_indices(n_sig, k=1)
    prod_emp = np.mean(resid[:, iu[0]] * resid[:, iu[1]], axis=0) if iu[0].size else np.zeros(0)
    prod_th = tau[iu]
    tf_disc = max(
        abs(quad_emp - quad_th),
        float(np.abs(abs_emp - abs_th).max()),
        float(np.abs(prod_emp - prod_th).max()) if iu[0].size else 0.0,
    )
    return MomentComparison(
        mean_discrepancy=mean_disc / scale,
        cov_discrepancy=cov_disc / scale,
        test_function_discrepancy=tf_disc / scale,
        scale=scale,
    )


def scalar_linear_regression_se(delta, noise, prior_var=1.0, iterations=10):
    """Closed-form single-signal recursion for the linear-Gaussian channel.

    Tracks the scalar correlation^2 sequence for Bayes-optimal denoisers on
    standard linear regression with a zero-mean Gaussian prior; used as an
    independent reference for configurations that collapse to one signal.
    """
    v = float(prior_var)
    s11 = v / delta
    s12 = 0.0
    s22 = v / delta
    corr = [0.0]
    for _ in range(iterations):
        c = s11 - (s12**2 / s22 if s22 > 0 else 0.0)
        if c <= 1e-14:
            corr.append(1.0)
            continue
        cw = np.array([[s22, s12], [s12, s11 + noise**2]])
        cvec = np.array([s12, s11])
        c2 = s11 - cvec @ np.linalg.solve(cw, cvec)
        m = max((c - c2) / c**2, 0.0)
        corr.append(v * m / (v * m + 1.0))
        s22 = v**2 * m / ((v * m + 1.0) * delta)
        s12 = s22
    return np.array(corr)
