"""Input validation and small dense linear-algebra helpers.

Everything here operates on tiny matrices (at most a few times the number
of signals per side), so clarity and numerical robustness win over speed.
"""

from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import qmc

# Condition number above which inversions switch to the ridge-regularized
# path, and the relative size of the ridge term.
RIDGE_CONDITION_LIMIT = 1e12
RIDGE_SCALE = 1e-10

# Eigenvalues of nominally-PSD matrices below this are treated as a
# numerical failure rather than noise.
PSD_EIGENVALUE_TOLERANCE = -1e-8


class NumericalFailureError(RuntimeError):
    """A matrix that must be PSD came out indefinite beyond tolerance."""


class DivergedRunError(RuntimeError):
    """An iterative run produced non-finite values."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


def check_matrix(a, name: str, shape=None, ndim=2):
    """Coerce to a float ndarray and verify dimensions.

    ``shape`` entries set to None are unconstrained.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {a.shape}")
    if shape is not None:
        for axis, want in enumerate(shape):
            if want is not None and a.shape[axis] != want:
                raise ValueError(f"{name} has shape {a.shape}, expected {shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def check_vector(a, name: str, size=None):
    return check_matrix(a, name, shape=None if size is None else (size,), ndim=1)


def symmetrize(a):
    return 0.5 * (a + a.T)


def check_psd(a, name: str, tol: float = PSD_EIGENVALUE_TOLERANCE):
    """Verify symmetry and positive semidefiniteness up to ``tol``."""
    a = check_matrix(a, name, ndim=2)
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"{name} must be square, got shape {a.shape}")
    if not np.allclose(a, a.T, atol=1e-10, rtol=0):
        raise ValueError(f"{name} must be symmetric")
    w = np.linalg.eigvalsh(symmetrize(a))
    if w.min() < tol * max(1.0, abs(w).max()):
        raise ValueError(f"{name} is not positive semidefinite (min eigenvalue {w.min():.3e})")
    return symmetrize(a)


def clip_psd(a, tol: float = PSD_EIGENVALUE_TOLERANCE):
    """Clip tiny negative eigenvalues to zero; error for genuinely indefinite input.

    Monte-Carlo covariance estimates routinely carry eigenvalues of order
    -1e-12; anything below ``tol`` (relative to the spectral radius) is a bug.
    """
    a = symmetrize(np.asarray(a, dtype=float))
    w, v = np.linalg.eigh(a)
    scale = max(1.0, abs(w).max())
    if w.min() < tol * scale:
        raise NumericalFailureError(
            f"matrix has eigenvalue {w.min():.3e}, below tolerance {tol * scale:.3e}"
        )
    w = np.clip(w, 0.0, None)
    return symmetrize((v * w) @ v.T)


def ridge_inverse(a, diagnostics=None):
    """Inverse with a scaled-identity ridge when the matrix is ill conditioned.

    The matrix is diagonally equilibrated first, so blocks living on very
    different scales (a huge noise variance next to order-one covariances)
    do not trip the ridge; the ridge activates only for genuine
    near-singularity of the equilibrated matrix, and activations are
    recorded on the optional ``diagnostics`` object.
    """
    a = np.asarray(a, dtype=float)
    m = a.shape[0]
    diag = np.abs(np.diag(a))
    scale = diag.max()
    if scale <= 0:
        d = np.ones(m)
    else:
        d = np.sqrt(np.maximum(diag, 1e-12 * scale))
    eq = a / np.outer(d, d)
    cond = np.linalg.cond(eq)
    if not np.isfinite(cond) or cond > RIDGE_CONDITION_LIMIT:
        tr = np.trace(eq)
        scale = abs(tr) / m if tr != 0 else 1.0
        eq = eq + RIDGE_SCALE * scale * np.eye(m)
        if diagnostics is not None:
            diagnostics.ridge_activations += 1
    return np.linalg.inv(eq) / np.outer(d, d)


def pinv_or_inv(a):
    """Plain inverse when well conditioned, pseudoinverse otherwise."""
    a = np.asarray(a, dtype=float)
    cond = np.linalg.cond(a)
    if np.isfinite(cond) and cond <= RIDGE_CONDITION_LIMIT:
        return np.linalg.inv(a)
    return np.linalg.pinv(a)


def gaussian_factor(cov):
    """Symmetric PSD square root, valid for singular PSD covariances.

    The symmetric root is the canonical choice: it commutes with coordinate
    permutations, so relabeling the signals relabels the samples.
    """
    cov = symmetrize(np.asarray(cov, dtype=float))
    w, v = np.linalg.eigh(cov)
    w = np.clip(w, 0.0, None)
    return symmetrize((v * np.sqrt(w)) @ v.T)


def mvn_logpdf(x, cov, diagnostics=None):
    """Log density of N(0, cov) evaluated at the rows of ``x``.

    Computed through an eigendecomposition with a relative floor on the
    eigenvalues, so rank-deficient covariances (which the iteration passes
    through when started from a symmetric initialization) stay finite
    instead of producing near-singular Cholesky noise.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = cov.shape[0]
    w, v = np.linalg.eigh(symmetrize(np.asarray(cov, dtype=float)))
    floor = 1e-12 * max(abs(w).max(), 1e-300)
    if w.min() < floor and diagnostics is not None:
        diagnostics.ridge_activations += 1
    w = np.clip(w, floor, None)
    sol = (x @ v) / np.sqrt(w)
    quad = np.sum(sol**2, axis=1)
    logdet = np.sum(np.log(w))
    return -0.5 * (quad + logdet + d * np.log(2.0 * np.pi))


def conditional_gaussian(sigma_joint, n_signals, diagnostics=None):
    """Conditional mean operator and covariance of the first block given the second.

    For a zero-mean joint covariance of (first block, second block), returns
    (W, V) with E[first | second=u] = W @ u and Cov[first | second] = V.
    """
    sig = check_matrix(sigma_joint, "sigma_joint", ndim=2)
    two_l = sig.shape[0]
    if two_l != 2 * n_signals or sig.shape[1] != two_l:
        raise ValueError(f"joint covariance must be {2*n_signals}x{2*n_signals}, got {sig.shape}")
    s11 = sig[:n_signals, :n_signals]
    s12 = sig[:n_signals, n_signals:]
    s22 = sig[n_signals:, n_signals:]
    s22_inv = ridge_inverse(s22, diagnostics)
    w = s12 @ s22_inv
    v = symmetrize(s11 - w @ s12.T)
    return w, v


def make_rng(seed, *key):
    """Generator on an independent substream identified by integer tags."""
    entropy = (int(seed),) + tuple(int(k) for k in key)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def sobol_uniforms(n, dim, seed, *key):
    """``n`` scrambled-Sobol points in (0, 1)^dim on a reproducible substream.

    Non-power-of-two counts are fine for our averaging use; the balance
    warning scipy raises for them is suppressed.
    """
    ss = np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key))
    engine = qmc.Sobol(d=dim, scramble=True, seed=np.random.default_rng(ss))
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="The balance properties of Sobol")
        u = engine.random(n)
    return np.clip(u, 1e-12, 1.0 - 1e-12)
