"""Cubic B-spline projection and functional PCA on the beat grid."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.interpolate import BSpline

__all__ = [
    "SplineBasis",
    "SplineFit",
    "PcaDecomposition",
    "build_basis",
    "smooth",
    "smoothed_mean",
    "fpca",
    "reconstruct",
    "write_pca_eigenvalues",
    "write_pca_loadings",
    "write_eigenfunctions",
]


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """Clamped B-spline basis evaluated on the grid ``1..m``.

    Attributes
    ----------
    degree : int
    breakpoints : ndarray
        Equally spaced breakpoints on ``[1, m]``, both ends included.
    knots : ndarray
        Full knot vector; boundary breakpoints repeated ``degree + 1`` times.
    design : ndarray, shape (m, K)
        ``design[t - 1, k] = psi_k(t)``.
    """

    degree: int
    breakpoints: np.ndarray
    knots: np.ndarray
    design: np.ndarray
    _q: np.ndarray
    _r: np.ndarray

    @property
    def K(self):
        return self.design.shape[1]

    @property
    def m(self):
        return self.design.shape[0]

    @property
    def grid(self):
        return np.arange(1, self.m + 1, dtype=float)

    def evaluate(self, coefficients):
        """Curves on the grid for coefficients of shape (K,) or (n, K)."""
        return np.asarray(coefficients) @ self.design.T

    def same_as(self, other):
        return self is other or (
            self.degree == other.degree and self.m == other.m and np.array_equal(self.knots, other.knots)
        )


def build_basis(m, n_breakpoints=135, degree=3):
    """Cubic B-spline basis with ``n_breakpoints`` equally spaced breakpoints.

    ``K = n_breakpoints + degree - 1`` functions (137 for the defaults).
    """
    if n_breakpoints < degree + 2:
        raise ValueError(f"need at least {degree + 2} breakpoints")
    K = n_breakpoints + degree - 1
    if m <= K:
        raise ValueError(f"m={m} must exceed the basis dimension K={K}")
    breakpoints = np.linspace(1.0, float(m), n_breakpoints)
    knots = np.concatenate([np.repeat(breakpoints[0], degree), breakpoints, np.repeat(breakpoints[-1], degree)])
    grid = np.arange(1, m + 1, dtype=float)
    design = BSpline.design_matrix(grid, knots, degree).toarray()
    q, r = scipy.linalg.qr(design, mode="economic")
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-12 * diag.max():
        raise ValueError("design matrix is rank deficient on the grid")
    return SplineBasis(degree, breakpoints, knots, design, q, r)


@dataclass(frozen=True, eq=False)
class SplineFit:
    """Least-squares coefficients ``c_{i,k}`` on a shared basis.

    ``coefficients`` has shape (K,) for one series or (n, K) for several;
    ``rss`` matches the leading shape.
    """

    coefficients: np.ndarray
    basis: SplineBasis
    rss: np.ndarray

    @property
    def values(self):
        return self.basis.evaluate(self.coefficients)

    @property
    def n(self):
        return 1 if self.coefficients.ndim == 1 else self.coefficients.shape[0]


def smooth(series, basis):
    """Project series onto the basis by least squares (QR, not normal equations).

    ``series`` is a length-m vector or an ``n x m`` matrix of rows.
    """
    y = np.asarray(series, dtype=float)
    if y.shape[-1] != basis.m:
        raise ValueError(f"series length {y.shape[-1]} does not match basis grid {basis.m}")
    if not np.all(np.isfinite(y)):
        raise ValueError("series must be finite")
    rhs = basis._q.T @ y.T
    coef = scipy.linalg.solve_triangular(basis._r, rhs).T
    resid = y - basis.evaluate(coef)
    return SplineFit(coef, basis, np.sum(resid**2, axis=-1))


def _stack(fits):
    if isinstance(fits, SplineFit):
        return np.atleast_2d(fits.coefficients), fits.basis
    fits = list(fits)
    if not fits:
        raise ValueError("no fits given")
    basis = fits[0].basis
    for f in fits[1:]:
        if not basis.same_as(f.basis):
            raise ValueError("fits use different bases")
    return np.vstack([np.atleast_2d(f.coefficients) for f in fits]), basis


def smoothed_mean(fits):
    """Mean of the smoothed curves, computed from the averaged coefficients."""
    coef, basis = _stack(fits)
    if coef.shape[0] < 2:
        raise ValueError("need at least 2 fitted curves")
    return basis.evaluate(coef.mean(axis=0))


@dataclass(frozen=True)
class PcaDecomposition:
    """Functional PCA of smoothed curves on the grid.

    Eigenfunctions are orthonormal for ``<f, g> = (1/m) sum_t f(t) g(t)``;
    ``loadings[i, j]`` is the inner product of curve ``i`` (centered) with
    eigenfunction ``j``.  ``explained_fraction`` is relative to
    ``total_variance``, which counts every component, not only the returned
    ones.
    """

    mean_function: np.ndarray
    eigenfunctions: np.ndarray
    eigenvalues: np.ndarray
    loadings: np.ndarray
    explained_fraction: np.ndarray
    total_variance: float

    @property
    def n_components(self):
        return self.eigenvalues.size


def fpca(fits, n_components=2):
    """Eigendecomposition of the sample covariance of the smoothed curves.

    The SVD of the centered curves scaled by ``1/sqrt(m (n - 1))`` gives the
    eigenvalues as squared singular values.  Each eigenfunction's sign is
    chosen so that ``sum_t phi(t) (t - m/2) >= 0``.
    """
    coef, basis = _stack(fits)
    n = coef.shape[0]
    if n < 3:
        raise ValueError("fpca needs at least 3 curves")
    if not 1 <= n_components <= n - 1:
        raise ValueError(f"n_components must lie in [1, {n - 1}]")
    curves = basis.evaluate(coef)
    mean = curves.mean(axis=0)
    centered = curves - mean
    m = curves.shape[1]
    _, s, vt = np.linalg.svd(centered / np.sqrt(m * (n - 1)), full_matrices=False)
    eigenvalues = s**2
    total = float(eigenvalues.sum())
    if total <= 0 or s[0] <= 1e-14 * np.abs(curves).max():
        raise ValueError("covariance is identically zero (all curves equal)")
    phi = np.sqrt(m) * vt[:n_components]
    lever = np.arange(1, m + 1) - m / 2
    flip = phi @ lever < 0
    phi[flip] *= -1
    loadings = centered @ phi.T / m
    return PcaDecomposition(
        mean_function=mean,
        eigenfunctions=phi,
        eigenvalues=eigenvalues[:n_components],
        loadings=loadings,
        explained_fraction=eigenvalues[:n_components] / total,
        total_variance=total,
    )


def reconstruct(pca, i, r):
    """Mean function plus the first ``r`` components for curve ``i``."""
    if not 0 <= r <= pca.n_components:
        raise ValueError(f"r must lie in [0, {pca.n_components}]")
    return pca.mean_function + pca.loadings[i, :r] @ pca.eigenfunctions[:r]


def write_pca_eigenvalues(pca, path):
    """``component,eigenvalue,explained_fraction`` per returned component."""
    with open(path, "w", newline="") as fh:
        fh.write("component,eigenvalue,explained_fraction\n")
        for j, (lam, frac) in enumerate(zip(pca.eigenvalues, pca.explained_fraction), start=1):
            fh.write(f"pc{j},{float(lam)!r},{float(frac)!r}\n")


def write_pca_loadings(pca, subject_ids, path):
    cols = [f"pc{j}" for j in range(1, pca.n_components + 1)]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["subject", *cols]) + "\n")
        for sid, row in zip(subject_ids, pca.loadings):
            fh.write(",".join([str(sid), *(repr(float(v)) for v in row)]) + "\n")


def write_eigenfunctions(pca, path):
    cols = [f"pc{j}" for j in range(1, pca.n_components + 1)]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["beat", "mean", *cols]) + "\n")
        for t in range(pca.mean_function.size):
            vals = [pca.mean_function[t], *pca.eigenfunctions[:, t]]
            fh.write(",".join([str(t + 1), *(repr(float(v)) for v in vals)]) + "\n")
