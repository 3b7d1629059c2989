"""Multivariate Gaussian algebra: linear marginalisation, conditioning,
log-density and equal-weight mixture moments."""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ValidationError
from .kernel import factorize

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianDist:
    """Mean and covariance with a lazily cached factorization.

    ``truncation_tol`` selects the eigen-truncated factorization; the default
    (None) factorizes exactly and only truncates if the matrix is not
    numerically positive definite.
    """

    mean: np.ndarray
    cov: np.ndarray
    truncation_tol: float = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise ValidationError(
                f"covariance shape {cov.shape} does not match mean length {mean.size}")
        scale = max(float(np.max(np.abs(cov))) if cov.size else 0.0, 1.0)
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-10 * scale:
            raise ValidationError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self):
        return self.mean.size

    @property
    def factorization(self):
        if "fac" not in self._cache:
            self._cache["fac"] = factorize(self.cov, self.truncation_tol)
        return self._cache["fac"]

    def std(self):
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    def sample(self, rng, size=None):
        return rng.multivariate_normal(self.mean, self.cov, size=size, method="eigh")


@dataclass(frozen=True)
class JointGaussianBlocks:
    """Partitioned joint Gaussian over ``[x1, x2]``."""

    mu1: np.ndarray
    mu2: np.ndarray
    S11: np.ndarray
    S12: np.ndarray
    S22: np.ndarray

    def __post_init__(self):
        for name in ("mu1", "mu2"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))
        for name in ("S11", "S12", "S22"):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), float)))
        n1, n2 = self.mu1.size, self.mu2.size
        if self.S11.shape != (n1, n1) or self.S12.shape != (n1, n2) or self.S22.shape != (n2, n2):
            raise ValidationError("joint block shapes are inconsistent")

    def full(self, truncation_tol=None):
        mean = np.concatenate([self.mu1, self.mu2])
        cov = np.block([[self.S11, self.S12], [self.S12.T, self.S22]])
        return GaussianDist(mean, cov, truncation_tol)

    def marginal1(self, truncation_tol=None):
        return GaussianDist(self.mu1, self.S11, truncation_tol)


def marginalize_linear(A, Sigma, mu0, Sigma0):
    """Integrate ``N(x | A mu, Sigma) N(mu | mu0, Sigma0)`` over ``mu``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=float))
    Sigma0 = np.atleast_2d(np.asarray(Sigma0, dtype=float))
    nx, nmu = A.shape
    if Sigma.shape != (nx, nx) or mu0.size != nmu or Sigma0.shape != (nmu, nmu):
        raise ValidationError(
            f"shapes A{A.shape}, Sigma{Sigma.shape}, mu0({mu0.size},), "
            f"Sigma0{Sigma0.shape} are not conformable")
    cov = Sigma + A @ Sigma0 @ A.T
    return GaussianDist(A @ mu0, 0.5 * (cov + cov.T))


def condition(joint, x1, truncation_tol=None, fallback_tol=None):
    """Distribution of ``x2`` given ``x1`` under a joint Gaussian.

    ``Sigma11`` is factorized exactly unless ``truncation_tol`` is given; a
    singular ``Sigma11`` then raises :class:`FactorizationError` unless a
    ``fallback_tol`` is supplied.
    """
    x1 = np.atleast_1d(np.asarray(x1, dtype=float))
    if x1.size != joint.mu1.size:
        raise ValidationError("conditioning vector has the wrong length")
    fac = factorize(joint.S11, truncation_tol, fallback_tol=fallback_tol)
    gain = fac.solve(joint.S12)  # S11^-1 S12
    mean = joint.mu2 + gain.T @ (x1 - joint.mu1)
    cov = joint.S22 - joint.S12.T @ gain
    return GaussianDist(mean, 0.5 * (cov + cov.T), truncation_tol)


def log_density(y, dist):
    """Gaussian log-density, constants included, via the cached factorization.

    Under truncation only the retained subspace contributes, so the constant
    uses the retained rank.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.size != dist.dim:
        raise ValidationError(f"point has length {y.size}, distribution has {dist.dim}")
    fac = dist.factorization
    r = y - dist.mean
    return -0.5 * (fac.logdet + fac.quad(r) + fac.rank * LOG_2PI)


def mixture_moments(components):
    """Mean and covariance of an equal-weight Gaussian mixture.

    ``components`` is a sequence of :class:`GaussianDist` or of
    ``(mean, cov)`` pairs.
    """
    comps = list(components)
    if not comps:
        raise ValidationError("mixture needs at least one component")
    means = []
    covs = []
    for c in comps:
        mean, cov = (c.mean, c.cov) if isinstance(c, GaussianDist) else c
        means.append(np.atleast_1d(np.asarray(mean, dtype=float)))
        covs.append(np.atleast_2d(np.asarray(cov, dtype=float)))
    dims = {m.size for m in means}
    if len(dims) != 1 or any(c.shape != (m.size, m.size) for m, c in zip(means, covs)):
        raise ValidationError("mixture components have inconsistent dimensions")
    M = np.stack(means)
    n_s = M.shape[0]
    mean = M.sum(axis=0) / n_s
    second = (M.T @ M + np.sum(covs, axis=0)) / n_s
    cov = second - np.outer(mean, mean)
    return mean, 0.5 * (cov + cov.T)
