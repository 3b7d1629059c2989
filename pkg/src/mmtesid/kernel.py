"""Multi-modal trigonometric-exponential (MMTE) covariance and its algebra.

The kernel is a sum of squared-exponential enveloped cosines plus a white
noise term that acts only at zero lag:

    k(tau) = sum_k s2_k exp(-tau^2 / l2_k) cos(w_k tau) + sn2 [tau == 0]

Its power spectral density (two-sided, ``S(w) = int k(tau) e^{-i w tau} dtau``)
has a closed form used by :func:`kernel_psd`.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from . import _accel
from .exceptions import FactorizationError, ValidationError

DEFAULT_TRUNCATION_TOL = 0.005


@dataclass(frozen=True)
class MmteParams:
    """Kernel parameters: per-mode variance, squared length and frequency."""

    sigma_sq: np.ndarray
    len_sq: np.ndarray
    omega: np.ndarray
    noise_sq: float

    def __post_init__(self):
        s = np.atleast_1d(np.asarray(self.sigma_sq, dtype=float)).copy()
        l2 = np.atleast_1d(np.asarray(self.len_sq, dtype=float)).copy()
        w = np.atleast_1d(np.asarray(self.omega, dtype=float)).copy()
        if not (s.shape == l2.shape == w.shape) or s.ndim != 1:
            raise ValidationError("sigma_sq, len_sq and omega must be 1-D of equal length")
        for a in (s, l2, w):
            a.setflags(write=False)
        object.__setattr__(self, "sigma_sq", s)
        object.__setattr__(self, "len_sq", l2)
        object.__setattr__(self, "omega", w)
        object.__setattr__(self, "noise_sq", float(self.noise_sq))

    @classmethod
    def from_modes(cls, modes, noise_sq):
        """Build from a list of ``(sigma_sq, len_sq, omega)`` triples."""
        modes = np.asarray(modes, dtype=float).reshape(-1, 3)
        return cls(modes[:, 0], modes[:, 1], modes[:, 2], noise_sq)

    @classmethod
    def from_vector(cls, phi):
        phi = np.asarray(phi, dtype=float)
        if phi.size < 4 or (phi.size - 1) % 3:
            raise ValidationError(f"kernel vector length {phi.size} is not 3m + 1")
        return cls.from_modes(phi[:-1], phi[-1])

    @property
    def m(self):
        return self.sigma_sq.size

    def as_vector(self):
        """``[s2_1, l2_1, w_1, ..., s2_m, l2_m, w_m, sn2]``."""
        modes = np.column_stack([self.sigma_sq, self.len_sq, self.omega]).ravel()
        return np.append(modes, self.noise_sq)

    def validate(self, allow_zero_amplitude=False):
        if self.m < 1:
            raise ValidationError("at least one kernel mode is required")
        amp_ok = self.sigma_sq >= 0 if allow_zero_amplitude else self.sigma_sq > 0
        if not (np.all(amp_ok) and np.all(self.len_sq > 0) and np.all(self.omega > 0)
                and self.noise_sq > 0):
            raise ValidationError("kernel parameters must be strictly positive")
        if not np.all(np.isfinite(self.as_vector())):
            raise ValidationError("kernel parameters must be finite")
        return self

    def sorted(self):
        """Copy with modes ordered by ascending frequency."""
        idx = np.argsort(self.omega, kind="stable")
        return MmteParams(self.sigma_sq[idx], self.len_sq[idx], self.omega[idx], self.noise_sq)

    def total_variance(self):
        return float(self.sigma_sq.sum() + self.noise_sq)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform global time stamps ``t0 + k dt`` for ``k = 0..n-1``."""

    t0: float
    dt: float
    n: int

    def __post_init__(self):
        if self.dt <= 0 or self.n < 0:
            raise ValidationError("TimeGrid needs dt > 0 and n >= 0")

    @classmethod
    def from_stamps(cls, stamps, dt=None, rtol=1e-6):
        stamps = np.asarray(stamps, dtype=float)
        if dt is None:
            if stamps.size < 2:
                raise ValidationError("dt is required for grids with fewer than two stamps")
            dt = (stamps[-1] - stamps[0]) / (stamps.size - 1)
        expected = stamps[0] + dt * np.arange(stamps.size)
        if stamps.size and np.max(np.abs(stamps - expected)) > rtol * dt:
            raise ValidationError("time stamps are not uniformly spaced")
        return cls(float(stamps[0]), float(dt), int(stamps.size))

    @property
    def stamps(self):
        return self.t0 + self.dt * np.arange(self.n)

    def __len__(self):
        return self.n

    def shifted(self, c):
        return TimeGrid(self.t0 + c, self.dt, self.n)

    def slice(self, start, stop):
        stop = min(stop, self.n)
        return TimeGrid(self.t0 + start * self.dt, self.dt, max(stop - start, 0))


def _kernel_no_noise(tau, phi):
    tau = np.asarray(tau, dtype=float)
    out = np.zeros_like(tau)
    for s, l2, w in zip(phi.sigma_sq, phi.len_sq, phi.omega):
        out = out + s * np.exp(-tau * tau / l2) * np.cos(w * tau)
    return out


def kernel_value(tau, phi, include_noise=True):
    """MMTE covariance at lag ``tau``; the noise term is added where ``tau == 0``."""
    tau = np.asarray(tau, dtype=float)
    out = _kernel_no_noise(tau, phi)
    if include_noise:
        out = out + np.where(tau == 0.0, phi.noise_sq, 0.0)
    return out if out.ndim else float(out)


def kernel_psd(omega, phi):
    """Closed-form power spectral density of the MMTE kernel."""
    w = np.asarray(omega, dtype=float)
    out = np.full_like(w, phi.noise_sq)
    for s, l2, wk in zip(phi.sigma_sq, phi.len_sq, phi.omega):
        ell = np.sqrt(l2)
        out = out + 0.5 * np.sqrt(np.pi) * s * ell * (
            np.exp(-0.25 * l2 * (w + wk) ** 2) + np.exp(-0.25 * l2 * (w - wk) ** 2))
    return out if out.ndim else float(out)


def lag_derivatives(tau, phi):
    """Derivatives of the noise-free kernel with respect to log parameters.

    Returns an array of shape ``(3 m, len(tau))`` ordered per mode as
    ``(log s2_k, log l2_k, log w_k)``.  The noise derivative is handled by the
    caller because it lives on the diagonal only.
    """
    tau = np.asarray(tau, dtype=float)
    out = np.empty((3 * phi.m,) + tau.shape)
    t2 = tau * tau
    for k, (s, l2, w) in enumerate(zip(phi.sigma_sq, phi.len_sq, phi.omega)):
        env = np.exp(-t2 / l2)
        cos = np.cos(w * tau)
        base = s * env * cos
        out[3 * k] = base
        out[3 * k + 1] = base * t2 / l2
        out[3 * k + 2] = -s * env * w * tau * np.sin(w * tau)
    return out


def _grid_offset(row, col):
    if not np.isclose(row.dt, col.dt, rtol=1e-12, atol=0.0):
        raise ValidationError("time grids must share the sampling interval")
    return int(np.rint((col.t0 - row.t0) / row.dt))


def block_lags(row, col):
    """Integer lags of the first row and first column of a Toeplitz block."""
    off = _grid_offset(row, col)
    return off + np.arange(col.n), off - np.arange(row.n)


def assemble_block(times_row, times_col, phi, include_noise=False):
    """Covariance block with entries ``k(|t_q - t_p|)``.

    ``times_row``/``times_col`` are :class:`TimeGrid` objects (exact Toeplitz
    assembly, shift-invariant) or plain stamp arrays (direct evaluation).
    The noise variance is added only where two stamps coincide, i.e. on the
    diagonal of a same-grid block.
    """
    if isinstance(times_row, TimeGrid) and isinstance(times_col, TimeGrid):
        lag_row, lag_col = block_lags(times_row, times_col)
        dt = times_row.dt
        first_row = kernel_value(np.abs(lag_row) * dt, phi, include_noise=False)
        first_col = kernel_value(np.abs(lag_col) * dt, phi, include_noise=False)
        out = _accel.toeplitz(np.atleast_1d(first_col), np.atleast_1d(first_row))
        if include_noise:
            off = lag_row[0]
            p = np.arange(times_row.n)
            q = p - off
            ok = (q >= 0) & (q < times_col.n)
            out[p[ok], q[ok]] += phi.noise_sq
        return out

    t_row = np.atleast_1d(np.asarray(times_row, dtype=float))
    t_col = np.atleast_1d(np.asarray(times_col, dtype=float))
    out = _accel.mmte_block(t_row, t_col, phi.sigma_sq, phi.len_sq, phi.omega)
    if include_noise:
        out = out + phi.noise_sq * (t_row[:, None] == t_col[None, :])
    return out


def tangent_covariance(J, sigma_theta_sq):
    """``sum_j s2_j J[:, j] J[:, j]^T`` (the linearised parameter covariance)."""
    J = np.atleast_2d(np.asarray(J, dtype=float))
    s2 = np.atleast_1d(np.asarray(sigma_theta_sq, dtype=float))
    if J.shape[1] != s2.size:
        raise ValidationError(
            f"J has {J.shape[1]} columns but {s2.size} parameter variances were given")
    return (J * s2) @ J.T


# ---------------------------------------------------------------------------
# Factorizations
# ---------------------------------------------------------------------------

class CholeskyFactorization:
    """Exact factorization of a symmetric positive definite matrix."""

    truncated = False

    def __init__(self, cov):
        cov = np.asarray(cov, dtype=float)
        try:
            self.L = la.cholesky(cov, lower=True, check_finite=True)
        except (la.LinAlgError, ValueError) as exc:
            raise FactorizationError(f"Cholesky factorization failed: {exc}") from None
        self.dim = cov.shape[0]
        self.rank = self.dim
        self.logdet = 2.0 * float(np.sum(np.log(np.diag(self.L))))

    def solve(self, b):
        return la.cho_solve((self.L, True), b, check_finite=False)

    def whiten(self, b):
        return la.solve_triangular(self.L, b, lower=True, check_finite=False)

    def quad(self, r):
        z = self.whiten(r)
        return float(z @ z)

    def inverse(self):
        inv, info = la.lapack.dpotri(self.L, lower=1)
        if info:
            raise FactorizationError("inverse from Cholesky factor failed")
        inv = np.tril(inv) + np.tril(inv, -1).T
        return inv

    def sensitivity(self, r):
        """``S`` with ``d(logdet + r^T C^-1 r) = tr(S dC)`` at fixed ``r``."""
        alpha = self.solve(r)
        return self.inverse() - np.outer(alpha, alpha)


class TruncatedFactorization:
    """Eigen-truncated factorization of a symmetric positive semi-definite matrix.

    Eigenpairs with value below ``tol * largest`` are discarded.  The
    log-determinant is the sum of retained log-eigenvalues and solves use the
    pseudo-inverse on the retained subspace.
    """

    truncated = True

    def __init__(self, cov, tol=DEFAULT_TRUNCATION_TOL):
        cov = np.asarray(cov, dtype=float)
        if not 0 < tol < 1:
            raise ValidationError("truncation tolerance must lie in (0, 1)")
        if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
            raise ValidationError("covariance must be square")
        scale = np.max(np.abs(cov)) if cov.size else 0.0
        if not np.all(np.isfinite(cov)):
            raise FactorizationError("covariance contains non-finite entries")
        if scale > 0 and np.max(np.abs(cov - cov.T)) > 1e-10 * max(scale, 1.0):
            raise ValidationError("covariance is not symmetric")
        vals, vecs = la.eigh(0.5 * (cov + cov.T), check_finite=False)
        top = vals[-1] if vals.size else 0.0
        if top <= 0:
            raise ValidationError("cannot truncate an all-zero (or negative) matrix")
        keep = vals >= tol * top
        self.tol = tol
        self.values = vals[keep][::-1]
        self.vectors = vecs[:, keep][:, ::-1]
        self.discarded = vals[~keep]
        self.discarded_vectors = vecs[:, ~keep]
        self.dim = cov.shape[0]
        self.rank = int(keep.sum())
        self.logdet = float(np.sum(np.log(self.values)))

    @property
    def largest(self):
        return float(self.values[0])

    def reconstruct(self):
        return (self.vectors * self.values) @ self.vectors.T

    def solve(self, b):
        proj = self.vectors.T @ b
        if proj.ndim == 1:
            return self.vectors @ (proj / self.values)
        return self.vectors @ (proj / self.values[:, None])

    def whiten(self, b):
        proj = self.vectors.T @ b
        if proj.ndim == 1:
            return proj / np.sqrt(self.values)
        return proj / np.sqrt(self.values)[:, None]

    def quad(self, r):
        z = self.whiten(r)
        return float(z @ z)

    def inverse(self):
        return (self.vectors / self.values) @ self.vectors.T

    def sensitivity(self, r):
        """``S`` with ``d(logdet + r^T C^+ r) = tr(S dC)`` at fixed ``r``.

        The pseudo-inverse is a spectral function of ``C``; its derivative
        couples retained and discarded eigenvectors through the divided
        differences ``1 / (lam_i (lam_i - lam_j))``.
        """
        V, lam = self.vectors, self.values
        a = V.T @ r
        alpha = V @ (a / lam)
        S = self.inverse() - np.outer(alpha, alpha)
        if self.discarded.size:
            Vd = self.discarded_vectors
            ad = Vd.T @ r
            G = np.outer(a / lam, ad) / (lam[:, None] - self.discarded[None, :])
            X = V @ G @ Vd.T
            S += X + X.T
        return S


def svd_truncate(cov, tol=DEFAULT_TRUNCATION_TOL):
    return TruncatedFactorization(cov, tol)


def factorize(cov, truncation_tol=None, fallback_tol=DEFAULT_TRUNCATION_TOL):
    """Cholesky when ``truncation_tol`` is None, falling back to truncation.

    Pass ``fallback_tol=None`` to make a failed Cholesky an error.
    """
    if truncation_tol is not None:
        return TruncatedFactorization(cov, truncation_tol)
    try:
        return CholeskyFactorization(cov)
    except FactorizationError:
        if fallback_tol is None:
            raise
        return TruncatedFactorization(cov, fallback_tol)
