"""Sequential partition-wise MAP identification.

Each partition ``i`` carries hyper-parameters ``delta_i = (mu_theta,
sigma_theta_sq, phi)``.  The likelihood of partition ``i`` is the Gaussian
conditional of ``y_i`` given ``y_{i-1}`` under the joint of the two
neighbouring partitions, with ``delta_{i-1}`` frozen at its estimate.  The
partition estimates then feed a random-walk covariance estimate and a
Gaussian-mixture prediction of the next partition's response.

All random-walk algebra runs in unconstrained coordinates: ``mu_theta`` as is,
logs of every variance, squared length and frequency.
"""

import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize

from .exceptions import ConvergenceWarning, FactorizationError, ValidationError
from .gaussian import LOG_2PI, GaussianDist, mixture_moments
from .kernel import (MmteParams, TimeGrid, assemble_block,
                     factorize, lag_derivatives)
from . import _accel
from .series import TimeSeries, stack_channels, unstack_channels
from .spectral import MIN_SAMPLES, peak_fwhm, residual_psd, suggest_modes
from .structure import (_check_inputs, _exact_sensitivities, fd_step, final_state,
                        response_sensitivities)

PENALTY = 1e20


# ---------------------------------------------------------------------------
# Hyper-parameter state
# ---------------------------------------------------------------------------

def delta_blocks(n_theta, m):
    """Slices of the (mu, Sigma, phi) blocks in the unconstrained vector."""
    return (slice(0, n_theta), slice(n_theta, 2 * n_theta),
            slice(2 * n_theta, 2 * n_theta + 3 * m + 1))


@dataclass(frozen=True)
class HyperState:
    mu_theta: np.ndarray
    sigma_theta_sq: np.ndarray
    phi: MmteParams

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu_theta, dtype=float))
        s2 = np.atleast_1d(np.asarray(self.sigma_theta_sq, dtype=float))
        if mu.shape != s2.shape:
            raise ValidationError("mu_theta and sigma_theta_sq must have equal length")
        if np.any(s2 <= 0):
            raise ValidationError("parameter variances must be strictly positive")
        object.__setattr__(self, "mu_theta", mu)
        object.__setattr__(self, "sigma_theta_sq", s2)

    @property
    def n_theta(self):
        return self.mu_theta.size

    @property
    def m(self):
        return self.phi.m

    @property
    def n_delta(self):
        return 2 * self.n_theta + 3 * self.m + 1

    def to_unconstrained(self):
        phi = self.phi
        modes = np.log(np.column_stack([phi.sigma_sq, phi.len_sq, phi.omega])).ravel()
        return np.concatenate([self.mu_theta, np.log(self.sigma_theta_sq), modes,
                               [np.log(phi.noise_sq)]])

    @classmethod
    def from_unconstrained(cls, vec, n_theta):
        vec = np.asarray(vec, dtype=float)
        rest = vec.size - 2 * n_theta - 1
        if rest < 3 or rest % 3:
            raise ValidationError(f"vector length {vec.size} does not match n_theta={n_theta}")
        mu = vec[:n_theta]
        s2 = np.exp(vec[n_theta:2 * n_theta])
        modes = np.exp(vec[2 * n_theta:-1]).reshape(-1, 3)
        phi = MmteParams(modes[:, 0], modes[:, 1], modes[:, 2], float(np.exp(vec[-1])))
        return cls(mu, s2, phi)

    def sorted_modes(self):
        return HyperState(self.mu_theta, self.sigma_theta_sq, self.phi.sorted())

    def as_dict(self):
        return {
            "mu_theta": self.mu_theta.tolist(),
            "sigma_theta": np.sqrt(self.sigma_theta_sq).tolist(),
            "sigma_sq": self.phi.sigma_sq.tolist(),
            "len_sq": self.phi.len_sq.tolist(),
            "omega": self.phi.omega.tolist(),
            "noise_sq": self.phi.noise_sq,
        }


@dataclass(frozen=True)
class RandomWalkCov:
    Q: np.ndarray
    n_theta: int
    m: int

    def block(self, name):
        mu, sig, phi = delta_blocks(self.n_theta, self.m)
        sl = {"mu": mu, "sigma": sig, "phi": phi}[name]
        return self.Q[sl, sl]


# ---------------------------------------------------------------------------
# Options and results
# ---------------------------------------------------------------------------

@dataclass
class FitOptions:
    """Optimizer and numerical settings for the partition fits.

    ``optimizer`` is ``"lbfgs"`` (bound-constrained quasi-Newton with the
    analytic gradient) or ``"simplex"`` (Nelder-Mead).  Search bounds are set
    in unconstrained coordinates from the data scale and the nominal
    parameters; ``min_rel_sigma_theta`` floors the parameter standard
    deviations relative to ``|mu_theta|``.
    """

    optimizer: str = "lbfgs"
    restarts: int = 1
    max_iter: int = 400
    seed: int = 0
    truncation_tol: Optional[float] = None
    sensitivity: str = "auto"
    min_rel_sigma_theta: float = 1e-3
    ftol: float = 1e-8
    xtol: float = 1e-6
    gtol: float = 1e-5
    restart_mu_scale: float = 0.02
    restart_log_scale: float = 0.25
    n_samples: int = 200
    chain_state: bool = True
    collision_rtol: float = 0.01
    mu_range: float = 3.0
    max_rel_sigma_theta: float = 0.5
    kernel_warmup: bool = True
    max_eval: Optional[int] = None


@dataclass
class FitResult:
    delta: HyperState
    nll: float
    nll_init: float
    converged: bool
    n_iter: int
    n_eval: int
    flags: list = field(default_factory=list)
    restart_values: list = field(default_factory=list)


@dataclass
class PartitionState:
    """Everything the next partition needs from partition ``i``."""

    index: int
    partition: object
    delta: HyperState
    grid: TimeGrid
    y_vec: np.ndarray
    f_vec: np.ndarray
    J: np.ndarray
    factorization: object
    end_state: np.ndarray
    fit: Optional[FitResult] = None

    @property
    def residual(self):
        return self.y_vec - self.f_vec

    @property
    def n_obs(self):
        return self.y_vec.size // self.grid.n


@dataclass
class PredictiveResult:
    times: np.ndarray
    mean: np.ndarray          # (n, n_obs)
    var: np.ndarray           # (n, n_obs)
    cov: Optional[np.ndarray]  # stacked (n n_obs)^2 or None when too large
    samples: list
    n_samples: int
    n_dropped: int = 0
    names: tuple = None

    @property
    def sd(self):
        return np.sqrt(np.clip(self.var, 0.0, None))

    def coverage(self, y, k=3.0):
        y = np.asarray(getattr(y, "values", y), dtype=float)
        return float(np.mean(np.abs(y - self.mean) <= k * self.sd))


@dataclass
class PipelineResult:
    deltas: list               # HyperState for partitions 0..N_D (0 = initial)
    states: list               # PartitionState for 1..N_D
    Q: RandomWalkCov
    samples: list
    theta_mean: np.ndarray
    theta_std: np.ndarray
    predictive: Optional[PredictiveResult]
    diagnostics: dict

    @property
    def converged(self):
        return all(s.fit is None or s.fit.converged for s in self.states)

    def total_log_likelihood(self):
        return -float(sum(s.fit.nll for s in self.states))


# ---------------------------------------------------------------------------
# Physics-based mean and its parameter gradients
# ---------------------------------------------------------------------------

class ResponseModel:
    """``f(x_i, theta)`` and ``J = df/dtheta`` on one partition, stacked by channel."""

    def __init__(self, system, partition, method="auto", cache_size=6):
        self.system = system
        self.partition = partition
        self.u, self.z0 = _check_inputs(system, partition.x, partition.initial_state)
        if method == "auto":
            method = "exact" if system.is_affine else "fd"
        self.method = method
        self._cache = {}
        self._order = []
        self._cache_size = cache_size

    def _compute(self, theta):
        if self.method == "exact":
            y, sens = _exact_sensitivities(self.system, self.u, self.z0, theta)
            f = stack_channels(y)
            J = np.column_stack([stack_channels(sens[:, j, :]) for j in range(theta.size)])
        else:
            J, resp = response_sensitivities(self.system, self.partition.x, theta,
                                             self.partition.initial_state, method="fd",
                                             return_response=True)
            f = stack_channels(resp.values)
        return f, J

    def __call__(self, theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        key = theta.tobytes()
        if key not in self._cache:
            self._cache[key] = self._compute(theta)
            self._order.append(key)
            if len(self._order) > self._cache_size:
                self._cache.pop(self._order.pop(0), None)
        return self._cache[key]

    def curvature(self, theta):
        """``H[l, j] = dJ[:, j] / dtheta_l`` by central differences of ``J``."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        k = theta.size
        f, J = self(theta)
        H = np.empty((k, k, J.shape[0]))
        for l in range(k):
            h = fd_step(theta[l])
            tp = theta.copy()
            tm = theta.copy()
            tp[l] += h
            tm[l] -= h
            Jp = self._compute(tp)[1]
            Jm = self._compute(tm)[1]
            H[l] = ((Jp - Jm) / (2.0 * h)).T
        return H

    def end_state(self, theta):
        return final_state(self.system, self.partition.x, theta, self.partition.initial_state)


def _block_diag_repeat(Kt, n_obs):
    n = Kt.shape[0]
    out = np.zeros((n * n_obs, n * n_obs))
    for c in range(n_obs):
        out[c * n:(c + 1) * n, c * n:(c + 1) * n] = Kt
    return out


def marginal_block(delta, grid, J, n_obs):
    """``K_i + J_i Sigma_i J_i^T`` with channel-independent kernel blocks."""
    Kt = assemble_block(grid, grid, delta.phi, include_noise=True)
    B = _block_diag_repeat(Kt, n_obs)
    B += (J * delta.sigma_theta_sq) @ J.T
    return B


@dataclass
class ConditionalTerms:
    """Pieces of the conditional that depend only on the previous partition."""

    mean_shift: np.ndarray  # k^T B_prev^-1 r_prev
    W: Optional[np.ndarray]  # k^T B_prev^-1 k (full) or None
    W_diag: np.ndarray

    @classmethod
    def zero(cls, dim):
        return cls(np.zeros(dim), np.zeros((dim, dim)), np.zeros(dim))

    @classmethod
    def build(cls, prev, grid, n_obs, full=True):
        Kc = assemble_block(prev.grid, grid, prev.delta.phi, include_noise=False)
        n_prev, n_new = Kc.shape
        k = np.zeros((n_prev * n_obs, n_new * n_obs))
        for c in range(n_obs):
            k[c * n_prev:(c + 1) * n_prev, c * n_new:(c + 1) * n_new] = Kc
        G = prev.factorization.solve(k)
        shift = G.T @ prev.residual
        if full:
            W = k.T @ G
            W = 0.5 * (W + W.T)
            return cls(shift, W, np.diag(W).copy())
        return cls(shift, None, np.einsum("ij,ij->j", k, G))


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

class PartitionObjective:
    """Negative conditional log-likelihood of one partition as a function of
    the unconstrained hyper-parameter vector."""

    def __init__(self, partition, prev, system, n_theta, m, truncation_tol=None,
                 sensitivity="auto"):
        if partition.y is None:
            raise ValidationError("partition has no measured outputs")
        if prev is not None:
            end_prev = prev.grid.t0 + prev.grid.n * prev.grid.dt
            if not np.isclose(partition.grid.t0, end_prev, rtol=0, atol=1e-6 * prev.grid.dt):
                raise ValidationError("partition does not directly follow the previous one")
        self.partition = partition
        self.prev = prev
        self.system = system
        self.n_theta = n_theta
        self.m = m
        self.n_obs = partition.y.n_channels
        self.grid = partition.grid
        self.y = stack_channels(partition.y.values)
        self.dim = self.y.size
        self.truncation_tol = truncation_tol
        self.model = ResponseModel(system, partition, sensitivity)
        if prev is None:
            self.cond = ConditionalTerms.zero(self.dim)
        else:
            self.cond = ConditionalTerms.build(prev, self.grid, self.n_obs)
        self.lag_tau = np.arange(self.grid.n) * self.grid.dt
        self.n_eval = 0
        self.n_nonfinite = 0

    def decode(self, u):
        return HyperState.from_unconstrained(u, self.n_theta)

    def covariance(self, delta, J):
        return marginal_block(delta, self.grid, J, self.n_obs) - self.cond.W

    def predictive(self, delta):
        f, J = self.model(delta.mu_theta)
        cov = self.covariance(delta, J)
        return GaussianDist(f + self.cond.mean_shift, 0.5 * (cov + cov.T), self.truncation_tol)

    def _core(self, u):
        delta = self.decode(u)
        f, J = self.model(delta.mu_theta)
        if not (np.all(np.isfinite(f)) and np.all(np.isfinite(J))):
            raise FloatingPointError("non-finite model response")
        cov = self.covariance(delta, J)
        fac = factorize(cov, self.truncation_tol)
        r = self.y - f - self.cond.mean_shift
        alpha = fac.solve(r)
        value = 0.5 * (fac.logdet + float(r @ alpha) + fac.rank * LOG_2PI)
        if not np.isfinite(value):
            raise FloatingPointError("non-finite objective")
        return delta, f, J, fac, r, alpha, value

    def value(self, u):
        self.n_eval += 1
        try:
            with np.errstate(over="raise", invalid="raise"):
                return self._core(np.asarray(u, dtype=float))[-1]
        except (FloatingPointError, FactorizationError, ValidationError,
                np.linalg.LinAlgError, OverflowError):
            self.n_nonfinite += 1
            return PENALTY

    def value_and_grad(self, u):
        u = np.asarray(u, dtype=float)
        self.n_eval += 1
        try:
            with np.errstate(over="raise", invalid="raise"):
                delta, f, J, fac, r, alpha, value = self._core(u)
                grad = self._gradient(delta, J, fac, r, alpha)
            if not np.all(np.isfinite(grad)):
                raise FloatingPointError("non-finite gradient")
        except (FloatingPointError, FactorizationError, ValidationError,
                np.linalg.LinAlgError, OverflowError):
            self.n_nonfinite += 1
            return PENALTY, np.zeros_like(u)
        return value, grad

    def _gradient(self, delta, J, fac, r, alpha):
        # dNLL = 0.5 tr(S dC) - alpha^T df for every covariance direction dC
        n = self.grid.n
        S = fac.sensitivity(r)
        Z = np.zeros((n, n))
        for c in range(self.n_obs):
            sl = slice(c * n, (c + 1) * n)
            Z += S[sl, sl]
        d = _accel.diag_sums(Z)
        phi = delta.phi
        g_kernel = 0.5 * (lag_derivatives(self.lag_tau, phi) @ d)
        g_noise = 0.5 * phi.noise_sq * d[0]

        s2 = delta.sigma_theta_sq
        SJ = S @ J
        g_sigma = 0.5 * s2 * np.einsum("ij,ij->j", J, SJ)

        H = self.model.curvature(delta.mu_theta)
        g_mu = -(J.T @ alpha)
        for l in range(self.n_theta):
            Hl = H[l]  # (n_theta, dim): column derivatives of J w.r.t. theta_l
            g_mu[l] += np.sum(s2 * np.einsum("ij,ji->j", SJ, Hl))
        return np.concatenate([g_mu, g_sigma, g_kernel, [g_noise]])


def conditional_predictive(prev, delta, partition, system, truncation_tol=None,
                           sensitivity="auto"):
    """Gaussian of ``y_i`` given the previous partition (or the marginal for ``i = 1``)."""
    obj = PartitionObjective(partition, prev, system, delta.n_theta, delta.m,
                             truncation_tol, sensitivity)
    return obj.predictive(delta)


def negative_log_likelihood(delta_unconstrained, partition, prev, system, m=None,
                            truncation_tol=None):
    n_theta = system.n_params
    vec = np.asarray(delta_unconstrained, dtype=float)
    m_vec = (vec.size - 2 * n_theta - 1) // 3
    if m is not None and m != m_vec:
        raise ValidationError(f"vector length implies m={m_vec}, expected {m}")
    obj = PartitionObjective(partition, prev, system, n_theta, m_vec, truncation_tol)
    return obj.value(vec)


# ---------------------------------------------------------------------------
# Search space
# ---------------------------------------------------------------------------

def search_bounds(delta_ref, partition, min_rel_sigma_theta=1e-3, mu_ref=None, mu_range=3.0,
                  max_rel_sigma_theta=0.5):
    """Box bounds in unconstrained coordinates derived from the data scale.

    ``mu_theta`` stays within a factor ``mu_range`` of the reference values.
    """
    m = delta_ref.m
    mu_ref = np.abs(delta_ref.mu_theta if mu_ref is None else mu_ref)
    mu_ref = np.where(mu_ref > 0, mu_ref, 1.0)
    y = partition.y.values
    var = float(np.var(y)) if np.var(y) > 0 else 1.0
    dt = partition.dt
    dur = partition.n * dt
    lo, hi = [], []
    for s in mu_ref:
        lo.append(s / mu_range)
        hi.append(s * mu_range)
    for s in mu_ref:
        lo.append(2.0 * np.log(min_rel_sigma_theta * s))
        hi.append(2.0 * np.log(max_rel_sigma_theta * s))
    w_lo = np.log(np.pi / dur)
    w_hi = np.log(np.pi / dt)
    for _ in range(m):
        lo += [np.log(1e-8 * var), 2.0 * np.log(dt), w_lo]
        hi += [np.log(1e2 * var), 2.0 * np.log(2.0 * dur), w_hi]
    lo.append(np.log(1e-10 * var))
    hi.append(np.log(10.0 * var))
    return np.array(lo), np.array(hi)


# ---------------------------------------------------------------------------
# Partition fit
# ---------------------------------------------------------------------------

def _tiebreak_key(value, x):
    return (value,) + tuple(x)


def _minimize(obj, start, free, lo, hi, scale, opts, f_ref):
    """Minimise over the coordinates flagged in ``free``; the rest stay at ``start``."""
    base = start.copy()
    sc = scale[free]
    z0 = base[free] / sc
    bounds = list(zip(lo[free] / sc, hi[free] / sc))

    def expand(z):
        u = base.copy()
        u[free] = z * sc
        return u

    if opts.optimizer == "lbfgs":
        def fun(z):
            v, g = obj.value_and_grad(expand(z))
            return v, g[free] * sc
        res = optimize.minimize(fun, z0, jac=True, method="L-BFGS-B", bounds=bounds,
                                options={"maxiter": opts.max_iter, "ftol": opts.ftol,
                                         "gtol": opts.gtol, "maxcor": 20,
                                         "maxfun": opts.max_eval or 15000})
    elif opts.optimizer == "simplex":
        k = int(free.sum())
        res = optimize.minimize(lambda z: obj.value(expand(z)), z0, method="Nelder-Mead",
                                bounds=bounds,
                                options={"maxiter": opts.max_iter * k,
                                         "maxfev": opts.max_eval or opts.max_iter * k * 2,
                                         "xatol": opts.xtol,
                                         "fatol": opts.ftol * max(abs(f_ref), 1.0),
                                         "adaptive": True})
    else:
        raise ValidationError(f"unknown optimizer {opts.optimizer!r}")
    return expand(res.x), float(res.fun), bool(res.success), int(res.nit)


def fit_partition(partition, prev, delta_init, system, opts=None, mu_ref=None):
    """Minimise the conditional negative log-likelihood of one partition.

    Restart 0 starts at ``delta_init``; further restarts perturb it.  The best
    restart wins (lowest objective, then lexicographically smallest vector).
    For the first partition the kernel parameters are fitted alone before the
    joint search, since a poor initial kernel lets the tangent term absorb
    all model error.
    """
    opts = opts or FitOptions()
    n_theta, m = delta_init.n_theta, delta_init.m
    obj = PartitionObjective(partition, prev, system, n_theta, m, opts.truncation_tol,
                             opts.sensitivity)
    ref = mu_ref if mu_ref is not None else (
        system.theta_nominal if system.theta_nominal is not None else delta_init.mu_theta)
    ref = np.asarray(ref, dtype=float)
    lo, hi = search_bounds(delta_init, partition, opts.min_rel_sigma_theta, ref,
                           opts.mu_range, opts.max_rel_sigma_theta)
    scale = np.ones(lo.size)
    scale[:n_theta] = np.where(np.abs(ref) > 0, np.abs(ref), 1.0)
    u0 = np.clip(delta_init.to_unconstrained(), lo, hi)
    f_init = obj.value(u0)
    rng = np.random.default_rng([opts.seed, int(partition.index)])
    all_free = np.ones(lo.size, dtype=bool)
    f_start = f_init

    if opts.kernel_warmup and prev is None:
        kernel_only = all_free.copy()
        kernel_only[:2 * n_theta] = False
        u_w, f_w, _, _ = _minimize(obj, u0, kernel_only, lo, hi, scale, opts, f_init)
        if f_w < f_init:
            u0, f_start = u_w, f_w

    candidates = []
    for r in range(max(1, opts.restarts)):
        start = u0.copy()
        if r > 0:
            noise = rng.standard_normal(u0.size) * opts.restart_log_scale
            noise[:n_theta] = rng.standard_normal(n_theta) * opts.restart_mu_scale * scale[:n_theta]
            start = np.clip(u0 + noise, lo, hi)
        candidates.append(_minimize(obj, start, all_free, lo, hi, scale, opts, f_init))

    best = min(candidates, key=lambda c: _tiebreak_key(c[1], c[0]))
    u_best, f_best, ok, nit = best
    if f_best > f_start:
        # never return something worse than the starting point
        u_best, f_best = u0, f_start
    delta = HyperState.from_unconstrained(u_best, n_theta).sorted_modes()
    flags = []
    w = delta.phi.omega
    if w.size > 1 and np.any(np.diff(w) <= opts.collision_rtol * w[1:]):
        flags.append("mode-collision")
    if obj.n_nonfinite:
        flags.append(f"nonfinite-evaluations:{obj.n_nonfinite}")
    if not ok:
        flags.append("not-converged")
        warnings.warn(f"partition {partition.index}: optimizer did not converge",
                      ConvergenceWarning, stacklevel=2)
    return FitResult(delta, f_best, f_init, ok, nit, obj.n_eval, flags,
                     [c[1] for c in candidates])


def make_partition_state(partition, delta, system, opts=None, fit=None):
    opts = opts or FitOptions()
    model = ResponseModel(system, partition, opts.sensitivity)
    f, J = model(delta.mu_theta)
    B = marginal_block(delta, partition.grid, J, partition.y.n_channels)
    fac = factorize(B, opts.truncation_tol)
    return PartitionState(partition.index, partition, delta, partition.grid,
                          stack_channels(partition.y.values), f, J, fac,
                          model.end_state(delta.mu_theta), fit)


# ---------------------------------------------------------------------------
# Random walk and prediction
# ---------------------------------------------------------------------------

def estimate_Q(deltas_unconstrained, n_theta, m):
    """Mean outer product of successive differences, block-diagonal part only."""
    D = np.atleast_2d(np.asarray(deltas_unconstrained, dtype=float))
    if D.shape[0] < 2:
        raise ValidationError("at least two states are needed to estimate Q")
    diffs = np.diff(D, axis=0)
    Q = diffs.T @ diffs / diffs.shape[0]
    mask = np.zeros_like(Q, dtype=bool)
    for sl in delta_blocks(n_theta, m):
        mask[sl, sl] = True
    Q = np.where(mask, Q, 0.0)
    return RandomWalkCov(0.5 * (Q + Q.T), n_theta, m)


def _psd_factor(Q):
    vals, vecs = np.linalg.eigh(Q)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample_next_delta(delta_last, Q, n_samples, seed):
    """Draws of the next partition's hyper-parameters from the random walk."""
    if n_samples < 1:
        raise ValidationError("at least one sample is required")
    Qm = Q.Q if isinstance(Q, RandomWalkCov) else np.asarray(Q, dtype=float)
    u = delta_last.to_unconstrained()
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_samples, u.size))
    draws = u + z @ _psd_factor(Qm).T
    return [HyperState.from_unconstrained(d, delta_last.n_theta) for d in draws]


def parameter_summary(delta_last, Q):
    """Mean and standard deviation of ``theta`` for the next partition.

    ``theta ~ N(mu, sigma^2)`` with ``mu`` and ``log sigma^2`` following the
    random walk from ``delta_last``; the variance is ``Var(mu) + E[sigma^2]``.
    """
    Qm = Q.Q if isinstance(Q, RandomWalkCov) else np.asarray(Q, dtype=float)
    k = delta_last.n_theta
    q_mu = np.diag(Qm)[:k]
    q_s = np.diag(Qm)[k:2 * k]
    e_s2 = delta_last.sigma_theta_sq * np.exp(0.5 * q_s)
    return delta_last.mu_theta.copy(), np.sqrt(q_mu + e_s2)


def predict_response(x_new, samples, last, system, full_cov=None, max_drop_fraction=0.1,
                     sensitivity="auto", max_full_dim=3000):
    """Equal-weight mixture prediction of the window ``x_new``.

    ``x_new`` is a partition (``y`` may be None) that follows ``last``.  Its
    initial state defaults to the end state of ``last``.
    """
    samples = list(samples)
    if not samples:
        raise ValidationError("at least one hyper-parameter sample is required")
    if x_new.initial_state is None:
        x_new = x_new.with_initial_state(last.end_state)
    n_obs = last.n_obs
    if x_new.n == 0:
        empty = np.zeros((0, n_obs))
        return PredictiveResult(x_new.times, empty, empty, np.zeros((0, 0)), samples,
                                len(samples), 0, None)
    grid = x_new.grid
    dim = grid.n * n_obs
    full = dim <= max_full_dim if full_cov is None else bool(full_cov)
    cond = ConditionalTerms.build(last, grid, n_obs, full=full)
    model = ResponseModel(system, x_new, sensitivity)
    means, covs, diags = [], [], []
    dropped = 0
    for s in samples:
        try:
            with np.errstate(over="raise", invalid="raise"):
                f, J = model(s.mu_theta)
                mean = f + cond.mean_shift
                if full:
                    cov = marginal_block(s, grid, J, n_obs) - cond.W
                    cov = 0.5 * (cov + cov.T)
                    diag = np.diag(cov)
                else:
                    cov = None
                    diag = (s.phi.total_variance() + (J * J) @ s.sigma_theta_sq
                            - cond.W_diag)
            if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(diag))):
                raise FloatingPointError
        except (FloatingPointError, OverflowError, np.linalg.LinAlgError, ValidationError):
            dropped += 1
            continue
        means.append(mean)
        diags.append(diag)
        if full:
            covs.append(cov)
    if dropped > max_drop_fraction * len(samples):
        raise FactorizationError(f"{dropped} of {len(samples)} predictive samples failed")
    M = np.stack(means)
    if full:
        mean, cov = mixture_moments(list(zip(means, covs)))
        var = np.diag(cov).copy()
    else:
        mean = M.mean(axis=0)
        var = (np.mean(M * M, axis=0) + np.mean(diags, axis=0)) - mean * mean
        cov = None
    return PredictiveResult(x_new.times, unstack_channels(mean, n_obs),
                            unstack_channels(var, n_obs), cov, samples, len(means), dropped,
                            last.partition.y.names)


def noise_only_prediction(x_new, delta, last, system):
    """Baseline band: physics mean with only the white-noise variance."""
    if x_new.initial_state is None:
        x_new = x_new.with_initial_state(last.end_state)
    f, _ = ResponseModel(system, x_new)(delta.mu_theta)
    n_obs = last.n_obs
    mean = unstack_channels(f, n_obs)
    var = np.full_like(mean, delta.phi.noise_sq)
    return PredictiveResult(x_new.times, mean, var, None, [delta], 1, 0, last.partition.y.names)


# ---------------------------------------------------------------------------
# Initialisation and the full pipeline
# ---------------------------------------------------------------------------

def model_residuals(parts, system, theta):
    x = TimeSeries(np.concatenate([p.times for p in parts]),
                   np.concatenate([p.x.values for p in parts]))
    y = np.concatenate([p.y.values for p in parts])
    from .structure import simulate_response
    f = simulate_response(system, x, theta, parts[0].initial_state).values
    return y - f


def initial_delta(parts, system, m, mu_theta=None, rel_sigma=0.1):
    """Starting hyper-parameters from the nominal model and the residual spectrum.

    Kernel frequencies sit at the most prominent residual peaks (extra modes
    go to the strongest remaining bins), each mode takes an equal share of
    the residual variance, envelope lengths follow the half-power width of
    each peak and the noise variance starts at 1% of the residual variance.
    """
    parts = list(parts)
    mu = np.asarray(system.theta_nominal if mu_theta is None else mu_theta, dtype=float)
    s2 = (rel_sigma * np.where(np.abs(mu) > 0, np.abs(mu), 1.0)) ** 2
    dt = parts[0].dt
    res = model_residuals(parts, system, mu)
    var = float(np.var(res)) or 1.0
    nperseg = None if res.shape[0] >= MIN_SAMPLES else res.shape[0]
    if res.shape[0] < MIN_SAMPLES:
        res = np.vstack([res, np.zeros((MIN_SAMPLES - res.shape[0], res.shape[1]))])
    spec = residual_psd(res, dt, nperseg=nperseg)
    omegas = suggest_modes(spec, m)
    power = spec.power.copy()
    power[0] = -np.inf
    for w in omegas:
        i = int(round(w / (2 * np.pi) / spec.df))
        power[max(i - 3, 0):i + 4] = -np.inf
    while len(omegas) < m:
        i = int(np.argmax(power))
        if not np.isfinite(power[i]):
            i = len(omegas) + 1
        omegas.append(float(2 * np.pi * spec.frequencies[max(i, 1)]))
        power[max(i - 3, 0):i + 4] = -np.inf
    dur = parts[0].n * dt
    len_sq = []
    for w in omegas:
        ell = 4.0 * np.sqrt(np.log(2.0)) / peak_fwhm(spec, w)
        ell = float(np.clip(ell, 2.0 * dt, dur))
        len_sq.append(ell * ell)
    phi = MmteParams(np.full(m, var / m), len_sq, omegas, 0.01 * var).sorted()
    return HyperState(mu, s2, phi)


def run_pipeline(dataset, system, delta0=None, opts=None, m=3, x_next=None, n_samples=None,
                 seed=None):
    """Sequential MAP fits over all partitions, random-walk covariance,
    hyper-parameter sampling and (optionally) prediction of ``x_next``."""
    t_start = time.perf_counter()
    opts = opts or FitOptions()
    parts = list(dataset)
    if not parts:
        raise ValidationError("dataset has no partitions")
    for a, b in zip(parts, parts[1:]):
        if b.start != a.start + a.n:
            raise ValidationError("partitions must be contiguous and time-ordered")
    if delta0 is None:
        delta0 = initial_delta(parts, system, m)
    mu_ref = delta0.mu_theta
    deltas = [delta0]
    states = []
    diag = {"partitions": []}
    prev = None
    for part in parts:
        t0 = time.perf_counter()
        if opts.chain_state and prev is not None and part.initial_state is None:
            part = part.with_initial_state(prev.end_state)
        fit = fit_partition(part, prev, deltas[-1], system, opts, mu_ref=mu_ref)
        state = make_partition_state(part, fit.delta, system, opts, fit)
        states.append(state)
        deltas.append(fit.delta)
        prev = state
        diag["partitions"].append({
            "index": part.index, "nll": fit.nll, "nll_init": fit.nll_init,
            "converged": fit.converged, "iterations": fit.n_iter, "evaluations": fit.n_eval,
            "rank": state.factorization.rank, "dim": state.factorization.dim,
            "truncated": bool(state.factorization.truncated), "flags": fit.flags,
            "seconds": time.perf_counter() - t0,
        })
    # The starting guess is not an estimate; differencing against it would
    # inflate Q with the initial correction, so it only enters when N_D = 1.
    walk = deltas if len(deltas) == 2 else deltas[1:]
    Q = estimate_Q([d.to_unconstrained() for d in walk], delta0.n_theta, delta0.m)
    n_s = opts.n_samples if n_samples is None else n_samples
    seed = opts.seed if seed is None else seed
    samples = sample_next_delta(deltas[-1], Q, n_s, seed)
    theta_mean, theta_std = parameter_summary(deltas[-1], Q)
    predictive = None
    if x_next is not None:
        predictive = predict_response(x_next, samples, states[-1], system,
                                      sensitivity=opts.sensitivity)
    diag["seconds"] = time.perf_counter() - t_start
    diag["converged"] = all(p["converged"] for p in diag["partitions"])
    return PipelineResult(deltas, states, Q, samples, theta_mean, theta_std, predictive, diag)
