"""Linear lumped-mass structural models.

Responses are computed with an exact zero-order-hold discretisation of the
first-order state-space form, so the only approximation is that inputs are
held constant over each sampling interval.
"""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg as la

from . import _accel
from .exceptions import FactorizationError, ValidationError
from .series import TimeSeries, stack_channels


@dataclass(frozen=True)
class AffineStiffness:
    """``K(theta) = base + sum_j theta_j * terms[j]``."""

    base: np.ndarray
    terms: tuple

    def __call__(self, theta):
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.size != len(self.terms):
            raise ValidationError(f"expected {len(self.terms)} parameters, got {theta.size}")
        K = np.array(self.base, dtype=float, copy=True)
        for t, Kj in zip(theta, self.terms):
            K += t * Kj
        return K

    @property
    def n_params(self):
        return len(self.terms)

    def derivative(self, j):
        return self.terms[j]


@dataclass(frozen=True)
class RayleighDamping:
    """``C = alpha * K + beta * M`` evaluated at the nominal stiffness."""

    alpha: float
    beta: float


@dataclass(frozen=True)
class ModalDamping:
    """Modal damping ``C = sum_i 2 w_i z_i M p_i p_i^T M / (p_i^T M p_i)``.

    Frequencies and shapes default to the nominal undamped modes.
    """

    ratios: tuple
    frequencies: Optional[tuple] = None
    shapes: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ModalProperties:
    frequencies: np.ndarray
    damping_ratios: np.ndarray
    shapes: np.ndarray


@dataclass(frozen=True)
class StructuralSystem:
    mass: np.ndarray
    damping: np.ndarray
    stiffness_builder: Callable
    observed_dofs: tuple
    input_map: np.ndarray
    dt: float
    feedthrough: Optional[np.ndarray] = None
    theta_nominal: Optional[np.ndarray] = None
    name: str = "system"
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.mass, dtype=float))
        C = np.atleast_2d(np.asarray(self.damping, dtype=float))
        B = np.asarray(self.input_map, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        n = M.shape[0]
        obs = tuple(int(i) for i in np.atleast_1d(self.observed_dofs))
        if M.shape != (n, n) or C.shape != (n, n) or B.shape[0] != n:
            raise ValidationError("mass, damping and input map sizes disagree")
        if len(set(obs)) != len(obs) or any(i < 0 or i >= n for i in obs):
            raise ValidationError(f"observed DOFs {obs} must be distinct and in [0, {n})")
        if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(np.abs(M).max(), 1.0)):
            raise ValidationError("mass matrix must be symmetric")
        if np.any(la.eigvalsh(M) <= 0):
            raise FactorizationError("mass matrix is not positive definite")
        cscale = max(np.abs(C).max(), 1.0)
        if not np.allclose(C, C.T, rtol=0, atol=1e-10 * cscale):
            raise ValidationError("damping matrix must be symmetric")
        if n and la.eigvalsh(C).min() < -1e-9 * cscale:
            raise ValidationError("damping matrix has negative eigenvalues")
        if self.dt <= 0:
            raise ValidationError("dt must be positive")
        D = self.feedthrough
        if D is not None:
            D = np.atleast_2d(np.asarray(D, dtype=float))
            if D.shape != (len(obs), B.shape[1]):
                raise ValidationError("feedthrough must be (n_observed, n_inputs)")
        object.__setattr__(self, "mass", M)
        object.__setattr__(self, "damping", 0.5 * (C + C.T))
        object.__setattr__(self, "input_map", B)
        object.__setattr__(self, "observed_dofs", obs)
        object.__setattr__(self, "feedthrough", D)
        if self.theta_nominal is not None:
            object.__setattr__(self, "theta_nominal",
                               np.atleast_1d(np.asarray(self.theta_nominal, dtype=float)))

    @property
    def n_dof(self):
        return self.mass.shape[0]

    @property
    def n_obs(self):
        return len(self.observed_dofs)

    @property
    def n_inputs(self):
        return self.input_map.shape[1]

    @property
    def n_params(self):
        if hasattr(self.stiffness_builder, "n_params"):
            return self.stiffness_builder.n_params
        if self.theta_nominal is not None:
            return self.theta_nominal.size
        raise AttributeError("parameter count unknown for this stiffness builder")

    @property
    def is_affine(self):
        return isinstance(self.stiffness_builder, AffineStiffness)

    def stiffness(self, theta):
        K = np.asarray(self.stiffness_builder(np.asarray(theta, dtype=float)), dtype=float)
        return 0.5 * (K + K.T)

    @property
    def mass_inv(self):
        if "minv" not in self._cache:
            self._cache["minv"] = la.inv(self.mass)
        return self._cache["minv"]

    def with_damping(self, damping):
        return StructuralSystem(self.mass, damping, self.stiffness_builder, self.observed_dofs,
                                self.input_map, self.dt, self.feedthrough, self.theta_nominal,
                                self.name)

    def with_observed(self, observed_dofs):
        D = self.feedthrough
        if D is not None:
            rows = [self.observed_dofs.index(i) for i in observed_dofs]
            D = D[rows]
        return StructuralSystem(self.mass, self.damping, self.stiffness_builder, observed_dofs,
                                self.input_map, self.dt, D, self.theta_nominal, self.name)


# ---------------------------------------------------------------------------
# Model construction
# ---------------------------------------------------------------------------

def story_pattern(n_dof, story):
    """Unit stiffness pattern of story ``story`` in a fixed-base shear chain."""
    P = np.zeros((n_dof, n_dof))
    P[story, story] += 1.0
    if story > 0:
        P[story - 1, story - 1] += 1.0
        P[story, story - 1] -= 1.0
        P[story - 1, story] -= 1.0
    return P


def shear_stiffness(story_k):
    """Tridiagonal stiffness of a fixed-base shear chain (first story at the base)."""
    k = np.atleast_1d(np.asarray(story_k, dtype=float))
    K = np.zeros((k.size, k.size))
    for j, kj in enumerate(k):
        K += kj * story_pattern(k.size, j)
    return K


def modal_damping_matrix(mass, frequencies, ratios, shapes):
    """Damping matrix assembled mode by mode from target ratios."""
    M = np.asarray(mass, dtype=float)
    Phi = np.atleast_2d(np.asarray(shapes, dtype=float))
    w = np.atleast_1d(np.asarray(frequencies, dtype=float))
    z = np.atleast_1d(np.asarray(ratios, dtype=float))
    n = M.shape[0]
    if Phi.shape != (n, n) or w.size != n or z.size != n:
        raise ValidationError("modal damping needs one frequency, ratio and shape per DOF")
    if np.linalg.matrix_rank(Phi) < n:
        raise ValidationError("mode shapes are rank deficient")
    gen = Phi.T @ M @ Phi
    d = np.sqrt(np.abs(np.diag(gen)))
    ortho = gen / np.outer(d, d)
    if np.max(np.abs(ortho - np.eye(n))) > 1e-6:
        raise ValidationError("mode shapes are not mass-orthogonal")
    C = np.zeros_like(M)
    for i in range(n):
        Mp = M @ Phi[:, i]
        C += 2.0 * w[i] * z[i] * np.outer(Mp, Mp) / gen[i, i]
    return 0.5 * (C + C.T)


def _undamped_modes(M, K):
    vals, vecs = la.eigh(K, M)
    order = np.argsort(vals)
    vals = vals[order]
    vecs = vecs[:, order]
    # eigh(K, M) already returns M-normalised vectors; fix the sign convention
    for i in range(vecs.shape[1]):
        j = np.argmax(np.abs(vecs[:, i]))
        if vecs[j, i] < 0:
            vecs[:, i] = -vecs[:, i]
    return np.sqrt(np.clip(vals, 0.0, None)), vecs


def build_damping(M, K, spec):
    if spec is None:
        return np.zeros_like(M)
    if isinstance(spec, RayleighDamping):
        return spec.alpha * K + spec.beta * M
    if isinstance(spec, ModalDamping):
        n = M.shape[0]
        if len(spec.ratios) != n:
            raise ValidationError(f"modal damping needs {n} ratios, got {len(spec.ratios)}")
        w_nom, phi_nom = _undamped_modes(M, K)
        w = w_nom if spec.frequencies is None else np.sort(np.asarray(spec.frequencies, float))
        phi = phi_nom if spec.shapes is None else np.asarray(spec.shapes, dtype=float)
        return modal_damping_matrix(M, w, spec.ratios, phi)
    raise ValidationError(f"unknown damping specification {spec!r}")


def build_shear_frame(masses, theta, damping_spec=None, *, observed_dofs=None, input_map=None,
                      feedthrough=None, dt=0.001, stiffness_scale=1.0, free=None,
                      parameterization="absolute", name="shear_frame"):
    """Fixed-base shear frame with story stiffnesses ``theta * stiffness_scale``.

    ``free`` lists the stories whose stiffness is identified (default all);
    the remaining stories are frozen at their nominal values.  With
    ``parameterization="scaling"`` the identified parameters multiply the
    nominal story stiffness (nominal value 1); with ``"absolute"`` they are
    the story stiffnesses themselves in units of ``stiffness_scale``.
    """
    m = np.atleast_1d(np.asarray(masses, dtype=float))
    th = np.atleast_1d(np.asarray(theta, dtype=float))
    if np.any(m <= 0):
        raise ValidationError("masses must be strictly positive")
    if th.size != m.size:
        raise ValidationError("one story stiffness per mass is required")
    if np.any(th <= 0):
        raise ValidationError("story stiffnesses must be strictly positive")
    n = m.size
    free = tuple(range(n)) if free is None else tuple(int(j) for j in free)
    k_abs = th * stiffness_scale
    base = np.zeros((n, n))
    for j in range(n):
        if j not in free:
            base += k_abs[j] * story_pattern(n, j)
    if parameterization == "absolute":
        terms = tuple(stiffness_scale * story_pattern(n, j) for j in free)
        nominal = th[list(free)]
    elif parameterization == "scaling":
        terms = tuple(k_abs[j] * story_pattern(n, j) for j in free)
        nominal = np.ones(len(free))
    else:
        raise ValidationError(f"unknown parameterization {parameterization!r}")
    builder = AffineStiffness(base, terms)
    M = np.diag(m)
    K = builder(nominal)
    C = build_damping(M, K, damping_spec)
    if observed_dofs is None:
        observed_dofs = tuple(range(n))
    if input_map is None:
        input_map = np.zeros((n, 1))
        input_map[-1, 0] = 1.0
    return StructuralSystem(M, C, builder, observed_dofs, input_map, dt, feedthrough,
                            nominal, name)


def base_excitation_maps(masses, observed_dofs):
    """Input map and feedthrough for ground acceleration input with absolute
    acceleration outputs (relative coordinates internally)."""
    m = np.atleast_1d(np.asarray(masses, dtype=float))
    B = -m[:, None]
    D = np.ones((len(observed_dofs), 1))
    return B, D


def build_benchmark_frame(theta=(1.0, 1.0), damping_spec=None, dt=0.001, observed_dofs=(3, 6)):
    """12-DOF lumped idealisation of a four-story braced frame.

    DOFs are ordered per floor as (x, y, rotation).  The x stiffness of
    stories 2 and 3 is scaled by ``theta``; a horizontal force acts on the
    fourth floor in x.  Mass and stiffness values are representative of a
    small-scale steel frame and are not published benchmark values.
    """
    masses = np.array([3452.4, 2652.4, 2652.4, 1809.9])
    inertia = np.array([3819.4, 2928.0, 2928.0, 1996.8])
    kx = np.full(4, 1.0e8)
    ky = np.full(4, 6.8e7)
    kr = np.full(4, 2.3e8)
    n = 12
    M = np.zeros((n, n))
    for f in range(4):
        M[3 * f, 3 * f] = masses[f]
        M[3 * f + 1, 3 * f + 1] = masses[f]
        M[3 * f + 2, 3 * f + 2] = inertia[f]

    def expand(K4, comp):
        out = np.zeros((n, n))
        idx = [3 * f + comp for f in range(4)]
        out[np.ix_(idx, idx)] = K4
        return out

    base = expand(shear_stiffness(kx * np.array([1, 0, 0, 1])), 0)
    base += expand(shear_stiffness(ky), 1) + expand(shear_stiffness(kr), 2)
    terms = (expand(kx[1] * story_pattern(4, 1), 0), expand(kx[2] * story_pattern(4, 2), 0))
    builder = AffineStiffness(base, terms)
    K = builder(np.asarray(theta, dtype=float))
    C = build_damping(M, K, damping_spec)
    B = np.zeros((n, 1))
    B[9, 0] = 1.0
    return StructuralSystem(M, C, builder, tuple(observed_dofs), B, dt, None,
                            np.ones(2), "benchmark_12dof")


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

def _state_matrices(system, K):
    n = system.n_dof
    Minv = system.mass_inv
    A = np.zeros((2 * n, 2 * n))
    A[:n, n:] = np.eye(n)
    A[n:, :n] = -Minv @ K
    A[n:, n:] = -Minv @ system.damping
    Bf = np.zeros((2 * n, system.n_inputs))
    Bf[n:] = Minv @ system.input_map
    return A, Bf


def _zoh(A, B, dt):
    ns, ni = B.shape
    aug = np.zeros((ns + ni, ns + ni))
    aug[:ns, :ns] = A
    aug[:ns, ns:] = B
    E = la.expm(aug * dt)
    return E[:ns, :ns], E[:ns, ns:]


def _output_matrices(system, K):
    n = system.n_dof
    S = np.zeros((system.n_obs, n))
    S[np.arange(system.n_obs), list(system.observed_dofs)] = 1.0
    SMinv = S @ system.mass_inv
    Cout = np.hstack([-SMinv @ K, -SMinv @ system.damping])
    Dout = SMinv @ system.input_map
    if system.feedthrough is not None:
        Dout = Dout + system.feedthrough
    return Cout, Dout


def _check_inputs(system, excitation, initial_state):
    u = np.asarray(excitation.values, dtype=float)
    if u.shape[1] != system.n_inputs:
        raise ValidationError(
            f"excitation has {u.shape[1]} channels, input map expects {system.n_inputs}")
    if len(excitation) > 1 and not np.isclose(excitation.dt, system.dt, rtol=1e-9):
        raise ValidationError(f"excitation step {excitation.dt} differs from system dt {system.dt}")
    z0 = np.zeros(2 * system.n_dof) if initial_state is None else np.asarray(initial_state, float)
    if z0.shape != (2 * system.n_dof,):
        raise ValidationError(f"initial state must have length {2 * system.n_dof}")
    return u, z0


def simulate_states(system, excitation, theta, initial_state=None):
    """State trajectory ``[u, v]`` at every sample (state before the step)."""
    u, z0 = _check_inputs(system, excitation, initial_state)
    K = system.stiffness(theta)
    A, Bf = _state_matrices(system, K)
    Ad, Bd = _zoh(A, Bf, system.dt)
    return _accel.propagate(Ad, Bd, z0, u)


def simulate_response(system, excitation, theta, initial_state=None):
    """Accelerations at the observed DOFs, one row per excitation sample."""
    u, z0 = _check_inputs(system, excitation, initial_state)
    K = system.stiffness(theta)
    A, Bf = _state_matrices(system, K)
    Ad, Bd = _zoh(A, Bf, system.dt)
    states = _accel.propagate(Ad, Bd, z0, u)
    Cout, Dout = _output_matrices(system, K)
    y = states @ Cout.T + u @ Dout.T
    names = tuple(f"acc{d}" for d in system.observed_dofs)
    return TimeSeries(excitation.times, y, names)


def final_state(system, excitation, theta, initial_state=None):
    """State after the last sample (i.e. at the start of the next window)."""
    u, z0 = _check_inputs(system, excitation, initial_state)
    K = system.stiffness(theta)
    A, Bf = _state_matrices(system, K)
    Ad, Bd = _zoh(A, Bf, system.dt)
    states = _accel.propagate(Ad, Bd, z0, u)
    if len(u) == 0:
        return z0
    return Ad @ states[-1] + Bd @ u[-1]


def _exact_sensitivities(system, u, z0, theta):
    """Response and its exact parameter gradient for affine stiffness models."""
    n = system.n_dof
    ns = 2 * n
    npar = system.n_params
    K = system.stiffness(theta)
    A, Bf = _state_matrices(system, K)
    Minv = system.mass_inv
    size = ns * (1 + npar)
    A_aug = np.zeros((size, size))
    B_aug = np.zeros((size, system.n_inputs))
    A_aug[:ns, :ns] = A
    B_aug[:ns] = Bf
    Cout, Dout = _output_matrices(system, K)
    C_aug = np.zeros((system.n_obs * (1 + npar), size))
    C_aug[:system.n_obs, :ns] = Cout
    S = np.zeros((system.n_obs, n))
    S[np.arange(system.n_obs), list(system.observed_dofs)] = 1.0
    for j in range(npar):
        Kj = system.stiffness_builder.derivative(j)
        blk = slice(ns * (j + 1), ns * (j + 2))
        A_aug[blk, blk] = A
        A_aug[ns * (j + 1) + n: ns * (j + 2), :n] = -Minv @ Kj
        rows = slice(system.n_obs * (j + 1), system.n_obs * (j + 2))
        C_aug[rows, blk] = Cout
        C_aug[rows, :n] = -S @ Minv @ Kj
    Ad, Bd = _zoh(A_aug, B_aug, system.dt)
    z_aug0 = np.zeros(size)
    z_aug0[:ns] = z0
    states = _accel.propagate(Ad, Bd, z_aug0, u)
    out = states @ C_aug.T
    y = out[:, :system.n_obs] + u @ Dout.T
    sens = out[:, system.n_obs:].reshape(len(u), npar, system.n_obs)
    return y, sens


def fd_step(theta_j):
    return max(1e-6 * abs(theta_j), 1e-8)


def response_sensitivities(system, excitation, theta, initial_state=None, method="fd",
                           return_response=False):
    """Gradient matrix ``J`` with rows ordered like :func:`stack_channels`.

    ``method`` is ``"fd"`` (central differences, step ``max(1e-6 |theta|, 1e-8)``),
    ``"exact"`` (sensitivity equations, affine stiffness only) or ``"auto"``.
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    u, z0 = _check_inputs(system, excitation, initial_state)
    if method == "auto":
        method = "exact" if system.is_affine else "fd"
    if method == "exact":
        if not system.is_affine:
            raise ValidationError("exact sensitivities need an affine stiffness builder")
        y, sens = _exact_sensitivities(system, u, z0, theta)
        J = np.column_stack([stack_channels(sens[:, j, :]) for j in range(theta.size)])
        if return_response:
            return J, TimeSeries(excitation.times, y)
        return J
    if method != "fd":
        raise ValidationError(f"unknown sensitivity method {method!r}")
    cols = []
    for j in range(theta.size):
        h = fd_step(theta[j])
        if theta[j] - h <= 0:
            raise ValidationError(f"finite-difference step underflow for parameter {j}")
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += h
        tm[j] -= h
        yp = simulate_response(system, excitation, tp, initial_state).values
        ym = simulate_response(system, excitation, tm, initial_state).values
        cols.append(stack_channels((yp - ym) / (2.0 * h)))
    J = np.column_stack(cols)
    if return_response:
        return J, simulate_response(system, excitation, theta, initial_state)
    return J


def modal_properties(system, theta):
    """Undamped modes (ascending), mass-normalised shapes and modal damping ratios."""
    K = system.stiffness(theta)
    try:
        la.cholesky(system.mass)
    except la.LinAlgError:
        raise FactorizationError("mass matrix is not positive definite") from None
    w, phi = _undamped_modes(system.mass, K)
    cmod = np.einsum("ij,ik,kj->j", phi, system.damping, phi)
    with np.errstate(divide="ignore", invalid="ignore"):
        zeta = np.where(w > 0, cmod / (2.0 * w), np.nan)
    return ModalProperties(w, zeta, phi)


def mechanical_energy(system, theta, states):
    n = system.n_dof
    K = system.stiffness(theta)
    d = states[:, :n]
    v = states[:, n:]
    return 0.5 * np.einsum("ti,ij,tj->t", v, system.mass, v) + \
        0.5 * np.einsum("ti,ij,tj->t", d, K, d)
