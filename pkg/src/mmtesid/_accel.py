"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import time.  Set ``MMTESID_NUMBA=0`` to force
the numpy path (useful for debugging and for benchmarking both paths).
"""

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

_FLAG = os.environ.get("MMTESID_NUMBA", "1").strip().lower()
USE_NUMBA = numba is not None and _FLAG not in ("0", "false", "no", "off")


def _jit(func):
    if numba is None:
        return func
    return numba.njit(cache=True, fastmath=False)(func)


# ---------------------------------------------------------------------------
# Linear state recursion  z[k+1] = Ad z[k] + Bd u[k]
# ---------------------------------------------------------------------------

def _propagate_loop(Ad, Bd, z0, u):
    n_steps = u.shape[0]
    ns = Ad.shape[0]
    ni = Bd.shape[1]
    states = np.empty((n_steps, ns))
    z = z0.copy()
    znew = np.empty(ns)
    for k in range(n_steps):
        for a in range(ns):
            states[k, a] = z[a]
        for a in range(ns):
            acc = 0.0
            for b in range(ns):
                acc += Ad[a, b] * z[b]
            for b in range(ni):
                acc += Bd[a, b] * u[k, b]
            znew[a] = acc
        for a in range(ns):
            z[a] = znew[a]
    return states


def _propagate_numpy(Ad, Bd, z0, u):
    n_steps = u.shape[0]
    states = np.empty((n_steps, Ad.shape[0]))
    forced = u @ Bd.T
    z = z0.copy()
    for k in range(n_steps):
        states[k] = z
        z = Ad @ z + forced[k]
    return states


# ---------------------------------------------------------------------------
# MMTE kernel on arbitrary (non-uniform) stamps
# ---------------------------------------------------------------------------

def _mmte_block_loop(t_row, t_col, sig, len_sq, omega):
    nr = t_row.shape[0]
    nc = t_col.shape[0]
    m = sig.shape[0]
    out = np.empty((nr, nc))
    for p in range(nr):
        for q in range(nc):
            tau = t_col[q] - t_row[p]
            if tau < 0.0:
                tau = -tau
            acc = 0.0
            for k in range(m):
                acc += sig[k] * np.exp(-tau * tau / len_sq[k]) * np.cos(omega[k] * tau)
            out[p, q] = acc
    return out


def _mmte_block_numpy(t_row, t_col, sig, len_sq, omega):
    tau = np.abs(t_col[None, :] - t_row[:, None])
    out = np.zeros_like(tau)
    for s, l2, w in zip(sig, len_sq, omega):
        out += s * np.exp(-tau * tau / l2) * np.cos(w * tau)
    return out


# ---------------------------------------------------------------------------
# Diagonal sums of a square matrix: d[j] = sum_p Z[p, p + j] + Z[p + j, p]
# (j = 0 counted once).  Used to contract a symmetric matrix against a
# symmetric Toeplitz derivative in O(n) per parameter.
# ---------------------------------------------------------------------------

def _diag_sums_loop(Z):
    n = Z.shape[0]
    out = np.zeros(n)
    for p in range(n):
        out[0] += Z[p, p]
    for j in range(1, n):
        acc = 0.0
        for p in range(n - j):
            acc += Z[p, p + j] + Z[p + j, p]
        out[j] = acc
    return out


def _diag_sums_numpy(Z):
    n = Z.shape[0]
    out = np.empty(n)
    out[0] = np.trace(Z)
    for j in range(1, n):
        out[j] = np.trace(Z, offset=j) + np.trace(Z, offset=-j)
    return out


# ---------------------------------------------------------------------------
# Symmetric Toeplitz fill from lag values
# ---------------------------------------------------------------------------

def _toeplitz_loop(first_col, first_row):
    nr = first_col.shape[0]
    nc = first_row.shape[0]
    out = np.empty((nr, nc))
    for p in range(nr):
        for q in range(nc):
            if q >= p:
                out[p, q] = first_row[q - p]
            else:
                out[p, q] = first_col[p - q]
    return out


def _toeplitz_numpy(first_col, first_row):
    nr = first_col.shape[0]
    nc = first_row.shape[0]
    idx = np.arange(nc)[None, :] - np.arange(nr)[:, None]
    vals = np.concatenate([first_col[::-1], first_row[1:]])
    return vals[idx + nr - 1]


_propagate_jit = _jit(_propagate_loop)
_mmte_block_jit = _jit(_mmte_block_loop)
_diag_sums_jit = _jit(_diag_sums_loop)
_toeplitz_jit = _jit(_toeplitz_loop)

BACKENDS = {
    "numpy": {
        "propagate": _propagate_numpy,
        "mmte_block": _mmte_block_numpy,
        "diag_sums": _diag_sums_numpy,
        "toeplitz": _toeplitz_numpy,
    },
}
if numba is not None:
    BACKENDS["numba"] = {
        "propagate": _propagate_jit,
        "mmte_block": _mmte_block_jit,
        "diag_sums": _diag_sums_jit,
        "toeplitz": _toeplitz_jit,
    }

BACKEND = "numba" if USE_NUMBA else "numpy"


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def propagate(Ad, Bd, z0, u, backend=None):
    """Run ``z[k+1] = Ad z[k] + Bd u[k]`` and return the states ``z[0..n-1]``."""
    fn = BACKENDS[backend or BACKEND]["propagate"]
    return fn(_f64(Ad), _f64(Bd), _f64(z0), _f64(u))


def mmte_block(t_row, t_col, sig, len_sq, omega, backend=None):
    fn = BACKENDS[backend or BACKEND]["mmte_block"]
    return fn(_f64(t_row), _f64(t_col), _f64(sig), _f64(len_sq), _f64(omega))


def diag_sums(Z, backend=None):
    fn = BACKENDS[backend or BACKEND]["diag_sums"]
    return fn(_f64(Z))


def toeplitz(first_col, first_row, backend=None):
    """Toeplitz matrix with ``out[p, q] = first_row[q - p]`` for ``q >= p``
    and ``first_col[p - q]`` otherwise."""
    fn = BACKENDS[backend or BACKEND]["toeplitz"]
    return fn(_f64(first_col), _f64(first_row))
