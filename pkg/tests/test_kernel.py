import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from mmtesid.exceptions import FactorizationError, ValidationError
from mmtesid.kernel import (CholeskyFactorization, MmteParams, TimeGrid, assemble_block,
                            factorize, kernel_psd, kernel_value, lag_derivatives,
                            svd_truncate, tangent_covariance)


def direct_kernel(tau, s2, l2, w):
    # independent scalar evaluation with the math module
    return sum(a * math.exp(-tau * tau / b) * math.cos(c * tau) for a, b, c in zip(s2, l2, w))


def quad_psd(w, phi):
    # S(w) = 2 int_0^inf k(t) cos(w t) dt + noise, by adaptive quadrature
    upper = 12.0 * math.sqrt(max(phi.len_sq))
    val, _ = integrate.quad(lambda t: direct_kernel(t, phi.sigma_sq, phi.len_sq, phi.omega)
                            * math.cos(w * t), 0.0, upper, limit=400, epsabs=1e-12,
                            epsrel=1e-10)
    return 2.0 * val + phi.noise_sq


phis = st.builds(
    lambda m, data: MmteParams(*[data[k][:m] for k in range(3)], data[3][0]),
    st.integers(1, 3),
    st.tuples(st.lists(st.floats(0.1, 5.0), min_size=3, max_size=3),
              st.lists(st.floats(0.2, 6.0), min_size=3, max_size=3),
              st.lists(st.floats(0.5, 15.0), min_size=3, max_size=3),
              st.lists(st.floats(0.01, 1.0), min_size=1, max_size=1)))


# --- parameters --------------------------------------------------------------

def test_params_roundtrip_and_validation():
    phi = MmteParams.from_modes([(2, 5, 2), (8, 2.5, 10)], 0.5)
    np.testing.assert_array_equal(MmteParams.from_vector(phi.as_vector()).as_vector(),
                                  phi.as_vector())
    assert phi.m == 2
    assert phi.total_variance() == pytest.approx(10.5)
    with pytest.raises(ValidationError):
        MmteParams([1, 2], [1], [1, 2], 0.1)
    with pytest.raises(ValidationError):
        MmteParams([1.0], [-1.0], [1.0], 0.1).validate()
    with pytest.raises(ValidationError):
        MmteParams.from_vector([1.0, 2.0])
    with pytest.raises(ValueError):
        phi.sigma_sq[0] = 3.0


def test_sorted_orders_by_frequency():
    phi = MmteParams([1, 2, 3], [1, 1, 1], [9, 3, 6], 0.1).sorted()
    np.testing.assert_array_equal(phi.omega, [3, 6, 9])
    np.testing.assert_array_equal(phi.sigma_sq, [2, 3, 1])


# --- kernel value ----------------------------------------------------------------

def test_zero_lag_is_total_variance(fig1_phi):
    assert kernel_value(0.0, fig1_phi) == pytest.approx(10.5, abs=1e-14)
    assert kernel_value(0.0, fig1_phi, include_noise=False) == pytest.approx(10.0, abs=1e-14)


def test_value_matches_direct_formula(fig1_phi):
    got = kernel_value(1.0, fig1_phi)
    want = direct_kernel(1.0, [2, 8], [5, 2.5], [2, 10])
    assert abs(got - want) <= 1e-12


@given(phis, st.floats(0.0, 20.0))
def test_envelope_bound_and_evenness(phi, tau):
    v = kernel_value(tau, phi, include_noise=False)
    bound = np.sum(phi.sigma_sq) * math.exp(-tau * tau / max(phi.len_sq))
    assert abs(v) <= bound + 1e-12
    assert kernel_value(-tau, phi) == kernel_value(tau, phi)


def test_decays_to_zero(fig1_phi):
    assert abs(kernel_value(50.0, fig1_phi)) < 1e-100


def test_lag_derivatives_match_finite_differences(fig1_phi):
    tau = np.linspace(0, 4, 9)
    D = lag_derivatives(tau, fig1_phi)
    base = fig1_phi.as_vector()
    for j in range(6):
        h = 1e-6
        up, dn = base.copy(), base.copy()
        up[j] *= math.exp(h)
        dn[j] *= math.exp(-h)
        fd = (kernel_value(tau, MmteParams.from_vector(up), False)
              - kernel_value(tau, MmteParams.from_vector(dn), False)) / (2 * h)
        np.testing.assert_allclose(D[j], fd, rtol=1e-6, atol=1e-8)


# --- spectral density ------------------------------------------------------------

def test_psd_matches_quadrature(fig1_phi):
    for w in np.linspace(0, 20, 11):
        assert kernel_psd(w, fig1_phi) == pytest.approx(quad_psd(w, fig1_phi), rel=1e-3)


def test_psd_peaks_near_mode_frequencies(fig1_phi):
    w = np.linspace(0, 20, 2001)
    s = kernel_psd(w, fig1_phi)
    peaks = w[1:-1][(s[1:-1] > s[:-2]) & (s[1:-1] > s[2:])]
    assert len(peaks) == 2
    np.testing.assert_allclose(peaks, [2, 10], atol=0.2)


def test_psd_white_when_amplitudes_vanish():
    phi = MmteParams([0.0, 0.0], [1.0, 2.0], [3.0, 4.0], 0.7)
    np.testing.assert_allclose(kernel_psd(np.linspace(-5, 5, 7), phi), 0.7)


@settings(max_examples=10)
@given(phis, st.floats(0.0, 1.0))
def test_wiener_khinchine(phi, frac):
    w = frac * (2 * max(phi.omega) + 10 / math.sqrt(min(phi.len_sq)))
    assert kernel_psd(w, phi) == pytest.approx(quad_psd(w, phi), rel=1e-3)
    assert kernel_psd(-w, phi) == pytest.approx(kernel_psd(w, phi), rel=1e-14)


@given(st.floats(0.5, 3.0), st.floats(0.0, 30.0), st.floats(1.0, 4.0))
def test_peak_location_for_separated_modes(ell, shift, sep):
    # separation also from the mirrored mode at -w1
    w1 = 3.5 / ell + shift
    gap = 6.5 / ell * sep
    phi = MmteParams([1.0, 1.0], [ell * ell] * 2, [w1, w1 + gap], 0.01)
    for wk in phi.omega:
        grid = np.linspace(wk - 0.5 / ell, wk + 0.5 / ell, 401)
        s = kernel_psd(grid, phi)
        i = int(np.argmax(s))
        assert 0 < i < grid.size - 1  # interior maximum inside the window


# --- covariance blocks --------------------------------------------------------------

def test_single_stamp_block(fig1_phi):
    g = TimeGrid(0.0, 0.1, 1)
    np.testing.assert_allclose(assemble_block(g, g, fig1_phi, True), [[10.5]])


def test_disjoint_grids_carry_no_noise(fig1_phi):
    a, b = TimeGrid(0.0, 0.1, 5), TimeGrid(0.5, 0.1, 5)
    with_noise = assemble_block(a, b, fig1_phi, include_noise=True)
    without = assemble_block(a, b, fig1_phi, include_noise=False)
    np.testing.assert_array_equal(with_noise, without)
    np.testing.assert_allclose(without, assemble_block(a.stamps, b.stamps, fig1_phi),
                               rtol=1e-12, atol=1e-14)


def test_block_is_symmetric_psd(fig1_phi):
    g = TimeGrid(0.0, 0.05, 100)
    K = assemble_block(g, g, fig1_phi, include_noise=True)
    np.testing.assert_array_equal(K, K.T)
    ev = np.linalg.eigvalsh(K)
    assert ev.min() >= -1e-10 * ev.max()


@given(phis, st.floats(-100, 100), st.integers(1, 40))
def test_grid_and_stamp_paths_agree_and_shift_invariant(phi, t0, n):
    g = TimeGrid(t0, 0.05, n)
    K = assemble_block(g, g, phi, include_noise=True)
    np.testing.assert_array_equal(K, assemble_block(g.shifted(3.7), g.shifted(3.7), phi, True))
    dense = assemble_block(g.stamps - t0, g.stamps - t0, phi, include_noise=True)
    np.testing.assert_allclose(K, dense, rtol=1e-10, atol=1e-12)
    assert np.linalg.eigvalsh(K).min() > 0


def test_grid_validation():
    with pytest.raises(ValidationError):
        TimeGrid(0.0, -0.1, 3)
    with pytest.raises(ValidationError):
        TimeGrid.from_stamps([0.0, 0.1, 0.25])
    g = TimeGrid.from_stamps([1.0, 1.1, 1.2])
    assert g.n == 3 and g.dt == pytest.approx(0.1)


# --- tangent term -------------------------------------------------------------------

def test_tangent_covariance_oracles(rng):
    J = rng.standard_normal((20, 3))
    s2 = rng.uniform(0.1, 2.0, 3)
    np.testing.assert_allclose(tangent_covariance(J, s2), J @ np.diag(s2) @ J.T,
                               rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(tangent_covariance(J, np.zeros(3)), np.zeros((20, 20)))
    v = rng.standard_normal((6, 1))
    np.testing.assert_allclose(tangent_covariance(v, [1.0]), v @ v.T)
    with pytest.raises(ValidationError):
        tangent_covariance(J, [1.0, 2.0])


# --- factorizations -----------------------------------------------------------------

def test_truncation_examples(rng):
    assert svd_truncate(np.eye(8), 0.01).rank == 8
    v = rng.standard_normal(10)
    fac = svd_truncate(np.outer(v, v) + 1e-12 * np.eye(10), 0.01)
    assert fac.rank == 1
    A = rng.standard_normal((50, 50))
    C = A @ A.T
    fac = svd_truncate(C, 0.005)
    err = np.linalg.norm(C - fac.reconstruct(), 2)
    assert err <= 0.005 * fac.largest
    assert np.all(fac.values >= 0.005 * fac.largest)


def test_truncation_errors(rng):
    with pytest.raises(ValidationError):
        svd_truncate(np.zeros((3, 3)))
    with pytest.raises(ValidationError):
        svd_truncate(np.eye(3), 0.0)
    with pytest.raises(ValidationError):
        svd_truncate(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_truncated_pseudo_inverse_convention(rng):
    U, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    vals = np.array([5.0, 3.0, 1.0, 1e-6, 1e-7, 0.0])
    C = (U * vals) @ U.T
    fac = svd_truncate(C, 0.01)
    assert fac.rank == 3
    assert fac.logdet == pytest.approx(np.log(15.0))
    r = rng.standard_normal(6)
    np.testing.assert_allclose(fac.solve(r), np.linalg.pinv(C, rcond=1e-3) @ r, atol=1e-9)


def test_cholesky_and_fallback(rng):
    A = rng.standard_normal((7, 7))
    C = A @ A.T + np.eye(7)
    fac = factorize(C)
    assert isinstance(fac, CholeskyFactorization)
    assert fac.logdet == pytest.approx(np.linalg.slogdet(C)[1])
    np.testing.assert_allclose(fac.inverse(), np.linalg.inv(C), rtol=1e-10, atol=1e-12)
    r = rng.standard_normal(7)
    assert fac.quad(r) == pytest.approx(r @ np.linalg.solve(C, r))
    singular = np.outer(r, r)
    assert factorize(singular).truncated
    with pytest.raises(FactorizationError):
        factorize(singular, fallback_tol=None)
