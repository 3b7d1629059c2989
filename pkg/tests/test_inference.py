import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mmtesid import (FitOptions, HyperState, TimeSeries, build_shear_frame,
                     conditional_predictive, estimate_Q, fit_partition,
                     generate_gwn_excitation, initial_delta, log_density,
                     negative_log_likelihood, noise_only_prediction, parameter_summary,
                     partition_dataset, predict_response, run_pipeline, sample_next_delta,
                     simulate_response)
from mmtesid.data import Partition
from mmtesid.exceptions import ValidationError
from mmtesid.inference import (PartitionObjective, RandomWalkCov, delta_blocks,
                               make_partition_state, search_bounds)
from mmtesid.kernel import MmteParams, TruncatedFactorization

from oracles import oracle_nll_first, oracle_nll_second


def make_delta(v, mu=(1.01, 0.99), s2=(1e-4, 2e-4), amp=(0.3, 0.2), l2=(0.05, 0.1),
               w=(20.0, 60.0), noise=0.01):
    return HyperState(list(mu), list(s2),
                      MmteParams([a * v for a in amp], list(l2), list(w), noise * v))


@pytest.fixture(scope="module")
def setup(frame, small_parts):
    p1, p2 = small_parts
    v = float(np.var(p1.y.values))
    d1 = make_delta(v)
    d2 = make_delta(v, mu=(0.99, 1.02), s2=(2e-4, 1e-4), amp=(0.25, 0.3), l2=(0.08, 0.03),
                    w=(25.0, 55.0), noise=0.02)
    st1 = make_partition_state(p1, d1, frame)
    return frame, p1, p2.with_initial_state(st1.end_state), d1, d2, st1


# --- hyper-parameter container ----------------------------------------------------------

@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2),
       st.lists(st.floats(-8, 3), min_size=2, max_size=2),
       st.lists(st.floats(-4, 4), min_size=3, max_size=9).filter(lambda v: len(v) % 3 == 0),
       st.floats(-10, 2))
def test_unconstrained_bijection(mu, log_s2, modes, log_noise):
    vec = np.concatenate([mu, log_s2, modes, [log_noise]])
    d = HyperState.from_unconstrained(vec, 2)
    assert d.m == len(modes) // 3 and d.n_delta == vec.size
    np.testing.assert_allclose(d.to_unconstrained(), vec, rtol=0, atol=1e-12)


def test_hyperstate_validation():
    phi = MmteParams([1.0], [1.0], [1.0], 0.1)
    with pytest.raises(ValidationError):
        HyperState([1.0, 1.0], [1.0], phi)
    with pytest.raises(ValidationError):
        HyperState([1.0], [0.0], phi)
    with pytest.raises(ValidationError):
        HyperState.from_unconstrained(np.zeros(7), 1)
    assert [sl.stop - sl.start for sl in delta_blocks(2, 3)] == [2, 2, 10]


# --- random walk ------------------------------------------------------------------------

def test_estimate_Q_examples():
    const = np.tile(np.arange(8.0), (5, 1))
    assert np.all(estimate_Q(const, 2, 1).Q == 0.0)
    two = np.zeros((2, 8))
    two[1] = np.arange(1.0, 9.0)
    Q = estimate_Q(two, 2, 1)
    d = two[1]
    np.testing.assert_allclose(Q.block("mu"), np.outer(d[:2], d[:2]))
    np.testing.assert_allclose(Q.block("phi"), np.outer(d[4:], d[4:]))
    assert np.all(Q.Q[:2, 2:] == 0.0) and np.all(Q.Q[2:4, 4:] == 0.0)
    with pytest.raises(ValidationError):
        estimate_Q(two[:1], 2, 1)


def test_estimate_Q_recovers_random_walk():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((8, 8)) * 0.1
    Q_true = A @ A.T
    mask = np.zeros((8, 8), bool)
    for sl in delta_blocks(2, 1):
        mask[sl, sl] = True
    Q_true = np.where(mask, Q_true, 0.0)
    steps = rng.multivariate_normal(np.zeros(8), Q_true, size=500)
    walk = np.vstack([np.zeros(8), np.cumsum(steps, axis=0)])
    Q = estimate_Q(walk, 2, 1).Q
    assert np.linalg.norm(Q - Q_true) / np.linalg.norm(Q_true) < 0.15


def test_sample_next_delta():
    d = make_delta(1.0)
    u = d.to_unconstrained()
    zero = sample_next_delta(d, np.zeros((u.size, u.size)), 5, seed=1)
    assert all(np.allclose(s.to_unconstrained(), u, atol=1e-14) for s in zero)
    Q = np.diag(np.linspace(0.01, 0.05, u.size))
    draws = np.array([s.to_unconstrained() for s in sample_next_delta(d, Q, 100000, seed=2)])
    se = np.sqrt(np.diag(Q) / draws.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - u) < 4 * se)
    np.testing.assert_allclose(draws.var(axis=0), np.diag(Q), rtol=0.02)
    a = sample_next_delta(d, Q, 3, seed=7)
    b = sample_next_delta(d, Q, 3, seed=7)
    assert all(np.array_equal(x.to_unconstrained(), y.to_unconstrained()) for x, y in zip(a, b))
    with pytest.raises(ValidationError):
        sample_next_delta(d, Q, 0, seed=1)


def test_parameter_summary():
    d = make_delta(1.0, s2=(1e-4, 4e-4))
    k = d.n_delta
    mean, sd = parameter_summary(d, RandomWalkCov(np.zeros((k, k)), 2, 2))
    np.testing.assert_allclose(mean, d.mu_theta)
    np.testing.assert_allclose(sd, [1e-2, 2e-2])
    Q = np.zeros((k, k))
    Q[0, 0] = 1e-4
    _, sd = parameter_summary(d, Q)
    assert sd[0] == pytest.approx(np.sqrt(2e-4))


# --- likelihood -------------------------------------------------------------------------

def test_first_partition_matches_dense_oracle(setup):
    frame, p1, _, d1, _, _ = setup
    got = negative_log_likelihood(d1.to_unconstrained(), p1, None, frame)
    assert got == pytest.approx(oracle_nll_first(frame, p1, d1), rel=1e-10)


def test_conditional_matches_explicit_joint(setup):
    frame, p1, p2, d1, d2, st1 = setup
    want, joint = oracle_nll_second(frame, p1, p2, d1, d2)
    got = negative_log_likelihood(d2.to_unconstrained(), p2, st1, frame)
    assert got == pytest.approx(want, rel=1e-10)
    # the objective and the reported conditional agree exactly
    dist = conditional_predictive(st1, d2, p2, frame)
    assert -log_density(p2.y.values.T.ravel(), dist) == pytest.approx(got, rel=1e-12)


def test_quadratic_term_vanishes_at_the_mean(setup):
    frame, p1, _, d1, _, _ = setup
    dist = conditional_predictive(None, d1, p1, frame)
    on_mean = Partition(1, p1.x, TimeSeries(p1.times, dist.mean.reshape(2, -1).T), 0)
    nll = negative_log_likelihood(d1.to_unconstrained(), on_mean, None, frame)
    fac = dist.factorization
    assert nll == pytest.approx(0.5 * (fac.logdet + fac.rank * np.log(2 * np.pi)), rel=1e-12)


def test_noise_variance_sweep_minimum():
    sysm = build_shear_frame([1.0], [25.0], None, dt=0.02, parameterization="scaling")
    x = generate_gwn_excitation(400, 0.02, 1.0, 3)
    f = simulate_response(sysm, x, [1.0])
    rng = np.random.default_rng(4)
    e = 0.3 * rng.standard_normal(f.values.shape)
    part = Partition(1, x, f.with_values(f.values + e), 0)
    grid = np.exp(np.linspace(np.log(0.01), np.log(1.0), 401))
    nll = []
    for q in grid:
        d = HyperState([1.0], [1e-16], MmteParams([1e-14], [1.0], [5.0], q))
        nll.append(negative_log_likelihood(d.to_unconstrained(), part, None, sysm))
    best = grid[int(np.argmin(nll))]
    assert best == pytest.approx(np.mean(e ** 2), rel=0.02)


def test_rejects_non_adjacent_partition(setup, frame):
    _, p1, _, d1, _, st1 = setup
    with pytest.raises(ValidationError):
        PartitionObjective(p1, st1, frame, 2, 2)


@pytest.mark.parametrize("which", [0, 1])
def test_gradient_matches_central_differences(setup, which):
    frame, p1, p2, d1, d2, st1 = setup
    prev, part, d = [(None, p1, d1), (st1, p2, d2)][which]
    obj = PartitionObjective(part, prev, frame, 2, 2)
    u = d.to_unconstrained()
    _, g = obj.value_and_grad(u)
    h = 1e-6
    fd = np.array([(obj.value(u + h * e) - obj.value(u - h * e)) / (2 * h)
                   for e in np.eye(u.size)])
    assert np.max(np.abs(fd - g)) / np.max(np.abs(g)) < 1e-5


def test_truncated_sensitivity_matches_differences(rng):
    # two eigenvalues fall below the cutoff, one of them negative
    V, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    C = (V * [5.0, 3.0, 2.0, 1.0, 1e-9, -1e-9]) @ V.T
    E = rng.standard_normal((6, 6))
    E = 0.5 * (E + E.T)
    r = rng.standard_normal(6)

    def value(t):
        fac = TruncatedFactorization(C + t * E, 1e-3)
        return fac.logdet + fac.quad(r)

    S = TruncatedFactorization(C, 1e-3).sensitivity(r)
    h = 1e-6
    fd = (value(h) - value(-h)) / (2 * h)
    assert np.sum(S * E) == pytest.approx(fd, rel=1e-5)


# --- fitting and pipeline --------------------------------------------------------------

def test_fit_never_increases_objective(setup):
    frame, p1, _, d1, _, _ = setup
    fit = fit_partition(p1, None, d1, frame, FitOptions(max_eval=40))
    assert fit.nll <= fit.nll_init
    lo, hi = search_bounds(d1, p1)
    u = fit.delta.to_unconstrained()
    assert np.all(u >= lo - 1e-9) and np.all(u <= hi + 1e-9)


def test_fit_is_deterministic(setup):
    frame, p1, _, d1, _, _ = setup
    opts = FitOptions(max_eval=30, restarts=2, seed=3)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        a = fit_partition(p1, None, d1, frame, opts)
        b = fit_partition(p1, None, d1, frame, opts)
    assert np.array_equal(a.delta.to_unconstrained(), b.delta.to_unconstrained())


def test_predict_response_degenerate_cases(setup):
    frame, p1, p2, d1, d2, st1 = setup
    window = Partition(2, p2.x, None, p2.start)
    empty = Partition(2, p2.x.window(0, 0), None, p2.start)
    out = predict_response(empty, [d2], st1, frame)
    assert out.mean.shape == (0, 2)
    one = predict_response(window, [d2], st1, frame)
    dist = conditional_predictive(st1, d2, p2, frame)
    np.testing.assert_allclose(one.mean, dist.mean.reshape(2, -1).T, rtol=1e-12)
    np.testing.assert_allclose(one.var, np.diag(dist.cov).reshape(2, -1).T, rtol=1e-10)
    diag_only = predict_response(window, [d1, d2], st1, frame, full_cov=False)
    full = predict_response(window, [d1, d2], st1, frame, full_cov=True)
    np.testing.assert_allclose(diag_only.var, full.var, rtol=1e-8)
    base = noise_only_prediction(window, d2, st1, frame)
    assert np.all(base.var == d2.phi.noise_sq)
    with pytest.raises(ValidationError):
        predict_response(window, [], st1, frame)


def test_pipeline_single_partition(frame, small_parts):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = run_pipeline(small_parts[:1], frame, m=1, opts=FitOptions(max_eval=40),
                           n_samples=3)
    assert len(res.deltas) == 2 and len(res.states) == 1
    assert res.Q.Q.shape == (8, 8) and len(res.samples) == 3
    assert res.total_log_likelihood() == pytest.approx(-res.states[0].fit.nll)


def test_pipeline_rejects_gaps(frame, small_parts):
    p1, p2 = small_parts
    with pytest.raises(ValidationError):
        run_pipeline([p2, p1], frame, m=1)


def test_one_dof_recovery():
    sysm = build_shear_frame([1.0], [25.0], None, dt=0.02, parameterization="scaling")
    x = generate_gwn_excitation(3 * 200, 0.02, 1.0, 21)
    f = simulate_response(sysm, x, [1.0]).values
    rng = np.random.default_rng(22)
    y = TimeSeries(x.times, f + 0.05 * f.std() * rng.standard_normal(f.shape))
    parts = partition_dataset(x, y, 200)
    start = initial_delta(parts, sysm, 1, mu_theta=[1.2])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = run_pipeline(parts, sysm, start, m=1, n_samples=5)
    assert 0.97 <= res.theta_mean[0] <= 1.03
