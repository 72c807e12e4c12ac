import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import solve_discrete_lyapunov

from mdplab.chains import ChainModel, ExoticSign, LinearAR, NonlinearLipschitz, StationarySampler, simulate
from mdplab.errors import ContractViolation, TruncationError, UnsupportedVariant
from mdplab.noise import NoiseSpec
from mdplab.poisson import (
    PoissonSolution,
    TabulatedSolution,
    asymptotic_covariance_ergodic,
    asymptotic_covariance_series,
    batch_means_se,
    center,
    centering_check,
    conditional_covariance,
    covariance_bounds,
    exact_covariance,
    identity_observable,
    increment_moment_check,
    increment_paths,
    linear_observable,
    martingale_decompose,
    poisson_residual,
    solve_U,
    stationary_grid,
    tabulated_conditional_covariance,
    tanh_observable,
    zero_observable,
)


def ar(a=0.5, **kw):
    return ChainModel(LinearAR(np.array([[a]])), NoiseSpec("gaussian", **kw))


def tanh_chain():
    return ChainModel(NonlinearLipschitz("scaled_tanh", {"scale": 0.5}), NoiseSpec("gaussian"))


def long_run_covariance(A, S, C, terms=400):
    """sum_k Cov(C X_0, C X_k) over k in Z for the stationary AR(1), from the Lyapunov solution."""
    G0 = solve_discrete_lyapunov(A, S)
    tot = G0.copy()
    P = np.eye(A.shape[0])
    for _ in range(terms):
        P = P @ A
        tot += P @ G0 + G0 @ P.T
    return C @ tot @ C.T


# -- closed form


@pytest.mark.parametrize("x, expected", [(3.0, 6.0), (-2.0, -4.0), (0.5, 1.0), (0.0, 0.0)])
def test_closed_form_U_is_geometric_series(x, expected):
    U = PoissonSolution(ar(), identity_observable())
    assert U.closed_form
    assert U([x])[0] == pytest.approx(expected, abs=1e-14)


def test_closed_form_needs_centred_observable():
    m = ChainModel(LinearAR(np.array([[0.5]])), NoiseSpec("gaussian", loc=1.0))
    with pytest.raises(ContractViolation):
        PoissonSolution(m, identity_observable())
    H = center(identity_observable(), StationarySampler(m))
    assert H.centering[0] == pytest.approx(2.0)
    assert PoissonSolution(m, H)([2.0])[0] == pytest.approx(0.0, abs=1e-14)


def test_exact_B_matches_lyapunov_autocovariance_sum():
    A = np.array([[0.5, 0.2], [-0.1, 0.3]])
    S = np.array([[1.0, 0.0], [0.0, 1.0]])
    C = np.array([[1.0, -2.0]])
    m = ChainModel(LinearAR(A), NoiseSpec("gaussian", p=2))
    B = exact_covariance(m, linear_observable(C))
    assert np.allclose(B, long_run_covariance(A, S, C), rtol=1e-12, atol=1e-12)


def test_exact_B_scalar_ar_is_four():
    assert exact_covariance(ar(), identity_observable())[0, 0] == pytest.approx(4.0)


def test_closed_form_P_and_poisson_equation_exact():
    m, H = ar(), identity_observable()
    U = PoissonSolution(m, H)
    xs = np.linspace(-3, 3, 7)[:, None]
    PU, _ = U.P(xs)
    assert np.allclose(U.values(xs) - PU, H(xs), atol=1e-14)


def test_zero_observable_has_zero_solution():
    U = PoissonSolution(ar(), zero_observable(1, 2))
    assert np.all(U.values(np.array([[1.0], [-4.0]])) == 0.0)


def test_exotic_chain_has_no_poisson_solution():
    m = ChainModel(ExoticSign(2.0), NoiseSpec("gaussian"))
    with pytest.raises(UnsupportedVariant):
        PoissonSolution(m, identity_observable())


# -- Monte Carlo series


def test_mc_series_matches_closed_form():
    m = ar()
    U = PoissonSolution(m, identity_observable(), N=60, M=4000, closed_form=False, seed=2)
    est = U.evaluate(np.array([[-2.0], [0.5], [3.0]]))
    assert np.allclose(est.value[:, 0], [-4.0, 1.0, 6.0], rtol=0.02, atol=1e-3)
    assert np.all(est.tail_bound < 1e-12)


def test_mc_series_nonlinear_solves_poisson_equation():
    m = tanh_chain()
    H = center(tanh_observable(), StationarySampler(m), 100_000, seed=1)
    U = PoissonSolution(m, H, N=40, M=4000, seed=3)
    for x in ([1.5], [-0.7]):
        r = poisson_residual(m, H, U, x, M=4000, seed=9)
        assert r.passed, (r.residual, r.error)


def test_mc_evaluations_are_a_fixed_function_of_x():
    U = PoissonSolution(tanh_chain(), tanh_observable(), N=20, M=500, seed=1)
    a = U.evaluate(np.array([[0.3], [1.0]])).value
    b = U.evaluate(np.array([[1.0]])).value
    assert a[1, 0] == b[0, 0]


def test_tail_bound_and_truncation_error():
    m = tanh_chain()
    H = tanh_observable()
    U = PoissonSolution(m, H, N=5, M=10)
    assert U.tail_bound(np.array([[1.0]]))[0, 0] > PoissonSolution(m, H, N=30, M=10).tail_bound(np.array([[1.0]]))[0, 0]
    with pytest.raises(TruncationError) as exc:
        solve_U(m, H, [1.0], N=3, M=10, seed=0, tol=1e-6)
    assert exc.value.suggested_N > 3
    ok = solve_U(m, H, [1.0], N=exc.value.suggested_N, M=10, seed=0, tol=1e-6)
    assert ok.tail_bound[0] <= 1e-6


def test_tabulated_solution_tracks_direct_series():
    m = tanh_chain()
    H = center(tanh_observable(), StationarySampler(m), 50_000, seed=0)
    grid = stationary_grid(StationarySampler(m), points=301, seed=0)
    T = TabulatedSolution(m, H, grid, N=30, M=2000, seed=4)
    D = PoissonSolution(m, H, N=30, M=2000, seed=4, closed_form=False)
    xs = np.array([[-1.23], [0.37], [2.05], [50.0]])
    t, d = T.evaluate(xs), D.evaluate(xs)
    assert np.all(np.abs(t.value - d.value) <= t.tail_bound + 1e-9)
    assert t.value[3, 0] == d.value[3, 0]  # outside the grid: direct series


def test_centering_check():
    m = tanh_chain()
    s = StationarySampler(m)
    H = center(tanh_observable(), s, 100_000, seed=0)
    assert centering_check(H, s, 100_000, seed=1).passed


# -- martingale decomposition


@settings(max_examples=10, deadline=None)
@given(st.floats(-10, 10), st.integers(0, 1000))
def test_telescoping_identity_closed_form(x0, seed):
    m = ar()
    U = PoissonSolution(m, identity_observable())
    dec = martingale_decompose(m, U, simulate(m, [x0], 500, seed))
    assert dec.telescoping_residual <= 1e-10 * max(1.0, np.abs(dec.H_sums).max())


def test_increments_closed_form_are_scaled_noise():
    m = ar()
    U = PoissonSolution(m, identity_observable())
    t = simulate(m, [1.0], 100, seed=5)
    dec = martingale_decompose(m, U, t)
    assert np.allclose(dec.increments, 2 * t.noises, atol=1e-12)


def test_increment_moments_for_gaussian_increments():
    m = ar()
    U = PoissonSolution(m, identity_observable())
    z = increment_paths(m, U, 50, 400, seed=2)
    rep = increment_moment_check(z, alpha=0.75, delta=0.1)
    assert abs(rep.second_mean - 4.0) <= 4 * rep.second_se
    assert not rep.growth_flag


# -- covariance estimators


def test_conditional_covariance_exact_and_mc():
    m = ar()
    U = PoissonSolution(m, identity_observable())
    B, se = conditional_covariance(m, U, [1.0], M=2, seed=0)
    assert B[0, 0] == pytest.approx(4.0)
    Bm, sem = conditional_covariance(m, U, [1.0], M=50_000, seed=0, exact=False)
    assert abs(Bm[0, 0] - 4.0) <= 4 * sem[0, 0]


def test_tabulated_conditional_covariance_is_constant_for_ar():
    m = ar()
    U = PoissonSolution(m, identity_observable())
    f = tabulated_conditional_covariance(m, U, np.linspace(-3, 3, 5), M=2, seed=0)
    assert np.allclose(f(np.array([[0.1], [7.0]])), 4.0)


def test_series_estimator_near_four():
    est = asymptotic_covariance_series(ar(), identity_observable(), N=40, M=40_000, seed=1)
    assert abs(est.B_hat[0, 0] - 4.0) <= 4 * est.se[0, 0] + est.truncation_bound
    assert est.psd_ok


def test_ergodic_estimator_closed_and_inner_mc():
    m = ar()
    U = PoissonSolution(m, identity_observable())
    exact = asymptotic_covariance_ergodic(m, U, 1000, seed=0)
    assert exact.method == "closed_form" and exact.B_hat[0, 0] == pytest.approx(4.0)
    est = asymptotic_covariance_ergodic(m, U, 20_000, seed=0, M_inner=8)
    assert abs(est.B_hat[0, 0] - 4.0) <= 4 * est.se[0, 0]


def test_covariance_bounds_dominate_exact_trace():
    m = ar()
    tr, lip = covariance_bounds(m, identity_observable())
    assert tr >= 4.0


def test_batch_means_se_on_iid_series():
    x = np.random.default_rng(0).standard_normal((40_000, 1))
    se = batch_means_se(x)
    assert se[0] == pytest.approx(1 / math.sqrt(40_000), rel=0.2)


def test_conditional_covariance_respects_lipschitz_bound():
    m = tanh_chain()
    H = center(tanh_observable(), StationarySampler(m), 50_000, seed=0)
    grid = stationary_grid(StationarySampler(m), points=201, seed=0)
    U = TabulatedSolution(m, H, grid, N=30, M=2000, seed=1)
    tr, lip = covariance_bounds(m, H)
    xs = np.random.default_rng(2).uniform(-3, 3, 12)
    Bs, ses = zip(*(conditional_covariance(m, U, [x], M=50_000, seed=3) for x in xs))
    B = np.array([b[0, 0] for b in Bs])
    se = np.array([s[0, 0] for s in ses])
    assert np.all(B <= tr)
    for i in range(len(xs)):
        for j in range(i):
            assert abs(B[i] - B[j]) <= lip * abs(xs[i] - xs[j]) + 4 * math.hypot(se[i], se[j])
