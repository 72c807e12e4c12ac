import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdplab.errors import ContractViolation
from mdplab.ratefn import INFINITY, build, in_range, rate, rate_regularized, regularization_limit_check


def random_psd(seed, p, rank):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((p, rank))
    return X @ X.T


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.data())
def test_penrose_identities_and_numpy_oracle(seed, p, data):
    rank = data.draw(st.integers(0, p))
    B = random_psd(seed, p, rank)
    rf = build(B)
    assert max(rf.penrose_residuals().values()) <= 1e-10
    assert rf.rank == rank
    if rank:
        assert np.allclose(rf.B_pinv, np.linalg.pinv(B, rcond=1e-10, hermitian=True), atol=1e-8 * np.abs(rf.B_pinv).max())
    orth, recon = rf.decomposition_residuals()
    assert orth <= 1e-12 and recon <= 1e-12


def test_diag_four_zero_cases():
    rf = build(np.diag([4.0, 0.0]))
    assert rate(rf, [2.0, 0.0]) == pytest.approx(0.5)
    assert rate(rf, [0.0, 1.0]) is INFINITY
    assert rate(rf, [2.0, 1.0]) is INFINITY
    assert float(rate(rf, [0.0, 1.0])) == math.inf
    assert rate(rf, [0.0, 0.0]) == 0.0


def test_infinity_sentinel_orders_above_floats():
    assert INFINITY > 1e308 and not INFINITY < 0 and INFINITY == math.inf


def test_nonsingular_rate_matches_inverse():
    B = np.array([[2.0, 0.5], [0.5, 1.0]])
    y = np.array([0.3, -1.2])
    assert rate(build(B), y) == pytest.approx(0.5 * y @ np.linalg.solve(B, y), rel=1e-12)


@pytest.mark.parametrize("beta", [1e-2, 1e-4, 1e-8])
def test_regularized_gap_on_range(beta):
    rf = build(np.diag([4.0, 0.0]))
    # I_beta(2,0) = 2 / (4 + beta); gap = beta / (2 (4 + beta)) <= beta / 8
    v = rate_regularized(rf, beta, [2.0, 0.0])
    assert v == pytest.approx(2 / (4 + beta), rel=1e-14)
    assert abs(v - 0.5) <= beta / 8 + 1e-12


def test_regularized_off_range_blows_up_like_perp_norm():
    rf = build(np.diag([4.0, 0.0]))
    rep = regularization_limit_check(rf, [2.0, 1.0], [1e-2, 1e-4, 1e-8])
    assert not rep.in_range and rep.rate is INFINITY
    assert rep.perp_half_norm_sq == pytest.approx(0.5)
    assert rep.beta_times_value[-1] == pytest.approx(0.5, rel=0.01)
    assert rep.fitted_coefficient == pytest.approx(0.5, rel=0.01)


def test_limit_on_range_converges():
    rf = build(np.diag([4.0, 0.0]))
    rep = regularization_limit_check(rf, [2.0, 0.0], [1e-1, 1e-3, 1e-6])
    assert rep.in_range and np.all(np.diff(rep.gaps) < 0)


def test_rejects_bad_input():
    with pytest.raises(ContractViolation):
        build(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ContractViolation):
        build(np.diag([1.0, -1.0]))
    rf = build(np.eye(2))
    with pytest.raises(ContractViolation):
        rate(rf, [1.0])
    with pytest.raises(ContractViolation):
        rate_regularized(rf, 0.0, [1.0, 0.0])
    with pytest.raises(ContractViolation):
        regularization_limit_check(rf, [1.0, 0.0], [1e-4, 1e-2])


def test_statistical_mode_cuts_noise_eigenvalues():
    B = np.diag([4.0, 0.0]) + np.array([[0.0, 0.003], [0.003, 0.002]])
    rf = build(B, se=np.full((2, 2), 0.01))
    assert rf.mode == "statistical" and rf.rank == 1
    assert in_range(rf, [2.0, 0.0])


def test_zero_matrix_has_rank_zero():
    rf = build(np.zeros((2, 2)))
    assert rf.rank == 0
    assert rate(rf, [0.0, 0.0]) == 0.0
    assert rate(rf, [1.0, 0.0]) is INFINITY


def test_json_export():
    d = build(np.diag([4.0, 0.0])).to_json()
    assert d["rank"] == 1 and d["B"] == [4.0, 0.0, 0.0, 0.0]
