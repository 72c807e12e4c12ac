import math
import warnings

import numpy as np
import pytest
from scipy.special import log_ndtr
from scipy.stats import binom, binomtest

from mdplab.chains import ChainModel, LinearAR, NonlinearLipschitz, StationarySampler
from mdplab.errors import AdmissibilityError, ContractViolation
from mdplab.mdp_verify import (
    ExperimentConfig,
    IncrementSpec,
    InnerMonteCarloWarning,
    certify_K,
    dembo_average_check,
    exotic_mdp_experiment,
    exotic_rate,
    exponents_nonincreasing,
    gaps_to_rate_nonincreasing,
    gaussian_perturbation_tail,
    geometric_noise_tail_check,
    halfspace_rate,
    martingale_envelope,
    martingale_tail_bound_check,
    negligibility_check,
    puhalskii_condition_check,
    stochastic_exponential,
    tail_estimate,
    tail_probability,
)
from mdplab.noise import NoiseSpec
from mdplab.poisson import (
    PoissonSolution,
    TabulatedSolution,
    center,
    exact_covariance,
    identity_observable,
    stationary_grid,
    tabulated_conditional_covariance,
    tanh_observable,
)


def ar(a=0.5, family="gaussian", **kw):
    return ChainModel(LinearAR(np.array([[a]])), NoiseSpec(family, **kw))


def rows(rep, prefix):
    return [r for r in rep.rows if r["quantity"].startswith(prefix)]


@pytest.fixture(scope="module")
def tanh_setup():
    m = ChainModel(NonlinearLipschitz("scaled_tanh", {"scale": 0.5}), NoiseSpec("gaussian"))
    s = StationarySampler(m)
    H = center(tanh_observable(), s, 100_000, seed=0)
    U = TabulatedSolution(m, H, stationary_grid(s, seed=0), N=30, M=2000, seed=1, sampler=s)
    return m, H, U, s


# -- configuration and tail estimates


@pytest.mark.parametrize(
    "kw",
    [
        {"alpha": 0.5},
        {"alpha": 1.0},
        {"epsilon": 0.0},
        {"eta": -1.0},
        {"beta": -0.1},
        {"n_grid": (100, 100)},
        {"n_grid": (200, 100)},
        {"M": 0},
    ],
)
def test_experiment_config_invariants(kw):
    with pytest.raises(ContractViolation):
        ExperimentConfig(**kw)


def test_experiment_config_speed():
    assert ExperimentConfig(alpha=0.75).speed(100) == pytest.approx(10.0)


@pytest.mark.parametrize("count, M", [(0, 1000), (3, 1000), (37, 1000), (1000, 1000)])
def test_tail_estimate_clopper_pearson_matches_scipy(count, M):
    t = tail_estimate(count, M, n=100, alpha=0.75)
    ci = binomtest(count, M).proportion_ci(method="exact")
    assert t.ci == pytest.approx((ci.low, ci.high), rel=1e-9, abs=1e-15)
    assert (t.exponent is None) == (count < 5)
    assert t.zero == (count == 0)
    if count == 0:
        assert t.rule_of_three == pytest.approx(3 / M)
        assert t.exponent_upper == pytest.approx(math.log(3 / M) / 10)


def test_exponent_trend_helper_respects_censoring():
    a = tail_estimate(200, 1000, 100, 0.75)
    b = tail_estimate(20, 1000, 400, 0.75)
    c = tail_estimate(0, 1000, 1600, 0.75)
    assert exponents_nonincreasing([a, a, b, c])
    assert not exponents_nonincreasing([a, b, tail_estimate(900, 1000, 1600, 0.75)])


def test_halfspace_rate():
    assert halfspace_rate([[4.0]], [0.5]) == pytest.approx(0.25 / 8)
    # |y|^4 / (2 y*By) equals the minimum of z*B^-1 z / 2 over <z, y> >= |y|^2
    B = np.array([[2.0, 0.5], [0.5, 1.0]])
    y = np.array([0.3, -0.7])
    z = B @ y * (y @ y) / (y @ B @ y)
    assert halfspace_rate(B, y) == pytest.approx(0.5 * z @ np.linalg.solve(B, z))
    assert halfspace_rate(np.zeros((1, 1)), [1.0]) == math.inf
    assert halfspace_rate([[4.0]], [0.0]) == 0.0


def test_gap_trend_accepts_approach_from_below():
    # exponents rising toward the limit -0.03 from below: distance shrinks
    ts = [tail_estimate(k, 100_000, n, 0.75) for k, n in [(30_000, 25), (21_000, 100), (13_000, 400), (5_500, 1600)]]
    assert not exponents_nonincreasing(ts)
    assert gaps_to_rate_nonincreasing(ts, -0.03125)
    assert not gaps_to_rate_nonincreasing(ts[:3] + [tail_estimate(100, 100_000, 1600, 0.75)], -0.03125)


# -- stochastic exponential


@pytest.mark.parametrize("lam", [0.1, 1.0, 5.0])
@pytest.mark.parametrize("n", [100, 1000])
def test_gaussian_stochastic_exponential_is_exact(lam, n):
    m = ar()
    U = PoissonSolution(m, identity_observable())
    r = stochastic_exponential(m, U, [lam], 0.75, n)
    # zeta = 2 xi: n^{2a-1} log E = 2 lam^2 = (1/2) lam^2 4
    assert r.normalized[0] == pytest.approx(2 * lam**2, rel=1e-12)
    assert r.target == pytest.approx(2 * lam**2)


def test_stochastic_exponential_lambda_zero():
    m = ar()
    U = PoissonSolution(m, identity_observable())
    assert stochastic_exponential(m, U, [0.0], 0.75, 100).log_E[0] == 0.0


def test_rademacher_stochastic_exponential_is_log_cosh():
    m = ar(family="rademacher")
    U = PoissonSolution(m, identity_observable())
    lam, n, a = 1.3, 400, 0.7
    r = stochastic_exponential(m, U, [lam], a, n)
    assert r.log_E[0] == pytest.approx(n * math.log(math.cosh(2 * lam / n**a)), rel=1e-13)


def test_inner_mc_warns_with_few_draws(tanh_setup):
    m, H, U, s = tanh_setup
    with pytest.warns(InnerMonteCarloWarning):
        stochastic_exponential(m, U, [1.0], 0.75, 10, M=5, M_inner=20, B=np.eye(1))


def test_inner_mc_agrees_with_closed_form_on_gaussian_ar():
    m = ar()
    U = PoissonSolution(m, identity_observable())
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", InnerMonteCarloWarning)
        r = stochastic_exponential(m, U, [1.0], 0.75, 100, M=50, M_inner=2000, seed=3)
    assert r.method == "inner_mc"
    # log-mean-exp is biased low; the gap is small at this M_inner
    assert np.all(r.normalized <= r.target + 0.05)
    assert abs(np.median(r.normalized) - r.target) < 0.05


# -- Puhalskii condition


def test_puhalskii_gaussian_gap_identically_zero():
    m = ar()
    U = PoissonSolution(m, identity_observable())
    cfg = ExperimentConfig(alpha=0.75, lam=[1.0], n_grid=(100, 1000, 10_000), M=3)
    rep = puhalskii_condition_check(cfg, m, U, exact_covariance(m, identity_observable()))
    assert rep.flags["identity_exact"]
    assert all(r["value"] <= 1e-12 for r in rows(rep, "gap_max"))


def test_puhalskii_lambda_zero_gap_zero(tanh_setup):
    m, H, U, s = tanh_setup
    cfg = ExperimentConfig(alpha=0.75, lam=[0.0], n_grid=(50,), M=10)
    rep = puhalskii_condition_check(cfg, m, U, np.eye(1), M_inner=128)
    assert rows(rep, "gap_max")[0]["value"] == 0.0


def test_puhalskii_tanh_median_gap_decreases(tanh_setup):
    m, H, U, s = tanh_setup
    from mdplab.poisson import asymptotic_covariance_ergodic

    B = asymptotic_covariance_ergodic(m, U, 50_000, seed=2, M_inner=64).B_hat
    cfg = ExperimentConfig(alpha=0.75, lam=[1.0], n_grid=(30, 300), M=100)
    rep = puhalskii_condition_check(cfg, m, U, B, M_inner=512)
    med = [r["value"] for r in rows(rep, "gap_median")]
    assert med[1] < med[0]
    assert rep.flags["median_gap_nonincreasing"]


# -- Dembo averages


def test_dembo_constant_B_gives_zero_probability():
    m = ar()
    cfg = ExperimentConfig(alpha=0.75, n_grid=(100, 300), M=500, epsilon=1e-9)
    rep = dembo_average_check(cfg, m, lambda x: np.full((x.shape[0], 1, 1), 4.0), np.array([[4.0]]))
    assert all(r["value"] == 0.0 for r in rows(rep, "avg>eps:p_hat"))


def test_dembo_tanh_large_eps_is_censored(tanh_setup):
    m, H, U, s = tanh_setup
    Bx = tabulated_conditional_covariance(m, U, np.linspace(-4, 4, 21), M=2000, seed=0)
    cfg = ExperimentConfig(alpha=0.75, n_grid=(100, 300), M=400, epsilon=10.0)
    rep = dembo_average_check(cfg, m, Bx, np.array([[0.5]]), sampler=s)
    assert all(r["value"] == 0.0 for r in rows(rep, "avg>eps:p_hat"))
    assert len(rows(rep, "avg>eps:exponent_upper")) == 2


def test_dembo_tanh_moderate_eps_decays(tanh_setup):
    m, H, U, s = tanh_setup
    Bx = tabulated_conditional_covariance(m, U, np.linspace(-4, 4, 21), M=4000, seed=0)
    from mdplab.chains import stationary_sample

    Bbar = Bx(stationary_sample(s, 50_000, 1)).mean(axis=0)
    cfg = ExperimentConfig(alpha=0.75, n_grid=(20, 80, 320), M=2000, epsilon=0.005)
    rep = dembo_average_check(cfg, m, Bx, Bbar, sampler=s)
    p = [r["value"] for r in rows(rep, "avg>eps:p_hat")]
    assert p[0] > p[1] > p[2]
    assert rep.flags["exponent_nonincreasing"]


# -- tail probabilities


def test_ball_covering_bulk_has_probability_one():
    cfg = ExperimentConfig(alpha=0.75, n_grid=(100,), M=500)
    t = tail_probability(cfg, ar(), identity_observable(), [0.0], eps=1e6, kind="ball")[0]
    assert t.p_hat == 1.0 and t.exponent == 0.0


def test_iid_gaussian_oracle_within_30pct_at_y2():
    # exact normalised exponent log Phi_bar(y n^{a-1/2}) / n^{2a-1} against -y^2/2
    n, a, y = 100, 0.75, 2.0
    exact = float(log_ndtr(-y * n ** (a - 0.5))) / n ** (2 * a - 1)
    assert abs(exact - (-(y**2) / 2)) <= 0.3 * y**2 / 2


def test_iid_gaussian_empirical_matches_oracle():
    m = ar(0.0)
    n, a, y = 100, 0.75, 0.8
    cfg = ExperimentConfig(alpha=a, n_grid=(n,), M=100_000, seed=4)
    t = tail_probability(cfg, m, identity_observable(), [y])[0]
    # X_0 = 0, so S_n holds n - 1 noise terms
    log_p = float(log_ndtr(-y * n**a / math.sqrt(n - 1)))
    p = math.exp(log_p)
    assert abs(t.count - cfg.M * p) <= 4 * math.sqrt(cfg.M * p * (1 - p))
    assert t.exponent == pytest.approx(log_p / n ** (2 * a - 1), rel=0.05)


def test_tail_probability_rejects_bad_events():
    cfg = ExperimentConfig()
    with pytest.raises(ContractViolation):
        tail_probability(cfg, ar(), identity_observable(), [0.0], kind="halfspace")
    with pytest.raises(ContractViolation):
        tail_probability(cfg, ar(), identity_observable(), [1.0], kind="ball")


# -- negligibility


def test_bounded_noise_contraction_never_exceeds_worst_case():
    m = ChainModel(NonlinearLipschitz("clipped_affine", {"slope": 0.5, "intercept": 1.0, "bound": 3.0}), NoiseSpec("uniform"))
    worst = (abs(float(m.f00()[0])) + m.noise.max_abs()) / 0.5
    n = 100
    cfg = ExperimentConfig(alpha=0.75, n_grid=(n,), M=2000, epsilon=1.01 * worst / n**0.75)
    rep = negligibility_check(cfg, m, "state")
    assert rows(rep, "exceed:p_hat")[0]["value"] == 0.0


def test_small_eps_exceedance_tends_to_one():
    cfg = ExperimentConfig(alpha=0.75, n_grid=(200,), M=2000, epsilon=1e-6)
    rep = negligibility_check(cfg, ar(), "state")
    assert rows(rep, "exceed:p_hat")[0]["value"] > 0.99


def test_corrector_negligibility(tanh_setup):
    m, H, U, s = tanh_setup
    cfg = ExperimentConfig(alpha=0.75, n_grid=(100, 400), M=1000, epsilon=0.5)
    rep = negligibility_check(cfg, m, "corrector", U)
    assert all(r["value"] == 0.0 for r in rows(rep, "exceed:p_hat"))


# -- geometric-weighted noise


def test_geometric_printed_exponent_example():
    nz = NoiseSpec("gaussian", delta=1.0)
    rep = geometric_noise_tail_check(0.5, nz, 1.0, 0.75, 1.0, [10_000], 10, 0)
    printed = rows(rep, "printed_exponent")[0]["value"]
    assert printed == pytest.approx(-10.0 + nz.component_log_mgf_abs(1.0) / 100, rel=1e-12)
    assert printed == pytest.approx(-10.0, abs=0.05)


def test_geometric_zero_noise_probability_zero():
    rep = geometric_noise_tail_check(0.5, NoiseSpec("gaussian", scale=0.0), 1.0, 0.75, 0.01, [10, 100], 200, 0)
    assert all(r["value"] == 0.0 for r in rows(rep, "sum>=thr:p_hat"))


@pytest.mark.parametrize("eps, expected", [(0.2, 1.0), (0.3, 0.0)])
def test_geometric_rademacher_is_deterministic_step(eps, expected):
    # sum_{j<16} 0.5^j = 2 - 2^-15; threshold 16^0.75 eps = 8 eps
    rep = geometric_noise_tail_check(0.5, NoiseSpec("rademacher"), 1.0, 0.75, eps, [16], 100, 0)
    assert rows(rep, "sum>=thr:p_hat")[0]["value"] == expected
    assert rep.flags["empirical_below_envelope"]


def test_printed_geometric_form_is_not_a_bound_for_rademacher():
    # exact probability 1 (exponent 0) while the printed exponent is negative
    rep = geometric_noise_tail_check(0.5, NoiseSpec("rademacher"), 1.0, 0.75, 0.24, [16], 100, 0)
    assert rows(rep, "sum>=thr:p_hat")[0]["value"] == 1.0
    assert rows(rep, "printed_exponent")[0]["value"] < 0
    assert rep.flags["empirical_below_envelope"]


def test_geometric_gaussian_envelope_dominates():
    rep = geometric_noise_tail_check(0.5, NoiseSpec("gaussian", delta=1.0), 1.0, 0.75, 0.6, [16, 64, 256], 20_000, 3)
    assert rep.flags["empirical_below_envelope"]


# -- martingale envelope


def test_certified_K_is_a_fixed_point():
    spec = IncrementSpec("rademacher")
    K = certify_K(spec, 0.5)
    assert K >= 1 and K >= math.exp(0.5 / K)
    assert K == pytest.approx(math.exp(0.5 / K), rel=1e-6)
    g = IncrementSpec("gaussian")
    Kg = certify_K(g, 0.5)
    assert Kg >= g.third_exp_moment(0.5 / Kg)


def test_gaussian_third_exp_moment_quadrature_at_zero():
    # E|Z|^3 = 2 sqrt(2/pi)
    assert IncrementSpec("gaussian").third_exp_moment(0.0) == pytest.approx(2 * math.sqrt(2 / math.pi), rel=1e-9)


def test_fair_signs_binomial_oracle_below_envelope():
    rep = martingale_tail_bound_check(IncrementSpec("rademacher"), 0.75, 0.5, [100, 400])
    assert rep.flags["one_sided_below_envelope"] and rep.flags["two_sided_below_envelope"]
    n = 400
    # P(M_n > 200) with M_n = 2 S - n
    exact = binom.sf(300, n, 0.5)
    row = [r for r in rows(rep, "one_sided_exponent") if r["n"] == n][0]
    assert row["value"] == pytest.approx(math.log(exact) / n**0.5, rel=1e-10)


def test_eps_above_max_increment_gives_zero_probability():
    rep = martingale_tail_bound_check(IncrementSpec("rademacher"), 0.75, 1.5, [100])
    assert rows(rep, "one_sided_exponent")[0]["value"] == -math.inf


def test_gaussian_increments_exact_tail_below_envelope():
    rep = martingale_tail_bound_check(IncrementSpec("gaussian"), 0.75, 0.5, [100, 400, 1600])
    assert rep.info["method"] == "exact_normal"
    assert rep.flags["two_sided_below_envelope"]


def test_laplace_increments_simulated():
    rep = martingale_tail_bound_check(IncrementSpec("laplace", 0.5), 0.75, 0.5, [50, 100], M=20_000, seed=1)
    assert rep.info["method"] == "monte_carlo"
    assert rep.flags["two_sided_below_envelope"]


def test_envelope_rejects_eps_at_least_three():
    with pytest.raises(ContractViolation):
        martingale_tail_bound_check(IncrementSpec("rademacher"), 0.75, 3.0, [100])
    with pytest.raises(ContractViolation):
        martingale_envelope(3.5, 100, 0.75, 1.0)


# -- Gaussian perturbation


def test_perturbation_bound_value():
    rep = gaussian_perturbation_tail(0.01, 1.0, 0.75, [100])
    assert rep.info["bound"] == pytest.approx(-50.0)


@pytest.mark.parametrize("beta", [0.01, 0.1, 1.0])
@pytest.mark.parametrize("eta", [0.5, 1.0, 2.0])
def test_perturbation_exact_below_bound(beta, eta):
    assert gaussian_perturbation_tail(beta, eta, 0.75, [10, 100, 1000, 10_000]).flags["exact_below_bound"]


def test_perturbation_eta_zero_is_one_half():
    rep = gaussian_perturbation_tail(0.1, 0.0, 0.75, [100, 10_000])
    one = rows(rep, "one_sided_exponent")
    assert one[0]["value"] == pytest.approx(math.log(0.5) / 10)
    assert abs(one[1]["value"]) < abs(one[0]["value"])


# -- sign chain


def test_exotic_rate_arithmetic():
    assert exotic_rate(2.0, NoiseSpec("gaussian"), 0.5) == pytest.approx(0.5)


def test_exotic_identity_and_lyapunov():
    cfg = ExperimentConfig(alpha=0.75, n_grid=(50, 100), M=5000, y_grid=(0.3,), x0=np.array([1.5]))
    rep = exotic_mdp_experiment(cfg, 2.0, NoiseSpec("gaussian", delta=0.5))
    assert rep.flags["identity_exact"]
    assert rep.flags["lyapunov_bound"]
    assert rep.info["max_identity_residual"] <= 1e-12


def test_exotic_rejects_inadmissible_and_biased_noise():
    cfg = ExperimentConfig(n_grid=(10,), M=10)
    with pytest.raises(AdmissibilityError):
        exotic_mdp_experiment(cfg, 0.5, NoiseSpec("gaussian", delta=0.5))
    with pytest.raises(ContractViolation):
        exotic_mdp_experiment(cfg, 2.0, NoiseSpec("gaussian", loc=0.1))
