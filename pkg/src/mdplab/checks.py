"""Registry of runnable checks. Each check maps (context, params) to a CheckReport."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import mdp_verify as mv
from . import ratefn
from .chains import ChainModel, LinearAR, StationarySampler, contraction_check, simulate, stationary_sample
from .errors import ContractViolation, UnsupportedVariant
from .mdp_verify import ExperimentConfig
from .poisson import (
    ObservableSpec,
    PoissonSolution,
    TabulatedSolution,
    asymptotic_covariance_ergodic,
    asymptotic_covariance_series,
    center,
    exact_covariance,
    martingale_decompose,
    stationary_grid,
    tabulated_conditional_covariance,
)
from .reporting import CheckReport

CENTER_COUNT = 200_000


@dataclass
class RunContext:
    model: ChainModel
    raw_observable: ObservableSpec
    experiment: ExperimentConfig
    seed: int
    _centered: ObservableSpec | None = None
    _solutions: dict = field(default_factory=dict)
    _sampler: StationarySampler | None = None

    @property
    def sampler(self) -> StationarySampler:
        if self._sampler is None:
            self._sampler = StationarySampler(self.model)
        return self._sampler

    @property
    def observable(self) -> ObservableSpec:
        if self._centered is None:
            self._centered = center(self.raw_observable, self.sampler, CENTER_COUNT, self.seed)
        return self._centered

    @property
    def linear_closed(self) -> bool:
        return isinstance(self.model.variant, LinearAR) and self.raw_observable.linear is not None

    def solution(self, N: int = 60, M: int = 2000, closed_form: bool | None = None) -> PoissonSolution:
        key = (N, M, closed_form)
        if key not in self._solutions:
            self._solutions[key] = PoissonSolution(
                self.model, self.observable, N=N, M=M, seed=self.seed, closed_form=closed_form, sampler=self.sampler
            )
        return self._solutions[key]

    def fast_solution(self, N: int = 60, M: int = 2000) -> PoissonSolution:
        """Closed form when available, a tabulated U on scalar chains, else the direct series."""
        if self.linear_closed:
            return self.solution(closed_form=True)
        if self.model.d != 1:
            return self.solution(N, M)
        key = ("table", N, M)
        if key not in self._solutions:
            grid = stationary_grid(self.sampler, seed=self.seed)
            self._solutions[key] = TabulatedSolution(
                self.model, self.observable, grid, N=N, M=M, seed=self.seed, sampler=self.sampler
            )
        return self._solutions[key]

    def exact_B(self) -> np.ndarray | None:
        return exact_covariance(self.model, self.observable) if self.linear_closed else None

    def target_B(self, N: int = 40, n_B: int = 20_000) -> np.ndarray:
        """Exact B when available, else the ergodic estimate built from ``fast_solution``."""
        B = self.exact_B()
        if B is not None:
            return B
        key = ("B", N, n_B)
        if key not in self._solutions:
            # same U as the checks use, so gaps measure convergence and not a U/B mismatch
            U = self.fast_solution(N, 2000)
            self._solutions[key] = asymptotic_covariance_ergodic(self.model, U, n_B, self.seed, M_inner=64).B_hat
        return self._solutions[key]


def _x0(ctx: RunContext) -> np.ndarray:
    e = ctx.experiment.x0
    return np.zeros(ctx.model.d) if e is None else np.atleast_1d(e)


def check_poisson_oracle(ctx: RunContext, p) -> CheckReport:
    rep = CheckReport("poisson_oracle")
    U = ctx.solution(p.N, p.M, closed_form=True if p.closed_form else False)
    oracle = ctx.solution(closed_form=True) if ctx.linear_closed else None
    ok = True
    for x in p.points:
        pt = np.full(ctx.model.d, float(x))
        est = U.evaluate(pt)
        ref = None if oracle is None else oracle(pt)
        for j in range(U.q):
            half = 1.959963984540054 * float(est.se[j])
            env = None if ref is None else float(ref[j])
            rep.add_row(f"U_hat[{j}](x={x:g})", float(est.value[j]), None, None, float(est.value[j]) - half, float(est.value[j]) + half, env)
            if ref is not None:
                tol = max(p.rel_tol * abs(env), 3 * float(est.se[j]) + float(est.tail_bound[j]), 1e-12)
                ok &= abs(float(est.value[j]) - env) <= tol
    rep.info.update({"N": p.N, "M": U.M, "closed_form": U.closed_form})
    if oracle is not None:
        rep.flags["within_oracle_tolerance"] = bool(ok)
    return rep


def check_contraction(ctx: RunContext, p) -> CheckReport:
    r = contraction_check(ctx.model, p.trials, p.n, ctx.seed)
    rep = CheckReport("contraction")
    rep.add_row("max_ratio", r.max_ratio, r.n, envelope=r.bound + r.roundoff)
    rep.flags["coupling_contracts"] = r.passed
    rep.hard = ("coupling_contracts",)
    rep.info.update({"K": r.K, "rho": r.rho, "trials": r.trials})
    return rep


def check_covariance(ctx: RunContext, p) -> CheckReport:
    rep = CheckReport("covariance")
    ser = asymptotic_covariance_series(ctx.model, ctx.observable, p.N, p.M, ctx.seed, sampler=ctx.sampler)
    U = ctx.fast_solution()
    M_inner = p.M_inner if p.M_inner is not None else (None if U.closed_form else 8)
    erg = asymptotic_covariance_ergodic(ctx.model, U, p.n, ctx.seed, M_inner=M_inner)
    exact = ctx.exact_B()
    q = ser.B_hat.shape[0]
    agree = True
    for i in range(q):
        for j in range(q):
            env = None if exact is None else float(exact[i, j])
            for est, n_lab in ((ser, p.N), (erg, p.n)):
                v, s = float(est.B_hat[i, j]), float(est.se[i, j])
                rep.add_row(f"B_{est.method}[{i},{j}]", v, n_lab, None, v - 1.96 * s, v + 1.96 * s, env)
                if exact is not None:
                    rep.flags[f"{est.method}_within_rel_tol[{i},{j}]"] = abs(v - env) <= p.rel_tol * max(abs(env), 1e-12)
            d = abs(float(ser.B_hat[i, j] - erg.B_hat[i, j]))
            band = 3 * math.hypot(float(ser.se[i, j]), float(erg.se[i, j]))
            agree &= d <= band + float(ser.truncation_bound)
    rep.flags["estimators_agree"] = bool(agree)
    rep.flags["psd"] = ser.psd_ok and erg.psd_ok
    rep.info.update({"series": ser.to_json(), "ergodic": erg.to_json(), "truncation_bound": ser.truncation_bound})
    return rep


def check_telescoping(ctx: RunContext, p) -> CheckReport:
    U = ctx.fast_solution()
    M_inner = p.M_inner if p.M_inner is not None else (None if U.closed_form else 64)
    traj = simulate(ctx.model, _x0(ctx), p.n, ctx.seed)
    dec = martingale_decompose(ctx.model, U, traj, M_inner=M_inner, seed=ctx.seed)
    rep = CheckReport("telescoping")
    r = dec.telescoping_residual
    scale = max(1.0, float(np.max(np.abs(dec.H_sums))))
    if dec.closed_form:
        rep.add_row("max_residual", r, p.n, envelope=p.tol * scale)
        rep.flags["identity_holds"] = r <= p.tol * scale
        rep.hard = ("identity_holds",)
    else:
        # with a simulated U the residual is the accumulated Poisson-equation error
        rep.add_row("max_residual", r, p.n)
    rep.info["closed_form"] = dec.closed_form
    return rep


def check_rate_function(ctx: RunContext, p) -> CheckReport:
    if p.B is not None:
        rf = ratefn.build(np.asarray(p.B, dtype=float))
    else:
        B = ctx.exact_B()
        if B is not None:
            rf = ratefn.build(B)
        else:
            est = asymptotic_covariance_series(ctx.model, ctx.observable, 40, 20_000, ctx.seed, sampler=ctx.sampler)
            rf = ratefn.build(est.B_hat, se=est.se)
    rep = CheckReport("rate_function")
    res = rf.penrose_residuals()
    for k, v in res.items():
        rep.add_row(f"penrose:{k}", v, envelope=1e-10)
    rep.flags["penrose"] = max(res.values()) <= 1e-10
    rep.hard = ("penrose",) if rf.mode == "exact" else ()
    ys = p.y or [list(np.ones(rf.dim))]
    betas = sorted(p.betas, reverse=True)
    for y in ys:
        lab = ",".join(f"{v:g}" for v in y)
        I = ratefn.rate(rf, y)
        rep.add_row(f"I(y={lab})", float(I))
        lim = ratefn.regularization_limit_check(rf, y, betas)
        for b, v in zip(lim.betas, lim.values):
            rep.add_row(f"I_beta(y={lab};beta={b:g})", float(v), envelope=float(I))
        if lim.in_range:
            rep.flags[f"I_beta_converges(y={lab})"] = bool(lim.gaps[-1] <= lim.gaps[0] + 1e-12)
        else:
            rep.add_row(f"beta*I_beta(y={lab})", float(lim.beta_times_value[-1]), envelope=lim.perp_half_norm_sq)
    rep.info.update(rf.to_json())
    return rep


def check_puhalskii(ctx: RunContext, p) -> CheckReport:
    closed = ctx.linear_closed and p.M_inner is None
    U = ctx.solution(closed_form=True) if closed else ctx.fast_solution(p.N, 2000)
    B = ctx.target_B(p.N, p.n_B)
    M_inner = p.M_inner if p.M_inner is not None else (None if closed else 512)
    # each path costs n * M_inner evaluations of U, so this check keeps its own path count
    cfg = replace(ctx.experiment, M=p.M)
    return mv.puhalskii_condition_check(cfg, ctx.model, U, B, M_inner=M_inner)


def check_dembo(ctx: RunContext, p) -> CheckReport:
    B = ctx.exact_B()
    if B is not None:
        U = ctx.solution(closed_form=True)
        Bc = B

        def B_of_x(x):
            return np.broadcast_to(Bc, (np.asarray(x).shape[0],) + Bc.shape)

    else:
        if ctx.model.d != 1:
            raise UnsupportedVariant("dembo check with a simulated B(x) needs a scalar chain")
        U = ctx.fast_solution(p.N, p.M_U)
        grid = np.linspace(p.grid[0], p.grid[1], p.grid_points)
        B_of_x = tabulated_conditional_covariance(ctx.model, U, grid[:, None], p.M_cond, ctx.seed)
        # B as the stationary average of the tabulated B(x), so h is centred
        xs = stationary_sample(ctx.sampler, CENTER_COUNT // 4, ctx.seed)
        Bc = np.asarray(B_of_x(xs)).mean(axis=0)
    return mv.dembo_average_check(ctx.experiment, ctx.model, B_of_x, Bc, sampler=ctx.sampler)


def check_tail_probability(ctx: RunContext, p) -> CheckReport:
    cfg = ctx.experiment
    rep = CheckReport("tail_probability")
    if not cfg.y_grid:
        raise ContractViolation("tail_probability needs experiment.y_grid")
    q = ctx.observable.out_dim
    B = ctx.target_B(p.N, p.n_B) if p.kind == "halfspace" else None
    for y in cfg.y_grid:
        yv = np.full(q, y)
        ts = mv.tail_probability(cfg, ctx.model, ctx.observable, yv, p.eps, p.kind, ctx.sampler if p.stationary_start else None)
        target = None if B is None else -mv.halfspace_rate(B, yv)
        for t in ts:
            mv._add_tail_rows(rep, t, f"{p.kind}:y={y:g}", target)
        if target is not None and math.isfinite(target):
            rep.flags[f"gap_to_rate_nonincreasing(y={y:g})"] = mv.gaps_to_rate_nonincreasing(ts, target)
        rep.info[f"exponents_nonincreasing(y={y:g})"] = mv.exponents_nonincreasing(ts)
    return rep


def check_negligibility(ctx: RunContext, p) -> CheckReport:
    U = None
    if p.quantity != "state":
        U = ctx.fast_solution(p.N, p.M_U)
    return mv.negligibility_check(ctx.experiment, ctx.model, p.quantity, U)


def check_geometric_noise_tail(ctx: RunContext, p) -> CheckReport:
    cfg = ctx.experiment
    noise = ctx.model.noise
    delta = noise.delta if p.delta is None else p.delta
    return mv.geometric_noise_tail_check(p.rho, noise, delta, cfg.alpha, cfg.epsilon, cfg.n_grid, cfg.M, ctx.seed)


def check_martingale_tail(ctx: RunContext, p) -> CheckReport:
    cfg = ctx.experiment
    spec = mv.IncrementSpec(p.family, p.scale)
    return mv.martingale_tail_bound_check(spec, cfg.alpha, p.eps, cfg.n_grid, cfg.M, ctx.seed)


def check_gaussian_perturbation(ctx: RunContext, p) -> CheckReport:
    cfg = ctx.experiment
    rep = CheckReport("gaussian_perturbation")
    ok = True
    for beta in p.betas:
        for eta in p.etas:
            sub = mv.gaussian_perturbation_tail(beta, eta, cfg.alpha, cfg.n_grid)
            for r in sub.rows:
                rep.rows.append({**r, "quantity": f"{r['quantity']}(beta={beta:g};eta={eta:g})"})
            ok &= sub.flags["exact_below_bound"]
    rep.flags["exact_below_bound"] = bool(ok)
    rep.hard = ("exact_below_bound",)
    return rep


def check_exotic_mdp(ctx: RunContext, p) -> CheckReport:
    v = ctx.model.variant
    if ctx.model.kind != "exotic":
        raise UnsupportedVariant("exotic_mdp needs model.variant = exotic")
    return mv.exotic_mdp_experiment(ctx.experiment, v.m, ctx.model.noise)


REGISTRY: dict[str, Callable[[RunContext, object], CheckReport]] = {
    "contraction": check_contraction,
    "poisson_oracle": check_poisson_oracle,
    "covariance": check_covariance,
    "telescoping": check_telescoping,
    "rate_function": check_rate_function,
    "puhalskii": check_puhalskii,
    "dembo": check_dembo,
    "tail_probability": check_tail_probability,
    "negligibility": check_negligibility,
    "geometric_noise_tail": check_geometric_noise_tail,
    "martingale_tail": check_martingale_tail,
    "gaussian_perturbation": check_gaussian_perturbation,
    "exotic_mdp": check_exotic_mdp,
}

# chains -> poisson -> ratefn -> mdp_verify
STAGE = {
    "contraction": 0,
    "poisson_oracle": 1,
    "covariance": 1,
    "telescoping": 1,
    "rate_function": 2,
}


def ordered(checks: list) -> list:
    """Stable sort of check params into dependency order."""
    return sorted(checks, key=lambda c: STAGE.get(c.id, 3))
