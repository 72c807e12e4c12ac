"""Poisson equation U = H + P U, martingale decomposition and asymptotic covariance.

The Monte Carlo solver sums the series U(x) = H(x) + sum_n P^n H(x) with a
coupled control variate: a chain started at x and a chain started from the
invariant law share every noise draw, so the summand H(X^x_n) - H(X^mu_n)
has the right mean (the stationary term is centred) and shrinks like rho^n.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import _rng
from .chains import ChainModel, LinearAR, StationarySampler, Trajectory, l1, stationary_sample
from .errors import ContractViolation, TruncationError, UnsupportedVariant

_CHUNK_ELEMS = 4_000_000


# ---------------------------------------------------------------------------
# observables


@dataclass(frozen=True, eq=False)
class ObservableSpec:
    """H(x) = raw(x) - centering, mapping (..., d) -> (..., q).

    ``linear`` holds C when raw(x) = C x, which enables closed forms on
    linear chains. ``lipschitz_K`` is the L1 Lipschitz constant of raw
    (None when H is not Lipschitz, e.g. the sign observable).
    """

    raw: Callable[[np.ndarray], np.ndarray]
    out_dim: int
    lipschitz_K: float | None
    name: str = "custom"
    centering: np.ndarray | None = None
    centering_se: np.ndarray | None = None
    linear: np.ndarray | None = None

    def __post_init__(self):
        z = np.zeros(self.out_dim)
        if self.centering is None:
            object.__setattr__(self, "centering", z)
        if self.centering_se is None:
            object.__setattr__(self, "centering_se", z.copy())

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.raw(np.asarray(x, dtype=float)) - self.centering

    def with_centering(self, c, se=None) -> "ObservableSpec":
        c = np.atleast_1d(np.asarray(c, dtype=float))
        se = np.zeros_like(c) if se is None else np.atleast_1d(np.asarray(se, dtype=float))
        return replace(self, centering=c, centering_se=se)

    @property
    def is_zero(self) -> bool:
        return self.name == "zero"


def identity_observable(d: int = 1) -> ObservableSpec:
    return ObservableSpec(lambda x: x, d, 1.0, "identity", linear=np.eye(d))


def linear_observable(C) -> ObservableSpec:
    C = np.atleast_2d(np.asarray(C, dtype=float))
    K = float(np.abs(C).sum(axis=0).max())
    return ObservableSpec(lambda x, C=C: x @ C.T, C.shape[0], K, "linear", linear=C)


def tanh_observable(d: int = 1) -> ObservableSpec:
    return ObservableSpec(np.tanh, d, 1.0, "tanh")


def sign_observable() -> ObservableSpec:
    return ObservableSpec(np.sign, 1, None, "sign")


def zero_observable(d: int = 1, q: int = 1) -> ObservableSpec:
    return ObservableSpec(lambda x, q=q: np.zeros(x.shape[:-1] + (q,)), q, 0.0, "zero", linear=np.zeros((q, d)))


def stationary_mean_linear(model: ChainModel) -> np.ndarray:
    """E_mu X = (I - A)^{-1} E xi for a linear chain."""
    A = model.variant.A
    return np.linalg.solve(np.eye(A.shape[0]) - A, np.full(A.shape[0], model.noise.mean))


def center(observable: ObservableSpec, sampler: StationarySampler, count: int = 1_000_000, seed: int = 0):
    """Centre H so that its invariant mean vanishes.

    Linear observables on linear chains are centred analytically; otherwise
    the invariant mean is estimated from ``count`` stationary draws and its
    standard error is kept on the returned spec.
    """
    model = sampler.model
    if observable.linear is not None and isinstance(model.variant, LinearAR):
        return observable.with_centering(observable.linear @ stationary_mean_linear(model))
    xs = stationary_sample(sampler, count, seed)
    h = observable.raw(xs)
    return observable.with_centering(h.mean(axis=0), h.std(axis=0, ddof=1) / math.sqrt(count))


@dataclass
class CenteringCheck:
    mean: np.ndarray
    se: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.mean) <= 3 * self.se + 1e-15))


def centering_check(observable: ObservableSpec, sampler: StationarySampler, count: int, seed: int) -> CenteringCheck:
    h = observable(stationary_sample(sampler, count, seed))
    return CenteringCheck(h.mean(axis=0), h.std(axis=0, ddof=1) / math.sqrt(count))


# ---------------------------------------------------------------------------
# Poisson solution


@dataclass
class UEstimate:
    value: np.ndarray
    se: np.ndarray
    tail_bound: np.ndarray

    @property
    def error(self) -> np.ndarray:
        return self.se + self.tail_bound


class PoissonSolution:
    """Point evaluator for U(x) with error metadata.

    Closed form on linear chains with linear H: U(x) = C (I - A)^{-1} (x - x_bar).
    Otherwise a truncated coupled series with ``N`` terms and ``M`` paths.
    All evaluations share one set of random draws, so for a fixed seed the
    estimate is a deterministic (and Lipschitz) function of x.
    """

    def __init__(
        self,
        model: ChainModel,
        observable: ObservableSpec,
        N: int = 60,
        M: int = 10_000,
        seed: int = 0,
        antithetic: bool = True,
        closed_form: bool | None = None,
        sampler: StationarySampler | None = None,
    ):
        if N < 1 or M < 1:
            raise ContractViolation("N and M must be >= 1")
        self.model = model
        self.observable = observable
        self.N = N
        self.M = M + (M % 2 if antithetic else 0)
        self.seed = seed
        self.antithetic = antithetic
        self.sampler = sampler or StationarySampler(model)
        can_close = observable.linear is not None and isinstance(model.variant, LinearAR)
        if closed_form is None:
            closed_form = can_close
        if closed_form and not can_close:
            raise ContractViolation("closed form needs a linear chain and a linear observable")
        self.closed_form = closed_form
        if model.kind == "exotic":
            raise UnsupportedVariant("no Poisson solution is computed for the sign chain")
        self._cache: dict[bytes, np.ndarray] = {}
        self._draws = None
        if closed_form:
            A = model.variant.A
            self._x_bar = stationary_mean_linear(model)
            self._G = observable.linear @ np.linalg.inv(np.eye(A.shape[0]) - A)
            gap = np.abs(observable.centering - observable.linear @ self._x_bar)
            if np.any(gap > np.maximum(1e-9, 3 * observable.centering_se)):
                raise ContractViolation("observable is not centred for this chain")

    @property
    def q(self) -> int:
        return self.observable.out_dim

    # -- random draws shared by every evaluation
    def _get_draws(self):
        if self._draws is None:
            model, N, sampler = self.model, self.N, self.sampler

            def block(rng, size):
                half = (size + 1) // 2 if self.antithetic else size
                burn = model.noise.sample(rng, (sampler.burn_in, half))
                fwd = model.noise.sample(rng, (N, half))
                if self.antithetic:
                    burn = np.concatenate([burn, model.noise.reflect(burn)], axis=1)
                    fwd = np.concatenate([fwd, model.noise.reflect(fwd)], axis=1)
                    # interleave so pairs stay adjacent
                    order = np.arange(2 * half).reshape(2, half).T.ravel()
                    burn, fwd = burn[:, order][:, :size], fwd[:, order][:, :size]
                x = np.broadcast_to(sampler.x0, (size, model.d)).copy()
                for k in range(sampler.burn_in):
                    x = model.apply(x, burn[k])
                return x, np.swapaxes(fwd, 0, 1)

            block_size = _rng.BLOCK_SIZE
            starts, fwd = _rng.fan_out(self.M, self.seed, "poisson", block, block_size)
            fwd = np.swapaxes(fwd, 0, 1)  # (N, M, p)
            H = self.observable
            mu_sum = np.zeros((self.M, self.q))
            x = starts
            for n in range(N):
                x = model.apply(x, fwd[n])
                mu_sum += H(x)
            self._draws = (starts, fwd, mu_sum)
        return self._draws

    def _pair_reduce(self, per_path: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mean and standard error over the path axis (-2), pairing antithetic partners."""
        if self.antithetic:
            per_path = 0.5 * (per_path[..., 0::2, :] + per_path[..., 1::2, :])
        m = per_path.shape[-2]
        mean = per_path.mean(axis=-2)
        se = per_path.std(axis=-2, ddof=1) / math.sqrt(m) if m > 1 else np.full_like(mean, np.inf)
        return mean, se

    def _mc_series(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        _, fwd, mu_sum = self._get_draws()
        H, model = self.observable, self.model
        out_v = np.empty((pts.shape[0], self.q))
        out_s = np.empty_like(out_v)
        chunk = max(1, _CHUNK_ELEMS // (self.M * max(model.d, self.q)))
        for lo in range(0, pts.shape[0], chunk):
            p = pts[lo : lo + chunk]
            x = np.broadcast_to(p[:, None, :], (p.shape[0], self.M, model.d)).copy()
            acc = np.zeros((p.shape[0], self.M, self.q))
            for n in range(self.N):
                x = model.apply(x, fwd[n])
                acc += H(x)
            mean, se = self._pair_reduce(acc - mu_sum[None])
            out_v[lo : lo + chunk] = H(p) + mean
            out_s[lo : lo + chunk] = se
        return out_v, out_s

    def _points(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        pts = x.reshape(-1, self.model.d)
        return pts, single

    def evaluate(self, x) -> UEstimate:
        """Estimate, standard error and deterministic tail bound at one point (d,) or a batch (k, d)."""
        pts, single = self._points(x)
        tail = self.tail_bound(pts)
        if self.closed_form:
            val = (pts - self._x_bar) @ self._G.T
            se = np.zeros_like(val)
        else:
            val, se = self._mc_series(pts)
            se = se + self.observable.centering_se
        if single:
            return UEstimate(val[0], se[0], tail[0])
        return UEstimate(val, se, tail)

    def __call__(self, x) -> np.ndarray:
        """U values only; MC evaluations at single points are cached."""
        x = np.asarray(x, dtype=float)
        if self.closed_form or x.ndim > 1:
            return self.evaluate(x).value
        key = x.tobytes()
        if key not in self._cache:
            self._cache[key] = self.evaluate(x).value
        return self._cache[key]

    def values(self, x: np.ndarray) -> np.ndarray:
        """U at an arbitrary batch shape (..., d) -> (..., q)."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.model.d)
        return self.evaluate(flat).value.reshape(x.shape[:-1] + (self.q,))

    def tail_bound(self, pts: np.ndarray) -> np.ndarray:
        """K_H K_A rho^{N+1} / (1 - rho) (|x| + E_mu|X|), per output coordinate."""
        pts = np.atleast_2d(pts)
        if self.closed_form or self.observable.lipschitz_K == 0:
            return np.zeros((pts.shape[0], self.q))
        if self.observable.lipschitz_K is None:
            return np.full((pts.shape[0], self.q), np.inf)
        K, rho = self.model.contraction_constants()
        m1 = self.model.stationary_abs_mean_bound()
        b = self.observable.lipschitz_K * K * rho ** (self.N + 1) / (1 - rho) * (l1(pts) + m1)
        return np.repeat(b[:, None], self.q, axis=1)

    def suggested_N(self, x, tol: float) -> int:
        K, rho = self.model.contraction_constants()
        if rho == 0:
            return 1
        scale = (self.observable.lipschitz_K or 0.0) * K * (float(l1(np.atleast_1d(x))) + self.model.stationary_abs_mean_bound())
        if scale <= 0:
            return 1
        return max(1, math.ceil(math.log(tol * (1 - rho) / scale) / math.log(rho)) - 1)

    # -- one-step expectation P_x U
    def P(self, x, M_inner: int | None = None, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """(P_x U, standard error) at a point or batch; exact in closed form."""
        pts, single = self._points(x)
        if self.closed_form:
            A = self.model.variant.A
            val = (pts - self._x_bar) @ A.T @ self._G.T
            se = np.zeros_like(val)
        else:
            if not M_inner or M_inner < 2:
                raise ContractViolation("M_inner >= 2 is needed for a Monte Carlo P_x U")
            xi = self.model.noise.sample(_rng.stream(seed, "inner-P"), (M_inner,))
            nxt = self.model.apply(pts[:, None, :], xi[None, :, :])
            v = self.values(nxt)
            val = v.mean(axis=1)
            se = v.std(axis=1, ddof=1) / math.sqrt(M_inner)
        return (val[0], se[0]) if single else (val, se)


class TabulatedSolution(PoissonSolution):
    """Scalar chains: Monte Carlo U on a grid, linearly interpolated inside it.

    Points outside the grid fall back to the direct Monte Carlo series. The
    tail bound adds the interpolation error L h / 2, where
    L = K_H K_A / (1 - rho) is the Lipschitz constant of U and h the grid step.
    """

    def __init__(self, model, observable, grid, N: int = 60, M: int = 2000, seed: int = 0, **kw):
        super().__init__(model, observable, N=N, M=M, seed=seed, closed_form=False, **kw)
        if model.d != 1:
            raise UnsupportedVariant("tabulation is only available for scalar chains")
        g = np.unique(np.asarray(grid, dtype=float).ravel())
        if g.size < 2:
            raise ContractViolation("grid needs at least two distinct points")
        base = super().evaluate(g[:, None])
        self.grid, self.table, self.table_se = g, base.value, base.se
        K_A, rho = model.contraction_constants()
        L = (observable.lipschitz_K if observable.lipschitz_K is not None else math.inf) * K_A / (1 - rho)
        self.interp_error = 0.5 * L * float(np.max(np.diff(g)))

    def evaluate(self, x) -> UEstimate:
        pts, single = self._points(x)
        z = pts[:, 0]
        inside = (z >= self.grid[0]) & (z <= self.grid[-1])
        val = np.empty((pts.shape[0], self.q))
        se = np.empty_like(val)
        tail = self.tail_bound(pts)
        for j in range(self.q):
            val[inside, j] = np.interp(z[inside], self.grid, self.table[:, j])
            se[inside, j] = np.interp(z[inside], self.grid, self.table_se[:, j])
        tail[inside] += self.interp_error
        if np.any(~inside):
            out = super().evaluate(pts[~inside])
            val[~inside], se[~inside] = out.value, out.se
        if single:
            return UEstimate(val[0], se[0], tail[0])
        return UEstimate(val, se, tail)


def stationary_grid(sampler: StationarySampler, points: int = 201, count: int = 20_000, seed: int = 0, pad: float = 1.0):
    """Evenly spaced scalar grid covering ``count`` stationary draws plus ``pad`` on each side."""
    xs = stationary_sample(sampler, count, seed)[:, 0]
    return np.linspace(xs.min() - pad, xs.max() + pad, points)


def solve_U(model, observable, x, N: int, M: int, seed: int, tol: float | None = None, **kw) -> UEstimate:
    """U(x) with standard error and tail bound; raises TruncationError if the tail exceeds ``tol``."""
    sol = PoissonSolution(model, observable, N=N, M=M, seed=seed, **kw)
    est = sol.evaluate(x)
    if tol is not None and np.max(est.tail_bound) > tol:
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        sug = max(sol.suggested_N(p, tol) for p in pts)
        raise TruncationError(f"tail bound {np.max(est.tail_bound):.3e} exceeds tolerance {tol:.3e}", sug)
    return est


@dataclass
class PoissonResidual:
    residual: np.ndarray
    error: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(np.all(np.abs(self.residual) <= 3 * self.error + 1e-12))


def poisson_residual(model, observable, U: PoissonSolution, x, M: int, seed: int) -> PoissonResidual:
    """U(x) - (1/M) sum_j U(f(x, xi_j)) - H(x) with the combined error it should stay within."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    est = U.evaluate(x)
    if U.closed_form:
        pu, pu_se = U.P(x)
    else:
        xi = model.noise.sample(_rng.stream(seed, "residual"), (M,))
        nxt = U.evaluate(model.apply(x[None, :], xi))
        pu = nxt.value.mean(axis=0)
        pu_se = nxt.value.std(axis=0, ddof=1) / math.sqrt(M) + nxt.se.mean(axis=0)
        pu_se = pu_se + nxt.tail_bound.mean(axis=0)
    res = est.value - pu - observable(x[None, :])[0]
    return PoissonResidual(res, est.error + pu_se)


# ---------------------------------------------------------------------------
# martingale decomposition


@dataclass
class MartingaleDecomposition:
    U_values: np.ndarray  # (n+1, q): U(X_0..X_n)
    PU: np.ndarray  # (n, q): P_{X_{i-1}} U
    increments: np.ndarray  # (n, q): zeta_i
    corrector: np.ndarray  # (n+1, q): U(x0) - U(X_k)
    partial_sums: np.ndarray  # (n+1, q): M_k, M_0 = 0
    H_sums: np.ndarray  # (n+1, q): sum_{i<=k} H(X_{i-1})
    closed_form: bool

    @property
    def telescoping_residual(self) -> float:
        r = self.H_sums - (self.corrector + self.partial_sums)
        return float(np.max(np.abs(r)))


def _cumsum0(a: np.ndarray) -> np.ndarray:
    out = np.zeros((a.shape[0] + 1,) + a.shape[1:])
    np.cumsum(a, axis=0, out=out[1:])
    return out


def martingale_decompose(model, U: PoissonSolution, trajectory: Trajectory, M_inner: int | None = None, seed: int = 0):
    """Split sum_i H(X_{i-1}) into corrector U(x0) - U(X_n) plus martingale M_n along a trajectory."""
    X = trajectory.states
    Uv = U.values(X)
    PU, _ = U.P(X[:-1], M_inner=M_inner, seed=seed)
    zeta = Uv[1:] - PU
    H = U.observable(X[:-1])
    return MartingaleDecomposition(
        U_values=Uv,
        PU=PU,
        increments=zeta,
        corrector=Uv[0][None, :] - Uv,
        partial_sums=_cumsum0(zeta),
        H_sums=_cumsum0(H),
        closed_form=U.closed_form,
    )


def increment_paths(model, U: PoissonSolution, n: int, paths: int, seed: int, M_inner: int | None = None):
    """zeta_i over many independent stationary-start paths, shape (paths, n, q)."""
    starts = stationary_sample(U.sampler, paths, seed)
    out = np.empty((paths, n, U.q))
    rng = _rng.stream(seed, "increment-paths")
    xi = model.noise.sample(rng, (n, paths))
    x = starts
    for i in range(n):
        pu, _ = U.P(x, M_inner=M_inner, seed=seed + i + 1)
        x = model.apply(x, xi[i])
        out[:, i, :] = U.values(x) - pu
    return out


# ---------------------------------------------------------------------------
# covariances


@dataclass
class CovarianceEstimate:
    B_hat: np.ndarray
    method: str
    se: np.ndarray
    n_or_N: int
    seed: int
    truncation_bound: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "B_hat": [float(v) for v in self.B_hat.ravel()],
            "se": [float(v) for v in self.se.ravel()],
            "n_or_N": int(self.n_or_N),
            "seed": int(self.seed),
        }

    @property
    def psd_ok(self) -> bool:
        tol = 10 * float(np.max(self.se)) + 1e-12
        return bool(np.all(np.linalg.eigvalsh(self.B_hat) >= -tol))


def _sym(B: np.ndarray) -> np.ndarray:
    return 0.5 * (B + np.swapaxes(B, -1, -2))


def conditional_covariance(model, U: PoissonSolution, x, M: int, seed: int, exact: bool | None = None):
    """B(x) = P_x(U U*) - P_x U (P_x U)*, returned with entrywise standard errors.

    ``x`` may be one point (d,) or a batch (k, d). In closed form (linear
    chain, linear H) the exact G Cov(xi) G* is returned unless ``exact=False``.
    """
    pts = np.atleast_2d(np.asarray(x, dtype=float))
    single = np.asarray(x).ndim == 1
    if exact is None:
        exact = U.closed_form
    if exact:
        if not U.closed_form:
            raise ContractViolation("exact B(x) needs the closed-form solution")
        B = U._G @ model.noise.covariance() @ U._G.T
        Bs = np.broadcast_to(B, (pts.shape[0],) + B.shape).copy()
        se = np.zeros_like(Bs)
    else:
        if M < 2:
            raise ContractViolation("M must be >= 2")
        xi = model.noise.sample(_rng.stream(seed, "cond-cov"), (M,))
        v = U.values(model.apply(pts[:, None, :], xi[None]))  # (k, M, q)
        Bs, se = _sample_cov(v)
    return (Bs[0], se[0]) if single else (Bs, se)


def tabulated_conditional_covariance(model, U: PoissonSolution, grid, M: int, seed: int):
    """Scalar chains only: B(x) on a grid, linearly interpolated (held constant beyond the ends).

    Returns a callable mapping states (k, 1) to (k, q, q).
    """
    if model.d != 1:
        raise UnsupportedVariant("tabulated B(x) is only available for scalar chains")
    grid = np.sort(np.asarray(grid, dtype=float).ravel())
    Bs, _ = conditional_covariance(model, U, grid[:, None], M, seed)
    flat = Bs.reshape(len(grid), -1)

    def B_of_x(x):
        x = np.asarray(x, dtype=float).reshape(-1)
        cols = [np.interp(x, grid, flat[:, j]) for j in range(flat.shape[1])]
        return np.stack(cols, axis=-1).reshape(x.shape + Bs.shape[1:])

    return B_of_x


def _sample_cov(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unbiased covariance over axis -2 of (..., M, q) and entrywise SE."""
    M = v.shape[-2]
    c = v - v.mean(axis=-2, keepdims=True)
    prod = c[..., :, None] * c[..., None, :]  # (..., M, q, q)
    B = prod.sum(axis=-3) / (M - 1)
    se = prod.std(axis=-3, ddof=1) / math.sqrt(M)
    return _sym(B), se


def covariance_bounds(model: ChainModel, observable: ObservableSpec) -> tuple[float, float]:
    """(sup trace B(x), Lipschitz modulus of B_pq) from the Lipschitz constants of f and H."""
    K_A, rho = model.contraction_constants()
    K = (observable.lipschitz_K or math.inf) * K_A
    ell = model.ell
    tr = 4 * (K * ell) ** 2 / (1 - rho) ** 2 * model.noise.abs_second_moment()
    lip = 4 * K**2 * ell * rho / (1 - rho) ** 2 * model.noise.abs_mean()
    return tr, lip


def exact_covariance(model: ChainModel, observable: ObservableSpec) -> np.ndarray:
    """B = G Cov(xi) G*, G = C (I - A)^{-1}, for linear chains with linear H."""
    if observable.linear is None or not isinstance(model.variant, LinearAR):
        raise UnsupportedVariant("closed-form B needs a linear chain and a linear observable")
    A = model.variant.A
    G = observable.linear @ np.linalg.inv(np.eye(A.shape[0]) - A)
    return _sym(G @ model.noise.covariance() @ G.T)


def asymptotic_covariance_series(
    model, observable, N: int, M: int, seed: int, tol: float | None = None, sampler: StationarySampler | None = None
) -> CovarianceEstimate:
    """B = E_mu[H H*] + sum_{n<=N} E_mu[H (P^n H)* + (P^n H) H*] by stationary sampling.

    P^n H(X_0) is estimated as H(X^{X_0}_n) - H(X^{X'_0}_n) with X'_0 an
    independent stationary start sharing the forward noise.
    """
    sampler = sampler or StationarySampler(model)
    q = observable.out_dim

    def block(rng, size):
        x0 = sampler.draw(rng, size)
        x1 = sampler.draw(rng, size)
        fwd = model.noise.sample(rng, (N, size))
        h0 = observable(x0)
        a, b = x0, x1
        acc = np.zeros((size, q))
        for n in range(N):
            a = model.apply(a, fwd[n])
            b = model.apply(b, fwd[n])
            acc += observable(a) - observable(b)
        term = h0[:, :, None] * h0[:, None, :] + h0[:, :, None] * acc[:, None, :] + acc[:, :, None] * h0[:, None, :]
        bound_terms = l1(h0) * (l1(x0) + model.stationary_abs_mean_bound()) if observable.lipschitz_K else np.zeros(size)
        return term, bound_terms

    terms, bt = _rng.fan_out(M, seed, "cov-series", block)
    B = _sym(terms.mean(axis=0))
    se = terms.std(axis=0, ddof=1) / math.sqrt(M)
    K_A, rho = model.contraction_constants()
    K = observable.lipschitz_K or 0.0
    trunc = 2 * K * K_A * rho ** (N + 1) / (1 - rho) * float(bt.mean()) if rho > 0 else 0.0
    if tol is not None and trunc > tol:
        scale = 2 * K * K_A * float(bt.mean())
        sug = max(1, math.ceil(math.log(tol * (1 - rho) / scale) / math.log(rho)) - 1)
        raise TruncationError(f"series truncation bound {trunc:.3e} exceeds {tol:.3e}", sug)
    return CovarianceEstimate(B, "series", _sym(se), N, seed, trunc, {"M": M})


def batch_means_se(series: np.ndarray, batch_size: int | None = None) -> np.ndarray:
    """Standard error of the mean of a correlated series (axis 0) by non-overlapping batch means."""
    n = series.shape[0]
    b = batch_size or max(1, int(math.sqrt(n)))
    a = n // b
    if a < 2:
        return np.full(series.shape[1:], np.inf)
    means = series[: a * b].reshape((a, b) + series.shape[1:]).mean(axis=1)
    var = b * means.var(axis=0, ddof=1)
    return np.sqrt(var / (a * b))


def asymptotic_covariance_ergodic(
    model, U: PoissonSolution, n: int, seed: int, M_inner: int | None = None
) -> CovarianceEstimate:
    """(1/n) sum_i B(X_{i-1}) along one stationary-start trajectory.

    With ``M_inner`` each B(X_{i-1}) is an independent one-step Monte Carlo
    covariance; otherwise the closed-form B(x) is used (method closed_form).
    """
    if n < U.sampler.burn_in:
        raise ContractViolation(f"n must be >= burn_in ({U.sampler.burn_in})")
    x0 = stationary_sample(U.sampler, 1, seed)[0]
    traj = _run_plain(model, x0, n, seed)
    X = traj[:-1]
    if M_inner is None:
        B, _ = conditional_covariance(model, U, X, 2, seed, exact=True)
        method = "closed_form"
    else:
        if M_inner < 2:
            raise ContractViolation("M_inner must be >= 2")
        rng = _rng.stream(seed, "ergodic-inner")
        B = np.empty((n, U.q, U.q))
        chunk = max(1, 200_000 // M_inner)
        for lo in range(0, n, chunk):
            pts = X[lo : lo + chunk]
            xi = model.noise.sample(rng, (pts.shape[0], M_inner))
            v = U.values(model.apply(pts[:, None, :], xi))
            B[lo : lo + chunk], _ = _sample_cov(v)
        method = "ergodic"
    est = B.mean(axis=0)
    se = batch_means_se(B.reshape(n, -1)).reshape(est.shape) if method == "ergodic" else np.zeros_like(est)
    return CovarianceEstimate(_sym(est), method, _sym(se), n, seed, 0.0, {"M_inner": M_inner})


def _run_plain(model: ChainModel, x0: np.ndarray, n: int, seed: int) -> np.ndarray:
    xi = model.noise.sample(_rng.stream(seed, "ergodic-path"), (n,))
    X = np.empty((n + 1, model.d))
    X[0] = x0
    for k in range(n):
        X[k + 1] = model.apply(X[k], xi[k])
    return X


# ---------------------------------------------------------------------------
# increment moments


@dataclass
class IncrementMomentReport:
    second: np.ndarray  # per-step E|zeta_i|^2
    third_exp: np.ndarray  # per-step E|zeta_i|^3 e^{delta|zeta_i|}
    third_exp_alpha: np.ndarray  # per-step E|zeta_i|^3 e^{n^-alpha |zeta_i|}
    second_mean: float
    second_se: float
    third_exp_mean: float
    third_exp_max: float
    growth_slope: float
    growth_flag: bool


def increment_moment_check(increments, alpha: float, delta: float) -> IncrementMomentReport:
    """Moment conditions on martingale increments, per step and overall.

    ``increments``: array (paths, n, q), (n, q) for one path, or a
    MartingaleDecomposition. ``|zeta|`` is the L1 norm; the second moment
    uses zeta* zeta. A per-step second moment that grows significantly with
    i raises ``growth_flag``.
    """
    if isinstance(increments, MartingaleDecomposition):
        increments = increments.increments
    z = np.asarray(increments, dtype=float)
    if z.ndim == 2:
        z = z[None]
    paths, n, _ = z.shape
    sq = (z**2).sum(axis=-1)
    a = np.abs(z).sum(axis=-1)
    third = a**3 * np.exp(delta * a)
    third_alpha = a**3 * np.exp(n ** (-alpha) * a)
    second_step = sq.mean(axis=0)
    flat = sq.ravel()
    second_se = float(flat.std(ddof=1) / math.sqrt(flat.size)) if flat.size > 1 else math.inf
    slope, flag = 0.0, False
    if n > 2:
        i = np.arange(n, dtype=float)
        ic = i - i.mean()
        slope = float((ic * (second_step - second_step.mean())).sum() / (ic**2).sum())
        resid = second_step - second_step.mean() - slope * ic
        s_err = math.sqrt(max((resid**2).sum() / (n - 2), 0.0) / (ic**2).sum())
        flag = abs(slope) > 3 * s_err and abs(slope) * n > 3 * second_se * math.sqrt(n)
    return IncrementMomentReport(
        second_step,
        third.mean(axis=0),
        third_alpha.mean(axis=0),
        float(flat.mean()),
        second_se,
        float(third.mean()),
        float(third.mean(axis=0).max()),
        slope,
        bool(flag),
    )
