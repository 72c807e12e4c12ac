"""Markov chain models X_n = f(X_{n-1}, xi_n): definitions, gates and simulators.

Three families are supported:

* ``NonlinearLipschitz`` -- a catalog map with a known Lipschitz certificate,
* ``LinearAR``           -- X_n = A X_{n-1} + xi_n with spectral radius of A below 1,
* ``ExoticSign``         -- scalar X_n = X_{n-1} - m sign(X_{n-1}) + xi_n, sign(0) = 0.

State norms ``|x|`` are L1 norms throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _rng
from .errors import (
    AdmissibilityError,
    ContractViolation,
    ConvergenceError,
    DivergentMomentError,
    UnsupportedVariant,
)
from .noise import NoiseSpec

SPECTRAL_GATE = "spectral-radius gate: eigenvalues of A must lie strictly inside the unit circle"
LIPSCHITZ_GATE = "contraction gate: Lipschitz modulus of f in the state must be < 1"
EXOTIC_GATE = "drift gate: m must exceed log(E exp(delta|xi|)) / delta"


def l1(x: np.ndarray) -> np.ndarray:
    return np.abs(x).sum(axis=-1)


@dataclass(frozen=True, eq=False)
class LipschitzCertificate:
    """Per-coordinate moduli ``rho_matrix[i, j]`` of f_i in x_j, and noise modulus ``ell``.

    ``rho`` is the largest entry. ``contraction`` is the induced L1 modulus
    (largest column sum), which is what actually bounds |f(x',v) - f(x'',v)|;
    the two coincide for componentwise maps.
    """

    rho_matrix: np.ndarray
    ell: float = 1.0

    def __post_init__(self):
        rm = np.atleast_2d(np.asarray(self.rho_matrix, dtype=float))
        object.__setattr__(self, "rho_matrix", rm)
        if rm.shape[0] != rm.shape[1]:
            raise ContractViolation("rho_matrix must be square")
        if np.any(rm < 0) or self.ell < 0:
            raise ContractViolation("Lipschitz moduli must be nonnegative")

    @property
    def rho(self) -> float:
        return float(self.rho_matrix.max())

    @property
    def contraction(self) -> float:
        return float(self.rho_matrix.sum(axis=0).max())


# ---------------------------------------------------------------------------
# map catalog: name -> (f(x, params), certificate(params, d))


def _scaled_tanh(x, params):
    return params["scale"] * np.tanh(x)


def _scaled_tanh_cert(params, d):
    return LipschitzCertificate(abs(params["scale"]) * np.eye(d))


def _clipped_affine(x, params):
    return np.clip(params["slope"] * x + params.get("intercept", 0.0), -params["bound"], params["bound"])


def _clipped_affine_cert(params, d):
    return LipschitzCertificate(abs(params["slope"]) * np.eye(d))


def _mixing_sine(x, params):
    C = np.asarray(params["C"], dtype=float)
    return np.sin(x) @ C.T


def _mixing_sine_cert(params, d):
    return LipschitzCertificate(np.abs(np.asarray(params["C"], dtype=float)))


MAP_CATALOG: dict[str, tuple[Callable, Callable]] = {
    "scaled_tanh": (_scaled_tanh, _scaled_tanh_cert),
    "clipped_affine": (_clipped_affine, _clipped_affine_cert),
    "mixing_sine": (_mixing_sine, _mixing_sine_cert),
}


@dataclass(frozen=True, eq=False)
class NonlinearLipschitz:
    """f(x, xi) = g(x) + xi for a catalog drift g (or a user ``func`` with its own certificate)."""

    map_id: str
    params: dict = field(default_factory=dict)
    d: int = 1
    certificate: LipschitzCertificate | None = None
    func: Callable | None = None

    def __post_init__(self):
        if self.map_id in MAP_CATALOG:
            g, cert = MAP_CATALOG[self.map_id]
            if self.func is None:
                object.__setattr__(self, "func", lambda x, _g=g, _p=self.params: _g(x, _p))
            if self.certificate is None:
                object.__setattr__(self, "certificate", cert(self.params, self.d))
        elif self.func is None or self.certificate is None:
            raise ContractViolation(f"map {self.map_id!r} is not in the catalog; supply func and certificate")
        if self.certificate.rho_matrix.shape != (self.d, self.d):
            raise ContractViolation("certificate dimension does not match d")


@dataclass(frozen=True, eq=False)
class LinearAR:
    A: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if A.shape[0] != A.shape[1]:
            raise ContractViolation("A must be square")
        object.__setattr__(self, "A", A)

    @property
    def d(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True, eq=False)
class ExoticSign:
    m: float
    d: int = 1

    def __post_init__(self):
        if not self.m > 0:
            raise ContractViolation("drift magnitude m must be > 0")
        if self.d != 1:
            raise ContractViolation("ExoticSign is scalar (d = 1)")


@dataclass(frozen=True, eq=False)
class ChainModel:
    """A recursion variant plus its noise law. Construction enforces the admissibility gates."""

    variant: NonlinearLipschitz | LinearAR | ExoticSign
    noise: NoiseSpec

    def __post_init__(self):
        v = self.variant
        if self.noise.p != self.d:
            raise ContractViolation(f"noise dimension {self.noise.p} must equal state dimension {self.d}")
        if isinstance(v, NonlinearLipschitz):
            if not v.certificate.contraction < 1:
                raise AdmissibilityError(LIPSCHITZ_GATE, f"certified modulus {v.certificate.contraction} >= 1")
        elif isinstance(v, LinearAR):
            r = spectral_radius(v.A)
            if not r < 1:
                raise AdmissibilityError(SPECTRAL_GATE, f"spectral radius {r:.6g} >= 1")
        elif isinstance(v, ExoticSign):
            adm = exotic_admissibility(v.m, self.noise, self.noise.delta)
            if not adm.admissible:
                raise AdmissibilityError(
                    EXOTIC_GATE, f"m={v.m} <= threshold {adm.threshold:.6g} at delta={self.noise.delta}"
                )
        else:
            raise ContractViolation(f"unknown variant {type(v).__name__}")

    @property
    def d(self) -> int:
        return self.variant.d

    @property
    def p(self) -> int:
        return self.noise.p

    @property
    def kind(self) -> str:
        return {NonlinearLipschitz: "nonlinear", LinearAR: "linear_ar", ExoticSign: "exotic"}[type(self.variant)]

    def apply(self, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """Vectorised f over leading batch axes: x (..., d), xi (..., p)."""
        v = self.variant
        if isinstance(v, LinearAR):
            return x @ v.A.T + xi
        if isinstance(v, ExoticSign):
            return x - v.m * np.sign(x) + xi
        return v.func(x) + xi

    def f00(self) -> np.ndarray:
        return self.apply(np.zeros(self.d), np.zeros(self.p))

    @property
    def ell(self) -> float:
        """Noise modulus of f; additive noise throughout, so 1 unless certified otherwise."""
        v = self.variant
        return v.certificate.ell if isinstance(v, NonlinearLipschitz) else 1.0

    def contraction_constants(self) -> tuple[float, float]:
        """(K, rho) with |X^x'_n - X^x''_n| <= K rho^n |x' - x''| for coupled paths."""
        v = self.variant
        if isinstance(v, NonlinearLipschitz):
            return 1.0, v.certificate.contraction
        if isinstance(v, LinearAR):
            return linear_power_bound(v.A)
        raise UnsupportedVariant("the sign chain has no global coupling contraction")

    def stationary_abs_mean_bound(self) -> float:
        """Upper bound on E_mu|X| from the one-step moment recursion."""
        K, rho = self.contraction_constants()
        if isinstance(self.variant, LinearAR):
            return K * self.noise.abs_mean() / (1 - rho)
        return (float(l1(self.f00())) + self.ell * self.noise.abs_mean()) / (1 - rho)


# ---------------------------------------------------------------------------
# spectral helpers


def spectral_radius(A) -> float:
    """Largest eigenvalue modulus of a square matrix."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape[0] != A.shape[1]:
        raise ContractViolation("spectral_radius needs a square matrix")
    try:
        ev = np.linalg.eigvals(A)
    except np.linalg.LinAlgError as exc:
        # residual of the best available Schur-free estimate: ||A||_2 as an upper bound
        raise ConvergenceError(f"eigensolver failed: {exc}", float(np.linalg.norm(A, 2))) from exc
    return float(np.max(np.abs(ev)))


def linear_power_bound(A, max_power: int = 10_000) -> tuple[float, float]:
    """Explicit (K, rho) with ||A^n||_1 <= K rho^n for all n >= 0.

    Diagonalisable A: rho is the spectral radius and K = ||T||_1 ||T^-1||_1.
    Otherwise (defective or badly conditioned eigenbasis) rho is pushed halfway
    to 1 and K is the largest observed ||A^n||_1 / rho^n.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    r = spectral_radius(A)
    w, T = np.linalg.eig(A)
    cond = np.linalg.cond(T, 1) if np.all(np.isfinite(T)) else np.inf
    if cond < 1e8:
        return float(cond), r
    rho = 0.5 * (1.0 + r)
    K, P = 1.0, np.eye(A.shape[0])
    for k in range(1, max_power + 1):
        P = P @ A
        ratio = np.linalg.norm(P, 1) / rho**k
        K = max(K, ratio)
        if ratio < 1e-3 * K and k > 10:
            break
    return float(K), rho


# ---------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True, eq=False)
class Trajectory:
    x0: np.ndarray
    states: np.ndarray  # (n+1, d), states[0] == x0
    noises: np.ndarray  # (n, p), noises[k-1] drives states[k]
    seed: int
    stream: int

    @property
    def n(self) -> int:
        return self.noises.shape[0]

    def replay_error(self, model: ChainModel) -> float:
        """max |states[k] - f(states[k-1], noises[k])|; zero for an untampered trajectory."""
        err = 0.0
        for k in range(1, self.n + 1):
            err = max(err, float(np.max(np.abs(self.states[k] - step(model, self.states[k - 1], self.noises[k - 1])))))
        return err

    def to_csv(self, path) -> None:
        d = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + [f"x_{j + 1}" for j in range(d)])
            for k, row in enumerate(self.states):
                w.writerow([k] + [format(float(v), ".17g") for v in row])


def _check_vec(v, dim: int, what: str) -> np.ndarray:
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if v.shape != (dim,):
        raise ContractViolation(f"{what} must have shape ({dim},), got {v.shape}")
    return v


def step(model: ChainModel, x, xi) -> np.ndarray:
    x = _check_vec(x, model.d, "state")
    xi = _check_vec(xi, model.p, "noise")
    return model.apply(x, xi)


def _run(model: ChainModel, x0: np.ndarray, noises: np.ndarray) -> np.ndarray:
    states = np.empty((noises.shape[0] + 1, model.d))
    states[0] = x0
    for k in range(noises.shape[0]):
        states[k + 1] = model.apply(states[k], noises[k])
    return states


def simulate(model: ChainModel, x0, n: int, seed: int, stream_index: int = 0, noises=None) -> Trajectory:
    """One seeded trajectory of length ``n``; ``noises`` may be supplied to drive it explicitly."""
    if n < 1:
        raise ContractViolation("n must be >= 1")
    x0 = _check_vec(x0, model.d, "x0")
    if noises is None:
        noises = model.noise.sample(_rng.stream(seed, "trajectory", stream_index), (n,))
    else:
        noises = np.asarray(noises, dtype=float).reshape(n, model.p)
    return Trajectory(x0, _run(model, x0, noises), noises, seed, stream_index)


def simulate_coupled(model: ChainModel, x0a, x0b, n: int, seed: int, stream_index: int = 0):
    """Two trajectories from different starts driven by the identical noise sequence."""
    ta = simulate(model, x0a, n, seed, stream_index)
    x0b = _check_vec(x0b, model.d, "x0b")
    tb = Trajectory(x0b, _run(model, x0b, ta.noises), ta.noises, seed, stream_index)
    return ta, tb


@dataclass
class ContractionReport:
    max_ratio: float
    bound: float
    K: float
    rho: float
    n: int
    trials: int
    roundoff: float = 0.0

    @property
    def passed(self) -> bool:
        return self.max_ratio <= self.bound * (1 + 1e-12) + self.roundoff


def contraction_check(model: ChainModel, trials: int, n: int, seed: int, spread: float = 3.0) -> ContractionReport:
    """sup over random start pairs of |X'_n - X''_n| / |x' - x''| against K rho^n."""
    if isinstance(model.variant, ExoticSign):
        raise UnsupportedVariant("no global contraction is claimed for the sign chain")
    K, rho = model.contraction_constants()
    rng = _rng.stream(seed, "contraction")
    xa = spread * rng.standard_normal((trials, model.d))
    xb = spread * rng.standard_normal((trials, model.d))
    noises = model.noise.sample(rng, (n, trials))
    a, b = xa, xb
    for k in range(n):
        a = model.apply(a, noises[k])
        b = model.apply(b, noises[k])
    d0 = l1(xa - xb)
    ratio = l1(a - b) / d0
    # a and b are computed separately, so their difference carries absolute roundoff
    slack = float(np.max(64 * np.finfo(float).eps * (l1(a) + l1(b) + 1.0) / d0))
    return ContractionReport(float(ratio.max()), K * rho**n, K, rho, n, trials, slack)


# ---------------------------------------------------------------------------
# exponential moments and the sign-chain drift condition


@dataclass
class MomentEstimate:
    value: float
    se: float
    method: str
    mc_value: float | None = None
    mc_se: float | None = None


def exponential_moment(noise: NoiseSpec, delta: float, M: int = 0, seed: int = 0) -> MomentEstimate:
    """E exp(delta |xi_1|) (L1 norm), closed form where available, Monte Carlo otherwise.

    With ``M > 0`` a Monte Carlo cross-check is attached to closed-form results.
    """
    if delta < 0:
        raise ContractViolation("delta must be >= 0")
    if delta == 0:
        return MomentEstimate(1.0, 0.0, "closed_form")
    if delta >= noise.moment_range():
        raise DivergentMomentError(f"E exp(delta|xi|) diverges for delta={delta} >= {noise.moment_range()}")

    mc_value = mc_se = None
    if M > 0:
        vals = _rng.fan_out(M, seed, "exp-moment", lambda rng, s: np.exp(delta * l1(noise.sample(rng, (s,)))))
        mc_value = float(np.mean(vals))
        mc_se = float(np.std(vals, ddof=1) / math.sqrt(M)) if M > 1 else math.inf

    comp = noise.component_log_mgf_abs(delta)
    if math.isnan(comp):
        if mc_value is None:
            raise ContractViolation("no closed form for this noise law; pass M > 0 for Monte Carlo")
        return MomentEstimate(mc_value, mc_se, "monte_carlo")
    return MomentEstimate(math.exp(noise.p * comp), 0.0, "closed_form", mc_value, mc_se)


@dataclass
class ExoticAdmissibility:
    admissible: bool
    threshold: float
    ell: float
    rho: float
    delta: float


def exotic_admissibility(m: float, noise: NoiseSpec, delta: float | None = None) -> ExoticAdmissibility:
    """Drift condition m > log(E e^{delta|xi|}) / delta and the Lyapunov constants for V(x) = e^{delta|x|}.

    With those constants P_x V <= rho V(x) + ell.
    """
    delta = noise.delta if delta is None else delta
    E = exponential_moment(noise, delta).value
    threshold = math.log(E) / delta
    return ExoticAdmissibility(m > threshold, threshold, math.exp(delta * m) * E, math.exp(-delta * m) * E, delta)


# ---------------------------------------------------------------------------
# stationary sampling


@dataclass(frozen=True, eq=False)
class StationarySampler:
    """Approximate draws from the invariant law by running ``burn_in`` steps from ``x0``.

    ``burn_in`` defaults to the smallest n with rho^n (1 + |x0|) < tol for
    contraction models, ceil(10 / (1 - spectral radius)) for linear models and
    the Lyapunov analogue rho_V^n e^{delta|x0|} < tol for the sign chain.
    """

    model: ChainModel
    burn_in: int | None = None
    x0: np.ndarray | None = None
    tol: float = 1e-6
    method: str = "forward"

    def __post_init__(self):
        x0 = np.zeros(self.model.d) if self.x0 is None else _check_vec(self.x0, self.model.d, "x0")
        object.__setattr__(self, "x0", x0)
        if self.burn_in is None:
            object.__setattr__(self, "burn_in", default_burn_in(self.model, x0, self.tol))
        if self.burn_in < 1:
            raise ContractViolation("burn_in must be >= 1")
        if self.method not in ("forward", "series"):
            raise ContractViolation("method must be 'forward' or 'series'")
        if self.method == "series" and not isinstance(self.model.variant, LinearAR):
            raise ContractViolation("series sampling is only available for LinearAR")

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """``size`` independent approximate stationary states from one generator."""
        noises = self.model.noise.sample(rng, (self.burn_in, size))
        if self.method == "series":
            A = self.model.variant.A
            x = self.x0 @ np.linalg.matrix_power(A, self.burn_in).T + np.zeros((size, 1))
            P = np.eye(A.shape[0])
            for i in range(self.burn_in):
                x = x + noises[i] @ P.T
                P = A @ P
            return x
        x = np.broadcast_to(self.x0, (size, self.model.d)).copy()
        for k in range(self.burn_in):
            x = self.model.apply(x, noises[k])
        return x


def default_burn_in(model: ChainModel, x0: np.ndarray, tol: float = 1e-6) -> int:
    v = model.variant
    if isinstance(v, LinearAR):
        return max(1, math.ceil(10.0 / (1.0 - spectral_radius(v.A))))
    if isinstance(v, ExoticSign):
        adm = exotic_admissibility(v.m, model.noise)
        return max(1, math.ceil((adm.delta * float(l1(x0)) - math.log(tol)) / -math.log(adm.rho)))
    rho = v.certificate.contraction
    if rho == 0:
        return 1
    return max(1, math.ceil(math.log(tol / (1.0 + float(l1(x0)))) / math.log(rho)))


def stationary_sample(sampler: StationarySampler, count: int, seed: int) -> np.ndarray:
    """``count`` approximately mu-distributed states, shape (count, d)."""
    return _rng.fan_out(count, seed, "stationary", sampler.draw)


def moment_bound(model: ChainModel, x0_abs_mean: float) -> float:
    """sup_n E|X_n| <= E|X_0| + (|f(0,0)| + ell E|xi|) / (1 - rho) for contraction models."""
    _, rho = model.contraction_constants()
    return x0_abs_mean + (float(l1(model.f00())) + model.ell * model.noise.abs_mean()) / (1 - rho)
