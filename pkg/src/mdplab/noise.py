"""Noise laws driving the chains, with closed-form absolute moments."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr

from .errors import ContractViolation, DivergentMomentError

FAMILIES = ("gaussian", "laplace", "uniform", "rademacher")


@dataclass(frozen=True)
class NoiseSpec:
    """i.i.d. noise with ``p`` independent components ``loc + scale * Z``.

    ``Z`` is standard normal, standard Laplace (unit scale), uniform on
    [-1, 1] or a fair sign. ``delta`` is the exponential-moment parameter
    the model is certified with. ``scale == 0`` gives degenerate noise.
    """

    family: str
    scale: float = 1.0
    loc: float = 0.0
    p: int = 1
    delta: float = 0.5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ContractViolation(f"unknown noise family {self.family!r}; expected one of {FAMILIES}")
        if self.scale < 0:
            raise ContractViolation("noise scale must be >= 0")
        if self.p < 1:
            raise ContractViolation("noise dimension p must be >= 1")
        if not self.delta > 0:
            raise ContractViolation("delta must be > 0")
        if self.delta >= self.moment_range():
            raise DivergentMomentError(
                f"E exp(delta|xi|) is infinite for {self.family} with scale {self.scale} at delta={self.delta}"
            )

    def sample(self, rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
        full = tuple(shape) + (self.p,)
        if self.family == "gaussian":
            z = rng.standard_normal(full)
        elif self.family == "laplace":
            z = rng.laplace(0.0, 1.0, full)
        elif self.family == "uniform":
            z = rng.uniform(-1.0, 1.0, full)
        else:
            z = 2.0 * rng.integers(0, 2, full) - 1.0
        return self.loc + self.scale * z

    def reflect(self, xi: np.ndarray) -> np.ndarray:
        """Mirror image of a draw about ``loc``; same law since every family is symmetric."""
        return 2.0 * self.loc - xi

    # ---- per-component moments -------------------------------------------------

    @property
    def mean(self) -> float:
        return self.loc

    @property
    def variance(self) -> float:
        s2 = self.scale**2
        return {"gaussian": s2, "laplace": 2.0 * s2, "uniform": s2 / 3.0, "rademacher": s2}[self.family]

    def component_abs_mean(self) -> float:
        mu, s = self.loc, self.scale
        if s == 0:
            return abs(mu)
        if self.family == "gaussian":
            return s * math.sqrt(2 / math.pi) * math.exp(-(mu**2) / (2 * s**2)) + mu * (1 - 2 * ndtr(-mu / s))
        if self.family == "laplace":
            return abs(mu) + s * math.exp(-abs(mu) / s)
        if self.family == "uniform":
            return abs(mu) if abs(mu) >= s else (mu**2 + s**2) / (2 * s)
        return 0.5 * (abs(mu + s) + abs(mu - s))

    def component_second_moment(self) -> float:
        return self.loc**2 + self.variance

    def component_log_mgf_abs(self, delta: float) -> float:
        """log E exp(delta |xi_j|) for one component; ``inf`` when divergent.

        Returns ``nan`` when no closed form is implemented (laplace and
        uniform with nonzero location).
        """
        mu, s = self.loc, self.scale
        if delta == 0:
            return 0.0
        if s == 0:
            return delta * abs(mu)
        if self.family == "rademacher":
            return math.log(0.5 * (math.exp(delta * abs(mu + s)) + math.exp(delta * abs(mu - s))))
        if self.family == "gaussian":
            a = delta * mu + 0.5 * (delta * s) ** 2 + log_ndtr(mu / s + delta * s)
            b = -delta * mu + 0.5 * (delta * s) ** 2 + log_ndtr(-mu / s + delta * s)
            return float(np.logaddexp(a, b))
        if mu != 0:
            return math.nan
        if self.family == "laplace":
            return math.inf if delta * s >= 1 else -math.log1p(-delta * s)
        # uniform on [-s, s]: |xi| ~ U(0, s)
        x = delta * s
        return x + math.log(-math.expm1(-x) / x)

    def component_log_mgf(self, t: np.ndarray | float) -> np.ndarray:
        """log E exp(t * (xi_j - loc)), the centered cumulant generating function."""
        t = np.asarray(t, dtype=float)
        u = t * self.scale
        if self.family == "gaussian":
            return 0.5 * u**2
        if self.family == "rademacher":
            return np.logaddexp(u, -u) - math.log(2.0)
        if self.family == "laplace":
            with np.errstate(invalid="ignore", divide="ignore"):
                return np.where(np.abs(u) < 1, -np.log1p(-(u**2)), np.inf)
        with np.errstate(invalid="ignore", divide="ignore"):
            au = np.abs(u)
            val = au + np.log(-np.expm1(-2 * au) / (2 * au))
            return np.where(au > 0, val, 0.0)

    # ---- L1 norm of the p-vector -------------------------------------------------

    def abs_mean(self) -> float:
        """E|xi| with |.| the L1 norm."""
        return self.p * self.component_abs_mean()

    def abs_second_moment(self) -> float:
        """E|xi|^2 with |.| the L1 norm."""
        m1 = self.component_abs_mean()
        return self.p * self.component_second_moment() + self.p * (self.p - 1) * m1**2

    def max_abs(self) -> float:
        """Essential supremum of |xi| (inf for unbounded families)."""
        if self.scale == 0:
            return self.p * abs(self.loc)
        if self.family in ("uniform", "rademacher"):
            return self.p * (abs(self.loc) + self.scale)
        return math.inf

    def covariance(self) -> np.ndarray:
        return self.variance * np.eye(self.p)

    def moment_range(self) -> float:
        """Supremum of admissible delta for E exp(delta|xi|) < inf."""
        if self.family == "laplace" and self.scale > 0:
            return 1.0 / self.scale
        return math.inf
