"""Quadratic rate functions built on a symmetric PSD covariance B.

I(y)       = 1/2 y* B+ y   if B+ B y = y, else +infinity   (B+ the Moore-Penrose pseudoinverse)
I_beta(y)  = 1/2 y* (B + beta I)^{-1} y
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation


class _Infinity:
    """Tagged +infinity: the value of the rate function off the range of B."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "INFINITY"

    def __float__(self):
        return math.inf

    def __eq__(self, other):
        return other is self or other == math.inf

    def __hash__(self):
        return hash(math.inf)

    def __gt__(self, other):
        return other is not self

    def __ge__(self, other):
        return True

    def __lt__(self, other):
        return False

    def __le__(self, other):
        return other is self


INFINITY = _Infinity()


@dataclass(frozen=True, eq=False)
class RateFunction:
    B: np.ndarray
    eigvecs: np.ndarray  # columns form the orthogonal T with T* B T diagonal
    eigvals: np.ndarray  # after clipping negatives and zeroing those below the cutoff
    cutoff: float  # absolute eigenvalue threshold
    B_pinv: np.ndarray
    range_projector: np.ndarray  # B+ B
    range_tol: float
    mode: str

    @property
    def rank(self) -> int:
        return int(np.count_nonzero(self.eigvals))

    @property
    def dim(self) -> int:
        return self.B.shape[0]

    def to_json(self) -> dict:
        return {
            "B": [float(v) for v in self.B.ravel()],
            "eigvals": [float(v) for v in self.eigvals],
            "cutoff": float(self.cutoff),
            "rank": self.rank,
        }

    def penrose_residuals(self) -> dict[str, float]:
        """Relative residuals of the four Penrose identities."""
        B, P = self.B, self.B_pinv
        nb = max(np.linalg.norm(B), 1e-300)
        npv = max(np.linalg.norm(P), 1e-300)
        PB, BP = P @ B, B @ P
        return {
            "BPB=B": float(np.linalg.norm(B @ P @ B - B) / nb),
            "PBP=P": float(np.linalg.norm(P @ B @ P - P) / npv),
            "(PB)*=PB": float(np.linalg.norm(PB.T - PB) / max(np.linalg.norm(PB), 1.0)),
            "(BP)*=BP": float(np.linalg.norm(BP.T - BP) / max(np.linalg.norm(BP), 1.0)),
        }

    def decomposition_residuals(self) -> tuple[float, float]:
        """(||T* T - I||, ||B - T diag T*|| / ||B||) for the stored eigendecomposition."""
        T = self.eigvecs
        orth = float(np.max(np.abs(T.T @ T - np.eye(self.dim))))
        lam = np.linalg.eigvalsh(self.B)
        recon = T @ np.diag(lam) @ T.T
        return orth, float(np.linalg.norm(self.B - recon) / max(np.linalg.norm(self.B), 1e-300))


def build(
    B_hat,
    cutoff: float | None = None,
    se=None,
    sym_tol: float | None = None,
    range_tol: float | None = None,
) -> RateFunction:
    """Eigendecompose B, fix its numerical rank and form the pseudoinverse.

    Exact mode (``se`` is None): eigenvalues below ``cutoff * lambda_max``
    are zero, with ``cutoff`` defaulting to p * machine epsilon. Statistical
    mode (``se`` given, entrywise standard errors of an estimated B): the
    absolute threshold is 3 * max(se) and tolerances scale with it.
    """
    B = np.atleast_2d(np.asarray(B_hat, dtype=float))
    p = B.shape[0]
    if B.shape != (p, p):
        raise ContractViolation("B must be square")
    scale = max(float(np.max(np.abs(B))), 1e-300)
    max_se = None if se is None else float(np.max(np.asarray(se, dtype=float)))
    if sym_tol is None:
        sym_tol = 3 * max_se if max_se is not None else 1e-10 * scale
    asym = float(np.max(np.abs(B - B.T))) if B.size else 0.0
    if asym > sym_tol:
        raise ContractViolation(f"B is materially asymmetric: max |B - B*| = {asym:.3e} > {sym_tol:.3e}")
    B = 0.5 * (B + B.T)

    lam, T = np.linalg.eigh(B)
    lam_max = max(float(lam.max()), 0.0) if lam.size else 0.0
    if max_se is not None:
        threshold = 3 * max_se
        neg_tol = 10 * max_se
        mode = "statistical"
    else:
        rel = p * np.finfo(float).eps if cutoff is None else cutoff
        threshold = rel * lam_max
        neg_tol = max(10 * p * np.finfo(float).eps * lam_max, 1e-300)
        mode = "exact"
    if lam.size and lam.min() < -neg_tol:
        raise ContractViolation(f"B is indefinite: smallest eigenvalue {lam.min():.3e} < -{neg_tol:.3e}")
    kept = np.where(lam > threshold, lam, 0.0)
    inv = np.zeros_like(kept)
    nz = kept > 0
    inv[nz] = 1.0 / kept[nz]
    B_pinv = (T * inv) @ T.T
    proj = (T * nz.astype(float)) @ T.T
    if range_tol is None:
        range_tol = 1e-8 if mode == "exact" else 3 * max_se / max(lam_max, 1e-300) ** 0.5 + 1e-8
    return RateFunction(B, T, kept, float(threshold), 0.5 * (B_pinv + B_pinv.T), 0.5 * (proj + proj.T), range_tol, mode)


def _vec(rf: RateFunction, y) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != (rf.dim,):
        raise ContractViolation(f"y must have shape ({rf.dim},)")
    return y


def in_range(rf: RateFunction, y) -> bool:
    y = _vec(rf, y)
    return bool(np.linalg.norm(rf.range_projector @ y - y) <= rf.range_tol * (1 + np.linalg.norm(y)))


def rate(rf: RateFunction, y):
    """I(y), or the INFINITY sentinel when y is off the range of B."""
    y = _vec(rf, y)
    if not in_range(rf, y):
        return INFINITY
    return 0.5 * float(y @ rf.B_pinv @ y)


def rate_regularized(rf: RateFunction, beta: float, y) -> float:
    """1/2 y* (B + beta I)^{-1} y from the stored eigendecomposition (rank-cut eigenvalues)."""
    if not beta > 0:
        raise ContractViolation("beta must be > 0")
    y = _vec(rf, y)
    c = rf.eigvecs.T @ y
    return 0.5 * float(np.sum(c**2 / (rf.eigvals + beta)))


@dataclass
class LimitReport:
    betas: np.ndarray
    values: np.ndarray
    in_range: bool
    rate: float | _Infinity
    gaps: np.ndarray | None  # |I_beta - I| when in range
    beta_times_value: np.ndarray
    perp_half_norm_sq: float  # ||y_perp||^2 / 2
    fitted_coefficient: float  # c in I_beta ~ c / beta + d


def regularization_limit_check(rf: RateFunction, y, beta_schedule) -> LimitReport:
    """Follow I_beta(y) along a decreasing schedule and classify the limit."""
    betas = np.asarray(beta_schedule, dtype=float)
    if betas.ndim != 1 or betas.size == 0 or np.any(betas <= 0) or np.any(np.diff(betas) >= 0):
        raise ContractViolation("beta schedule must be strictly decreasing and positive")
    y = _vec(rf, y)
    vals = np.array([rate_regularized(rf, b, y) for b in betas])
    inr = in_range(rf, y)
    I = rate(rf, y)
    perp = y - rf.range_projector @ y
    if betas.size >= 2:
        X = np.column_stack([1.0 / betas, np.ones_like(betas)])
        coef = np.linalg.lstsq(X, vals, rcond=None)[0][0]
    else:
        coef = float(betas[0] * vals[0])
    return LimitReport(
        betas,
        vals,
        inr,
        I,
        np.abs(vals - I) if inr else None,
        betas * vals,
        0.5 * float(perp @ perp),
        float(coef),
    )
