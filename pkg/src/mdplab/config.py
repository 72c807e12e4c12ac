"""Experiment configuration: a versioned YAML schema with strict keys.

Validation errors carry the offending field path and, when the document was
loaded from text, its line number.
"""

from __future__ import annotations

from typing import Annotated, Any, Literal, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .chains import MAP_CATALOG, ChainModel, ExoticSign, LinearAR, NonlinearLipschitz
from .mdp_verify import ExperimentConfig
from .noise import NoiseSpec
from .poisson import (
    ObservableSpec,
    identity_observable,
    linear_observable,
    sign_observable,
    tanh_observable,
    zero_observable,
)

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NoiseConfig(_Strict):
    family: Literal["gaussian", "laplace", "uniform", "rademacher"] = "gaussian"
    scale: float = 1.0
    loc: float = 0.0
    delta: float = 0.5


class ModelConfig(_Strict):
    variant: Literal["linear_ar", "nonlinear", "exotic"]
    A: list[list[float]] | None = None
    map: str | None = None
    params: dict[str, float] = Field(default_factory=dict)
    d: int = 1
    m: float | None = None

    @model_validator(mode="after")
    def _fields_for_variant(self):
        if self.variant == "linear_ar" and self.A is None:
            raise ValueError("linear_ar needs A")
        if self.variant == "nonlinear":
            if self.map is None:
                raise ValueError("nonlinear needs map")
            if self.map not in MAP_CATALOG:
                raise ValueError(f"unknown map {self.map!r}; choose from {sorted(MAP_CATALOG)}")
        if self.variant == "exotic" and self.m is None:
            raise ValueError("exotic needs m")
        return self


class ObservableConfig(_Strict):
    kind: Literal["identity", "linear", "tanh", "sign", "zero"] = "identity"
    C: list[list[float]] | None = None
    q: int = 1

    @model_validator(mode="after")
    def _C_for_linear(self):
        if self.kind == "linear" and self.C is None:
            raise ValueError("linear observable needs C")
        return self


class ExperimentSection(_Strict):
    alpha: float = 0.75
    lam: list[float] = Field(default_factory=lambda: [1.0])
    epsilon: float = 1.0
    eta: float = 1.0
    beta: float = 0.0
    n_grid: list[int] = Field(default_factory=lambda: [100, 1000])
    M: int = 1000
    y_grid: list[float] = Field(default_factory=list)
    x0: list[float] | None = None

    @field_validator("alpha")
    @classmethod
    def _alpha(cls, v):
        if not 0.5 < v < 1:
            raise ValueError("alpha must lie in (0.5, 1)")
        return v

    @field_validator("epsilon", "eta")
    @classmethod
    def _positive(cls, v):
        if not v > 0:
            raise ValueError("must be > 0")
        return v

    @field_validator("beta")
    @classmethod
    def _nonneg(cls, v):
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator("n_grid")
    @classmethod
    def _increasing(cls, v):
        if not v or v[0] < 1 or any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("must be a strictly increasing list of positive integers")
        return v

    @field_validator("M")
    @classmethod
    def _M(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v


# -- per-check parameters


class PoissonOracleParams(_Strict):
    id: Literal["poisson_oracle"]
    points: list[float] = Field(default_factory=lambda: [-2.0, 0.5, 3.0])
    N: int = 60
    M: int = 10_000
    closed_form: bool = False
    rel_tol: float = 0.02


class ContractionParams(_Strict):
    id: Literal["contraction"]
    trials: int = 200
    n: int = 50


class CovarianceParams(_Strict):
    id: Literal["covariance"]
    N: int = 40
    M: int = 100_000
    n: int = 100_000
    M_inner: int | None = None
    rel_tol: float = 0.05


class TelescopingParams(_Strict):
    id: Literal["telescoping"]
    n: int = 10_000
    M_inner: int | None = None
    tol: float = 1e-10


class RateFunctionParams(_Strict):
    id: Literal["rate_function"]
    B: list[list[float]] | None = None
    y: list[list[float]] = Field(default_factory=list)
    betas: list[float] = Field(default_factory=lambda: [1e-2, 1e-4, 1e-8])


class PuhalskiiParams(_Strict):
    id: Literal["puhalskii"]
    M: int = 200
    M_inner: int | None = None
    N: int = 40
    n_B: int = 20_000


class DemboParams(_Strict):
    id: Literal["dembo"]
    grid: list[float] = Field(default_factory=lambda: [-4.0, 4.0])
    grid_points: int = 41
    M_cond: int = 2000
    N: int = 40
    M_U: int = 2000


class TailParams(_Strict):
    id: Literal["tail_probability"]
    kind: Literal["halfspace", "ball"] = "halfspace"
    eps: float | None = None
    stationary_start: bool = False
    N: int = 40
    n_B: int = 20_000


class NegligibilityParams(_Strict):
    id: Literal["negligibility"]
    quantity: Literal["state", "U_of_state", "corrector"] = "state"
    N: int = 40
    M_U: int = 2000


class GeometricNoiseParams(_Strict):
    id: Literal["geometric_noise_tail"]
    rho: float = 0.5
    delta: float | None = None


class MartingaleTailParams(_Strict):
    id: Literal["martingale_tail"]
    family: Literal["rademacher", "gaussian", "laplace"] = "rademacher"
    scale: float = 1.0
    eps: float = 0.5


class GaussianPerturbationParams(_Strict):
    id: Literal["gaussian_perturbation"]
    betas: list[float] = Field(default_factory=lambda: [0.01, 0.1, 1.0])
    etas: list[float] = Field(default_factory=lambda: [0.5, 1.0])


class ExoticParams(_Strict):
    id: Literal["exotic_mdp"]


CheckParams = Union[
    PoissonOracleParams,
    ContractionParams,
    CovarianceParams,
    TelescopingParams,
    RateFunctionParams,
    PuhalskiiParams,
    DemboParams,
    TailParams,
    NegligibilityParams,
    GeometricNoiseParams,
    MartingaleTailParams,
    GaussianPerturbationParams,
    ExoticParams,
]
CHECK_IDS = tuple(t.model_fields["id"].annotation.__args__[0] for t in CheckParams.__args__)


class RunConfig(_Strict):
    schema_version: int
    seed: int = 0
    model: ModelConfig
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    observable: ObservableConfig = Field(default_factory=ObservableConfig)
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    checks: list[Annotated[CheckParams, Field(discriminator="id")]] = Field(default_factory=list)

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v}; expected {SCHEMA_VERSION}")
        return v

    @field_validator("checks", mode="before")
    @classmethod
    def _bare_names(cls, v):
        # "- poisson_oracle" is shorthand for "- {id: poisson_oracle}"
        if isinstance(v, list):
            return [{"id": c} if isinstance(c, str) else c for c in v]
        return v


class ConfigError(ValueError):
    """Schema violation; ``diagnostics`` holds one "line N: field: message" string per problem."""

    def __init__(self, diagnostics: list[str]):
        self.diagnostics = diagnostics
        super().__init__("\n".join(diagnostics))


def _node_line(root, loc) -> int | None:
    """1-based line of the YAML node at path ``loc`` (deepest existing ancestor)."""
    node, line = root, None
    for key in loc:
        if node is None:
            break
        line = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == key:
                    nxt = v
                    line = k.start_mark.line + 1
                    break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            break
    if node is not None:
        line = node.start_mark.line + 1
    return line


def _diagnostics(err: ValidationError, root) -> list[str]:
    out = []
    for e in err.errors():
        # drop discriminator tags such as "poisson_oracle" from the path
        loc = [k for k in e["loc"] if not (isinstance(k, str) and k in CHECK_IDS and k not in ("id",))]
        field = ".".join(str(k) for k in loc) or "<root>"
        line = _node_line(root, loc) if root is not None else None
        where = f"line {line}: " if line is not None else ""
        out.append(f"{where}{field}: {e['msg']}")
    return out


def parse_config(text: str) -> RunConfig:
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark is not None else ""
        raise ConfigError([f"{where}<yaml>: {exc}"]) from exc
    if not isinstance(data, dict):
        raise ConfigError(["line 1: <root>: config must be a mapping"])
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_diagnostics(exc, root)) from exc


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# -- builders


def build_noise(cfg: RunConfig, d: int) -> NoiseSpec:
    n = cfg.noise
    return NoiseSpec(n.family, scale=n.scale, loc=n.loc, p=d, delta=n.delta)


def build_model(cfg: RunConfig) -> ChainModel:
    m = cfg.model
    if m.variant == "linear_ar":
        A = np.asarray(m.A, dtype=float)
        return ChainModel(LinearAR(A), build_noise(cfg, A.shape[0]))
    if m.variant == "nonlinear":
        return ChainModel(NonlinearLipschitz(m.map, dict(m.params), d=m.d), build_noise(cfg, m.d))
    return ChainModel(ExoticSign(float(m.m)), build_noise(cfg, 1))


def build_observable(cfg: RunConfig, d: int) -> ObservableSpec:
    o = cfg.observable
    if o.kind == "identity":
        return identity_observable(d)
    if o.kind == "linear":
        return linear_observable(np.asarray(o.C, dtype=float))
    if o.kind == "tanh":
        return tanh_observable(d)
    if o.kind == "sign":
        return sign_observable()
    return zero_observable(d, o.q)


def build_experiment(cfg: RunConfig, seed: int) -> ExperimentConfig:
    e = cfg.experiment
    return ExperimentConfig(
        alpha=e.alpha,
        lam=np.asarray(e.lam, dtype=float),
        epsilon=e.epsilon,
        eta=e.eta,
        beta=e.beta,
        n_grid=tuple(e.n_grid),
        M=e.M,
        y_grid=tuple(e.y_grid),
        seed=seed,
        x0=None if e.x0 is None else np.asarray(e.x0, dtype=float),
    )


def config_echo(cfg: RunConfig) -> dict[str, Any]:
    return cfg.model_dump(mode="json")
