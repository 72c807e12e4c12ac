"""Moderate-deviation verification lab for ergodic Markov chains."""

__version__ = "0.1.0"

from .chains import ChainModel, ExoticSign, LinearAR, NonlinearLipschitz, StationarySampler, simulate  # noqa: E402
from .noise import NoiseSpec  # noqa: E402
from .poisson import PoissonSolution, identity_observable, linear_observable, tanh_observable  # noqa: E402
from .ratefn import INFINITY, build as build_rate_function, rate, rate_regularized  # noqa: E402
