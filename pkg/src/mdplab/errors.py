"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its domain."""


class AdmissibilityError(ValueError):
    """A model failed one of the numerical admissibility gates.

    ``gate`` names the failed condition so callers (and the CLI) can report it.
    """

    def __init__(self, gate: str, message: str):
        super().__init__(f"[{gate}] {message}")
        self.gate = gate


class UnsupportedVariant(ContractViolation):
    pass


class DivergentMomentError(ValueError):
    """Requested exponential moment is infinite for the noise law."""


class TruncationError(ValueError):
    """Series truncation leaves a tail bound above the requested tolerance."""

    def __init__(self, message: str, suggested_N: int):
        super().__init__(f"{message} (suggested N={suggested_N})")
        self.suggested_N = suggested_N


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual
