"""Exception hierarchy shared by the analysis modules, routers and CLI."""
from __future__ import annotations

from typing import Optional


class HormlabError(ValueError):
    """Base class for every domain error raised by hormlab."""


class ParseError(HormlabError):
    def __init__(self, text: str, position: int, message: str) -> None:
        self.text = text
        self.position = position
        self.message = message
        super().__init__(f"{message} at position {position} in {text!r}")


class DimensionError(HormlabError):
    pass


class HormanderFailure(HormlabError):
    """All determinants λ_I vanish at the point: the bracket condition fails."""


class DomainError(HormlabError):
    """A ball or cylinder leaves the computational box, or a radius exceeds R."""


class ResolutionError(HormlabError):
    """The lattice is too coarse for the requested check."""


class IntegrationError(HormlabError):
    pass


class CFLViolation(HormlabError):
    def __init__(self, tau: float, limit: float) -> None:
        self.tau = tau
        self.limit = limit
        super().__init__(f"time step {tau:.3e} exceeds the explicit stability limit {limit:.3e}")


class ConvergenceError(HormlabError):
    def __init__(self, message: str, iterations: int, residual: Optional[float] = None) -> None:
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"{message} (iterations={iterations}, residual={residual})")


class StructureError(HormlabError):
    def __init__(self, violations: list[str]) -> None:
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class SupportError(HormlabError):
    pass


class DegenerateRatioError(HormlabError):
    pass
