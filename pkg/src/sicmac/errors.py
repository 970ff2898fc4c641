"""Exceptions raised by the simulator."""


class SimulationError(Exception):
    """Base class for every error the library raises on purpose."""


class DomainError(SimulationError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigError(DomainError):
    """Configuration file or flag values are invalid."""


class Infeasible(SimulationError):
    """The requested targets cannot be met (dead channel, target outside the hull, divergence)."""


class NotConverged(SimulationError):
    """An iterative solver hit its iteration cap with the residual above tolerance."""

    def __init__(self, message: str, *, iterations: int, residual: float):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class TooManyOrders(SimulationError):
    """Enumerating tie-cluster permutations would exceed the configured cap."""

    def __init__(self, message: str, *, count: int):
        super().__init__(message)
        self.count = count
