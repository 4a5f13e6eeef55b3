"""Exception types shared across the package."""
from __future__ import annotations


class IntegrationDiverged(RuntimeError):
    """State became non-finite during integration."""

    def __init__(self, time: float):
        super().__init__(f"state became non-finite at t = {time:.6g}")
        self.time = time


class SynthesisError(RuntimeError):
    """Terminal-set synthesis failed (non-stabilizable pair, indefinite weights, ...)."""


class EscalationLimitError(RuntimeError):
    """Penalty doubling hit its cap without certifying the terminal condition."""

    def __init__(self, rho: float, doublings: int):
        super().__init__(
            f"terminal condition still violated after {doublings} penalty doublings "
            f"(rho = {rho:.6g})")
        self.rho = rho
        self.doublings = doublings


class SolverError(RuntimeError):
    """Trajectory optimization could not produce a usable iterate."""


class ConfigError(ValueError):
    """Scenario configuration failed validation; carries every message at once."""

    def __init__(self, messages: list[str]):
        super().__init__("; ".join(messages))
        self.messages = list(messages)
