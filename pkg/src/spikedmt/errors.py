"""Exception types shared by all modules."""


class SpikedError(Exception):
    """Base class; ``record`` is the machine-readable form used by the CLI."""

    kind = "error"

    def record(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class ConfigurationError(SpikedError, ValueError):
    kind = "configuration"


class DimensionError(SpikedError, ValueError):
    kind = "dimension"


class CapacityError(SpikedError, MemoryError):
    kind = "capacity"

    def __init__(self, message: str, requested: int = 0, budget: int = 0):
        super().__init__(message)
        self.requested = requested
        self.budget = budget

    def record(self) -> dict:
        rec = super().record()
        rec.update(requested_bytes=self.requested, budget_bytes=self.budget,
                   suggestion="virtual")
        return rec


class DivergenceError(SpikedError, ArithmeticError):
    """Raised when an AMP field becomes non-finite; carries the trace so far."""

    kind = "divergence"

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = trace
