"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Raised when shapes, factors, or config fields are inconsistent."""


class ContainerFormatError(ValueError):
    """Raised when a container file is corrupt, truncated, or unsupported."""


class NumericalIntegrityError(RuntimeError):
    """Raised when a numerical invariant is violated (e.g. imaginary residue)."""


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite.

    Carries the step index at which divergence was detected.
    """

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"training diverged (non-finite loss) at step {step}")
