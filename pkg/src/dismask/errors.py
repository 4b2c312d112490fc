"""Package-level exception types."""


class IncompatibleCheckpointError(RuntimeError):
    """Raised when a checkpoint manifest does not match the expected setup."""


class TrainDivergedError(RuntimeError):
    """Raised when a training step produces non-finite losses.

    Carries a ``diagnostics`` dict with the last losses and step counter.
    """

    def __init__(self, message: str, diagnostics: dict):
        super().__init__(message)
        self.diagnostics = diagnostics
