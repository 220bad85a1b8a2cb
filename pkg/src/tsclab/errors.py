"""Exceptions shared across the package."""


class TrainingFault(RuntimeError):
    """Non-finite values during training or acting; carries a parameter snapshot path if saved."""

    def __init__(self, message: str, snapshot: str | None = None):
        super().__init__(message if snapshot is None else f"{message} (parameters saved to {snapshot})")
        self.snapshot = snapshot
