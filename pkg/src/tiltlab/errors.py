"""Shared exception types."""


class CapacityError(RuntimeError):
    """Raised when an exact computation would exceed its enumeration cap."""


class ProtocolAbort(RuntimeError):
    """Raised when a staged protocol receives an out-of-contract answer."""

    def __init__(self, stage: int, reason: str):
        super().__init__(f"stage {stage}: {reason}")
        self.stage = stage
        self.reason = reason
