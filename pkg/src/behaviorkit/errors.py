"""Exception types raised across behaviorkit.

Each class maps to one diagnostic category; the CLI turns them into exit codes.
"""


class BehaviorKitError(Exception):
    exit_code = 1


class InvalidArgumentError(BehaviorKitError, ValueError):
    exit_code = 2


class NoValidCropError(BehaviorKitError, ValueError):
    """The requested crop does not intersect the frame with positive area."""

    exit_code = 2


class CheckpointError(BehaviorKitError, OSError):
    """A checkpoint or artifact file is missing or corrupt."""

    exit_code = 3


class NonFiniteLossError(BehaviorKitError, FloatingPointError):
    """Training produced a NaN/inf loss. ``diagnostics`` holds the step context."""

    exit_code = 4

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
