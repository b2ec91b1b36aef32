"""Exception types shared across the package."""


class XmodsegError(Exception):
    """Base class for all package errors."""


class ValidationError(XmodsegError, ValueError):
    """Input violates a documented precondition or invariant."""


class FormatError(XmodsegError):
    """A file on disk is missing, corrupt, or inconsistent with its sidecar."""


class ConfigError(XmodsegError):
    """Pipeline configuration is incomplete or references unusable files."""


class StageError(XmodsegError):
    """Wraps an error raised inside a named pipeline stage."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
