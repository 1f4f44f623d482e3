"""Exception types shared across the package."""

from __future__ import annotations


class ConfigError(ValueError):
    """Invalid user configuration (CLI exit code 2)."""


class ContractError(ValueError):
    """An operation received arguments violating its shape or value contract."""


class ManifestError(ValueError):
    """A corpus manifest or one of the files it references is malformed."""


class CheckpointError(ValueError):
    """A checkpoint archive is truncated, corrupt, or from another format version."""


class NumericalError(ArithmeticError):
    """Non-finite values appeared during a forward pass or in the loss.

    ``diagnostics`` carries whatever context the raiser had (iteration, lr,
    per-term losses, stage/block index) so callers can dump it.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
