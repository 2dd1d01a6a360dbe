"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (see cli.py): config problems
exit 2, data/file problems exit 3, numeric divergence exits 4.
"""


class TwinAttackError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(TwinAttackError):
    """Invalid experiment configuration (bad value, unknown key, bad schema)."""


class DataError(TwinAttackError):
    """Invalid or inconsistent data: malformed files, schema mismatches,
    out-of-range fault windows, series too short, and the like."""


class DivergenceError(TwinAttackError):
    """Numeric divergence (NaN/Inf loss) during training."""


class StageError(TwinAttackError):
    """A pipeline stage failed; carries the stage name and the original error."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
