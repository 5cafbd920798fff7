"""Exception types shared across the package.

Anything raised on purpose derives from CytostyleError so callers (and the
CLI) can tell deliberate failures from bugs. Configuration problems get
their own subclass because they map to a distinct process exit code.
"""


class CytostyleError(Exception):
    """Base class for all deliberate failures raised by this package."""


class ConfigError(CytostyleError):
    """Invalid or incomplete run configuration (bad manifest, missing inputs)."""


class ImageDecodeError(CytostyleError):
    """A raster file exists but cannot be decoded."""


class UnsupportedFormatError(CytostyleError):
    """A raster uses a mode or bit depth the package does not handle."""


class CheckpointError(CytostyleError):
    """A backbone checkpoint is missing fields or has the wrong format version."""


class CacheMissError(CytostyleError):
    """A required attention-cache entry is absent. Never silently skipped."""

    def __init__(self, timestep: int, layer: str, role: str):
        self.timestep = timestep
        self.layer = layer
        self.role = role
        super().__init__(
            f"missing attention cache entry: timestep={timestep} layer={layer!r} role={role}"
        )


class DetectorError(CytostyleError):
    """An instance detector failed to produce a usable mask."""


class NoCellsError(CytostyleError):
    """No instances were found where at least one is required."""


class AlphaUndefinedError(CytostyleError):
    """Every score-std ratio was degenerate, so no scaling ratio exists."""


class StageError(CytostyleError):
    """A stylization stage failed; carries the stage name for the journal."""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")
