"""Exception hierarchy. Every error carries a machine-parsable category for the CLI."""


class ManikinError(Exception):
    """Base class; `category` is the single-word tag the CLI prints on failure."""

    category = "internal"


class ConfigError(ManikinError):
    category = "config"


class ArgumentError(ManikinError, ValueError):
    category = "argument"


class IOFormatError(ManikinError):
    category = "io"


class DegenerateFieldError(ManikinError):
    """Radiance field produced non-finite densities or colors."""

    category = "degenerate"


class EmptyGeometryError(ManikinError):
    category = "empty-geometry"


class NoSurfaceError(ManikinError):
    """Isosurface extraction found no crossing at the requested level."""

    category = "no-surface"

    def __init__(self, msg, min_value=None, max_value=None):
        super().__init__(msg)
        self.min_value = min_value
        self.max_value = max_value


class AtlasOverflowError(ManikinError):
    category = "atlas-overflow"


class TrainingStalledError(ManikinError):
    """Held-out loss stopped improving; carries the loss trace for inspection."""

    category = "training"

    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = list(trace or [])


class MissingPriorError(ManikinError):
    category = "missing-prior"


class StageAbortError(ManikinError):
    """A pipeline stage diverged or lost its surface; carries the stage name."""

    category = "stage-abort"

    def __init__(self, msg, stage=None, trace=None):
        super().__init__(msg)
        self.stage = stage
        self.trace = list(trace or [])


class DegenerateDepthSignal(Exception):
    """Raised by the depth correlation loss when a masked map has ~zero variance.

    Control-flow signal, not an error: the optimization loop catches it and
    skips the depth term for that step.
    """
