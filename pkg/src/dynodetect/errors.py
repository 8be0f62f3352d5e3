"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2, data/file
problems -> 3, NumericalError -> 4.
"""


class ConfigError(ValueError):
    """Invalid configuration value or flag combination."""


class CloudFormatError(ValueError):
    """A cloud file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        ctx = ""
        if path is not None:
            ctx += f" [{path}"
            if line is not None:
                ctx += f":{line}"
            ctx += "]"
        super().__init__(message + ctx)
        self.path = path
        self.line = line


class MissingFieldError(CloudFormatError):
    """A required per-point property is absent from the input file."""

    def __init__(self, field, path=None):
        super().__init__(f"missing required property '{field}'", path=path)
        self.field = field


class EmptyCloudError(ValueError):
    """A frame contained no points where at least one is required."""


class PoseRangeError(ValueError):
    """Queried timestamp falls outside the pose trajectory."""


class FrameOrderError(ValueError):
    """Frames arrived with a non-increasing frame index."""


class WindowNotFullError(RuntimeError):
    """Classification was requested before the sliding window filled."""


class NumericalError(RuntimeError):
    """Numerical precondition violated (asymmetry, non-finite input)."""


class SceneError(ValueError):
    """Invalid synthetic scene specification."""
