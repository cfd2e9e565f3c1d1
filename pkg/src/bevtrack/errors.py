"""Exception types shared across the package."""


class BevtrackError(Exception):
    """Base class for all package-specific errors."""


class CalibrationParseError(BevtrackError):
    """Calibration text is missing a required key or is malformed."""


class ValidationError(BevtrackError):
    """An input violates a documented invariant (bad rotation, bad shape, ...)."""


class DatasetError(BevtrackError):
    """Dataset directory layout is missing or inconsistent."""


class ConfigError(BevtrackError):
    """A configuration value or key is invalid; message names the key."""


class TrainingError(BevtrackError):
    """Training produced a non-finite loss or otherwise cannot continue."""


class SequencingError(BevtrackError):
    """Tracker stepped with an out-of-order frame index."""


class ExportError(BevtrackError):
    """Trajectory export is impossible with the given inputs."""
