class PerfcapError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(PerfcapError, ValueError):
    """Invalid or incomplete configuration (weights, limits, missing inputs)."""


class SkinningDegeneracyError(PerfcapError, ValueError):
    """Blended dual quaternion collapsed (antipodal rotations cancelled)."""


class DegenerateGeometryError(PerfcapError, ValueError):
    """Geometry that the requested operation cannot handle."""


class FitAborted(PerfcapError, RuntimeError):
    """Optimization hit a non-finite objective; ``report`` holds diagnostics."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class FormatError(PerfcapError, ValueError):
    """Malformed file on disk; the message carries the byte offset when known."""
