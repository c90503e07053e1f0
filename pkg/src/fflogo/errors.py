"""Exception types shared across the package."""

from __future__ import annotations


class CloudFormatError(ValueError):
    """A point cloud file could not be parsed."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class ConfigError(ValueError):
    """A configuration document failed validation.

    ``field`` holds the dotted path of the offending entry when known.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class DegenerateGeometryError(ValueError):
    """Input geometry cannot determine a rigid transform (too few or collinear points)."""


class NoMutualMatchesError(RuntimeError):
    """Mutual top-k filtering retained no correspondence pair."""


class ExtractorError(RuntimeError):
    """A feature extractor could not produce features for the given cloud."""


class RegistrationError(RuntimeError):
    """A pipeline stage failed. ``stage`` names the stage."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")
