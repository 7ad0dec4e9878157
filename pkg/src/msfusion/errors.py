"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: argument/config problems exit 2,
shape/data problems exit 3, I/O problems exit 4.
"""


class MsfError(Exception):
    pass


class ArgumentError(MsfError, ValueError):
    """Invalid argument value (bad count, bad seed, bad enum...)."""


class ConfigError(ArgumentError):
    """Run configuration or scene document failed validation."""


class ShapeError(MsfError, ValueError):
    """Array shapes or channel counts are inconsistent."""


class DimensionError(ShapeError):
    """A spatial dimension cannot be halved the requested number of times."""


class BoundsError(MsfError, IndexError):
    """Index or region outside the valid range."""


class FormatError(MsfError, ValueError):
    """A tensor file does not match the container layout."""
