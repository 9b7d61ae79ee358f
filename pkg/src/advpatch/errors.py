"""Exception types shared across the package."""


class AdvPatchError(Exception):
    """Base class for all package errors."""


class ConfigError(AdvPatchError, ValueError):
    """Invalid configuration: architecture, attack settings, geometry."""


class InputError(AdvPatchError, ValueError):
    """Data passed at run time does not satisfy an operation's contract."""


class FormatError(AdvPatchError):
    """A dataset or checkpoint file is malformed."""
