"""Exception types mapped to CLI exit codes (input=2, constraint=3)."""


class SigmapError(Exception):
    """Base class for errors raised by this package."""


class InputDataError(SigmapError):
    """Malformed or unreadable input (file, format, CSV row schema)."""


class ConstraintError(SigmapError):
    """Input is well-formed but violates a required constraint."""
