"""Exception types raised across the package."""


class ConfigError(ValueError):
    """A configuration value is out of its valid range or inconsistent."""


class InputError(ValueError):
    """An input array, index list, or sample is malformed."""


class IntegrityError(RuntimeError):
    """An internal bookkeeping invariant was violated (e.g. token provenance)."""


class FormatError(ValueError):
    """A binary file is corrupted or does not match the expected layout.

    Parameters
    ----------
    message : str
        Human readable description.
    offset : int, optional
        Byte offset at which the problem was detected.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteLossError(FloatingPointError):
    """Raised by the training loop when a loss term becomes NaN or inf."""

    def __init__(self, term, value):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term
        self.value = value
