"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes (usage 2, data/integrity 3, divergence 4).
"""


class PEQAError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PEQAError, ValueError):
    """Invalid bit-width, group size or other configuration."""


class ShapeError(PEQAError, ValueError):
    """Inconsistent tensor dimensions."""


class NumericError(PEQAError, ArithmeticError):
    """Non-finite inputs or a zero scale outside the degenerate-row rule."""


class IntegrityError(PEQAError):
    """Stored data does not satisfy its invariants (range, padding, checksums)."""


class ChecksumError(IntegrityError):
    def __init__(self, section, expected, actual):
        self.section = section
        super().__init__(
            f"checksum mismatch in section {section!r}: "
            f"expected {expected:#010x}, got {actual:#010x}"
        )


class WrongBaseError(IntegrityError):
    """An adapter was applied to a base with a different codes fingerprint."""


class DivergenceError(PEQAError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


class StateError(PEQAError, RuntimeError):
    """An object was used in the wrong lifecycle state (e.g. tape reuse)."""
