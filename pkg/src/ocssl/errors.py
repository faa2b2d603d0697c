"""Exception types shared across the package."""


class ProtocolError(RuntimeError):
    """An operation violated the online-stream protocol (e.g. boundary access on a hidden-boundary stream)."""


class IntegrityError(ValueError):
    """A binary file failed its magic, version, length or checksum validation."""


class BudgetBreach(RuntimeError):
    """A run performed more backward work than its declared budget allows."""


class ParityViolation(ValueError):
    """Strategies compared in one experiment do not share the same budget."""

    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)
