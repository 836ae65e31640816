"""Exception types shared across the pipeline."""


class EqdError(Exception):
    """Base class for all package errors."""


class MalformedPrefix(EqdError):
    def __init__(self, message: str, index: int):
        super().__init__(f"{message} (at token index {index})")
        self.index = index


class DomainError(EqdError, ArithmeticError):
    """An expression is undefined or non-finite at an input point."""


class ShapeMismatch(EqdError, ValueError):
    pass


class NonFiniteValue(EqdError, FloatingPointError):
    pass


class NonFiniteInput(EqdError, ValueError):
    pass


class NonFiniteLoss(EqdError, FloatingPointError):
    pass


class NonFiniteGradient(EqdError, FloatingPointError):
    pass


class GraphConsumed(EqdError, RuntimeError):
    pass


class IndexOutOfRange(EqdError, IndexError):
    pass


class SequenceTooLong(EqdError, ValueError):
    pass


class PatternMatchesNothing(EqdError, ValueError):
    pass


class BadMagic(EqdError, ValueError):
    pass


class VersionMismatch(EqdError, ValueError):
    pass


class CorruptSegment(EqdError, ValueError):
    pass


class EmptyData(EqdError, ValueError):
    pass


class LengthMismatch(EqdError, ValueError):
    pass


class TooFewRows(EqdError, ValueError):
    pass


class NoValidCandidate(EqdError, RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(EqdError, ValueError):
    pass
