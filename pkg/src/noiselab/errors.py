"""Shared exception and warning types."""


class NoiselabError(Exception):
    """Base class for all package errors."""


class RejectedInputError(NoiselabError):
    """Input data violates a hard precondition (non-finite, out of range)."""


class DomainMismatchError(NoiselabError):
    """An image arrived in the wrong color domain for the requested op."""


class InvalidProfileError(NoiselabError):
    """Camera profile violates its invariants (singular CCM, bad gains)."""


class ShapeError(NoiselabError):
    """Array shapes are inconsistent with the operation contract."""


class ContractError(NoiselabError):
    """API misuse: wrong argument combination or unsupported configuration."""


class IoFormatError(NoiselabError):
    """File could not be parsed: bad magic, truncation, or size overflow."""


class GradientFault(NoiselabError):
    """Non-finite value produced during forward or backward evaluation."""


class CodecClampWarning(UserWarning):
    """Parameter codec input fell outside its range and was clamped."""
