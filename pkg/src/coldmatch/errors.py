"""Exception types shared across the package.

Every error raised on purpose derives from ColdMatchError so callers can
catch one type at the CLI boundary and turn it into an exit code.
"""

from __future__ import annotations


class ColdMatchError(Exception):
    """Base class for all errors this package raises deliberately."""


class DimensionError(ColdMatchError):
    """Shape or size of an input does not match what the model expects."""


class ContractError(ColdMatchError):
    """An argument violates a documented precondition."""


class VocabError(ColdMatchError):
    """An identifier or categorical value is outside the known vocabulary."""


class SamplingError(ColdMatchError):
    """A sampler cannot produce a valid draw from the data it was given."""


class FormatError(ColdMatchError):
    """A file or stream does not parse as the format it claims to be."""


class NumericError(ColdMatchError):
    """A computation produced non-finite values or diverged."""
