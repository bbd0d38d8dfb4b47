#!/usr/bin/env python3
"""
Exception hierarchy for the tubule segmentation toolkit.

Library code raises these; only the CLI (tubule_seg.dispatch) turns them
into exit codes:

- UsageError      -> 1  (bad flags, unknown subcommand, missing inputs)
- DataError       -> 2  (malformed files, geometry mismatch, empty masks)
- NumericError    -> 3  (non-finite values, failed gradient checks)
- AutogradError   -> 3  (graph misuse: non-scalar backward, cycles, ...)

Any other exception reaching the CLI is logged with its traceback and exits
with UNEXPECTED_ERROR_EXIT.
"""


UNEXPECTED_ERROR_EXIT = 4


class TubuleError(Exception):
    """Base class for all toolkit errors."""

    exit_code: int = 1


class UsageError(TubuleError):
    """Invalid command-line usage."""

    exit_code = 1


class DataError(TubuleError, ValueError):
    """Input data violates a documented precondition."""

    exit_code = 2


class MetaImageError(DataError):
    """A MetaImage header or payload could not be parsed."""


class NumericError(TubuleError, ArithmeticError):
    """A computation produced non-finite or out-of-range values."""

    exit_code = 3


class AutogradError(TubuleError):
    """The differentiation graph was used incorrectly."""

    exit_code = 3
