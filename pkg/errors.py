"""
errors.py
Exception hierarchy shared by every meshmark module.

Library code raises these; only cli.py turns them into process exit codes.
"""


class MeshmarkError(Exception):
    """Base class. `exit_code` is what the CLI returns when this escapes."""

    exit_code = 2


class UsageError(MeshmarkError):
    """Bad flags, bad message strings, missing files named on the command line."""

    exit_code = 1


class DataError(MeshmarkError, ValueError):
    """Malformed assets, configs, checkpoints or image sets."""

    exit_code = 2


class ShapeError(DataError):
    """Tensor shapes that cannot be combined."""


class TapeError(MeshmarkError):
    """Gradient tape misuse: non-scalar loss, foreign leaves, mixed tapes."""

    exit_code = 2


class NumericError(MeshmarkError, ArithmeticError):
    """A forward op or a loss produced NaN/Inf."""

    exit_code = 3
