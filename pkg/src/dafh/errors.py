"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each class carries one.
"""


class DafhError(Exception):
    exit_code = 1


class InvalidArgument(DafhError, ValueError):
    exit_code = 1


class DataError(DafhError):
    exit_code = 2


class NumericFailure(DafhError, ArithmeticError):
    exit_code = 3


class EmptyGroupError(DafhError):
    """A group has no members where a per-group mean is required."""

    exit_code = 3

    def __init__(self, groups):
        self.groups = list(groups)
        super().__init__(f"empty group: {self.groups}")


class ModelFileError(DataError):
    """Corrupt, incompatible, or mismatched model bundle."""
