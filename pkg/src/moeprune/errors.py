"""Exception hierarchy shared across the workbench.

``exit_code`` is what the CLI returns when the error escapes a command:
2 validation, 3 staleness, 4 size/limit (I/O failures map to 5).
"""


class WorkbenchError(Exception):
    exit_code = 1


class ValidationError(WorkbenchError):
    """Invalid inputs: malformed specs, bad token ids, broken invariants."""

    exit_code = 2


class FeasibilityError(ValidationError):
    """An allocation or budget violates the feasible-set constraints."""


class DataError(ValidationError):
    """Dataset-level problems: empty calibration sets, empty answers."""


class StalenessError(WorkbenchError):
    """An artifact's recorded hashes disagree with the inputs presented."""

    exit_code = 3


class CoverageError(StalenessError):
    """A logit cache does not cover every required answer position."""


class SizeLimitError(WorkbenchError):
    """An enumeration would exceed the caller-imposed limit."""

    exit_code = 4
