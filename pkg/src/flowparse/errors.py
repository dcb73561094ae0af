"""Exception types shared across the package.

The CLI maps these onto process exit codes: usage/config problems exit 2,
data or shape problems exit 3, broken internal invariants exit 4.
"""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract
    (shape mismatch, non-finite input, out-of-range parameter)."""


class DataError(ValueError):
    """A dataset, checkpoint or prediction file is malformed or inconsistent."""


class InvariantBreach(RuntimeError):
    """An internal invariant failed; indicates a bug, not bad input."""
