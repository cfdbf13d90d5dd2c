"""Error taxonomy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, DataError 2,
NumericalError (and the autodiff NonFiniteError it usually wraps) 3.
"""


class DataError(Exception):
    """Unreadable, malformed, or semantically invalid input data."""


class NumericalError(Exception):
    """Optimization or evaluation produced non-finite or unusable numbers."""
