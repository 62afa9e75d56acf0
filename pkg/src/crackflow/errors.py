"""Exception types shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters more than the message wording: DataError exits 2, NumericError
exits 3, anything argparse-shaped exits 1.
"""


class DataError(Exception):
    """Malformed or missing input data (files, manifests, headers, shapes)."""


class FormatError(DataError):
    """A serialized container failed validation (bad magic, truncation, ...)."""


class NumericError(Exception):
    """A numeric invariant broke at runtime (non-finite loss or gradient)."""
