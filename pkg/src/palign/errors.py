"""Exception hierarchy, kept flat on purpose.

FormatError covers malformed files (magic, version, truncation); DataError
covers violated invariants and degenerate numerical inputs such as zero-norm
vectors. The CLI maps any PalignError to exit code 1.
"""


class PalignError(Exception):
    pass


class FormatError(PalignError):
    """A file does not match its declared on-disk format."""


class DataError(PalignError):
    """Inputs violate an invariant or precondition."""
