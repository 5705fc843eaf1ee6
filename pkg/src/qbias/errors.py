"""Exception types shared across the package.

Everything derives from QbiasError so callers can catch broadly, but the
CLI maps the subtrees to distinct exit codes: usage problems are handled
by argparse, data problems (bad files, malformed catalogues) exit 2, and
failed --check assertions exit 3.
"""

from __future__ import annotations


class QbiasError(Exception):
    """Base class for package errors."""


class InputError(QbiasError, ValueError):
    """A caller-supplied value violates an operation's preconditions."""


class ConfigurationError(QbiasError, ValueError):
    """A structural configuration is unusable (dims, grouping, packing)."""


class DataError(QbiasError, ValueError):
    """File contents or catalogue data are malformed."""


class StateError(QbiasError, RuntimeError):
    """An object was used out of order (e.g. a gradient tape reused)."""


class TrainingError(QbiasError, RuntimeError):
    """Training diverged (non-finite loss)."""


class IndexLoadError(DataError):
    """A serialized index or parameter file could not be loaded."""


class BadMagicError(IndexLoadError):
    """The file does not start with the expected magic bytes."""


class BadVersionError(IndexLoadError):
    """The file's format version is not supported by this reader."""


class TruncatedFileError(IndexLoadError):
    """The file ends before the declared payload does."""


class ChecksumError(IndexLoadError):
    """A stored checksum does not match the recomputed one."""
