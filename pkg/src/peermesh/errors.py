"""Shared exception base for the package.

Subsystem modules define their own error types on top of this; anything a
caller can catch from the public API derives from PeermeshError.
"""


class PeermeshError(Exception):
    """Base class for all errors raised by this package."""
