"""Shared exception types."""


class FileFormatError(ValueError):
    """A binary or text artifact file is malformed (magic, sizes, fields)."""
