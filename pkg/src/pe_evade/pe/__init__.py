"""PE parsing, serialization and checksum."""

from .checksum import compute_pe_checksum, fix_checksum, raw_checksum, stored_checksum
from .directories import ImportEntry, read_debug, read_exports, read_imports
from .image import PeImage, Section, parse, serialize

__all__ = [
    "ImportEntry",
    "PeImage",
    "Section",
    "compute_pe_checksum",
    "fix_checksum",
    "parse",
    "raw_checksum",
    "read_debug",
    "read_exports",
    "read_imports",
    "serialize",
    "stored_checksum",
]
