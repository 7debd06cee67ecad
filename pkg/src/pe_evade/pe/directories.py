"""Readers for the data directories the toolkit understands, plus import-table rebuilding."""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple, Union

from ..errors import Malformed
from .image import (
    DIR_DEBUG,
    DIR_EXPORT,
    DIR_IMPORT,
    PeImage,
    align_up,
    read_cstring,
    read_rva,
)

IMPORT_DESCRIPTOR_SIZE = 20
DEBUG_ENTRY_SIZE = 28
MAX_IMPORTS = 4096

ImportName = Union[str, int]  # function name, or ordinal


@dataclass(frozen=True)
class ImportEntry:
    library: str
    functions: Tuple[ImportName, ...]


@dataclass(frozen=True)
class DebugEntry:
    type: int
    size: int
    rva: int
    file_offset: int


def _thunk_format(img: PeImage) -> Tuple[str, int, int]:
    if img.is_pe32_plus:
        return "<Q", 8, 1 << 63
    return "<I", 4, 1 << 31


def import_descriptors(img: PeImage) -> List[bytes]:
    """Raw 20-byte import descriptors, terminator excluded."""
    rva, size = img.optional.directory(DIR_IMPORT)
    if not rva:
        return []
    out = []
    for i in range(MAX_IMPORTS):
        desc = read_rva(img, rva + i * IMPORT_DESCRIPTOR_SIZE, IMPORT_DESCRIPTOR_SIZE)
        if not any(desc):
            return out
        out.append(desc)
    raise Malformed("import descriptor table not terminated")


def read_imports(img: PeImage) -> List[ImportEntry]:
    """Decode the import table. Raises :class:`Malformed` on any unresolvable RVA."""
    fmt, width, ordinal_flag = _thunk_format(img)
    entries = []
    for desc in import_descriptors(img):
        ilt, _, _, name_rva, iat = struct.unpack("<IIIII", desc)
        library = read_cstring(img, name_rva).decode("latin-1")
        table = ilt or iat
        funcs: List[ImportName] = []
        for j in range(MAX_IMPORTS):
            (thunk,) = struct.unpack(fmt, read_rva(img, table + j * width, width))
            if thunk == 0:
                break
            if thunk & ordinal_flag:
                funcs.append(thunk & 0xFFFF)
            else:
                funcs.append(read_cstring(img, (thunk & 0x7FFFFFFF) + 2).decode("latin-1"))
        else:
            raise Malformed(f"import thunks of {library} not terminated")
        if iat and ilt:
            # the IAT must resolve too, even though its contents are loader-owned
            read_rva(img, iat, width * (len(funcs) + 1))
        entries.append(ImportEntry(library, tuple(funcs)))
    return entries


def read_exports(img: PeImage) -> List[str]:
    rva, size = img.optional.directory(DIR_EXPORT)
    if not rva:
        return []
    fields = struct.unpack("<IIHHIIIIIII", read_rva(img, rva, 40))
    number_of_names, names_rva = fields[7], fields[9]
    if number_of_names > 65536:
        raise Malformed("absurd export name count")
    names = []
    if number_of_names:
        ptrs = struct.unpack(f"<{number_of_names}I", read_rva(img, names_rva, 4 * number_of_names))
        for p in ptrs:
            names.append(read_cstring(img, p).decode("latin-1"))
    return names


def read_debug(img: PeImage) -> List[DebugEntry]:
    rva, size = img.optional.directory(DIR_DEBUG)
    if not rva or not size:
        return []
    count = size // DEBUG_ENTRY_SIZE
    blob = read_rva(img, rva, count * DEBUG_ENTRY_SIZE)
    out = []
    for i in range(count):
        _, _, _, _, typ, dsize, drva, doff = struct.unpack_from("<IIHHIIII", blob, i * DEBUG_ENTRY_SIZE)
        out.append(DebugEntry(typ, dsize, drva, doff))
    return out


def shift_debug_pointers(img: PeImage, delta: int) -> PeImage:
    """Add ``delta`` to every nonzero PointerToRawData in the debug directory."""
    rva, size = img.optional.directory(DIR_DEBUG)
    if not rva or not size:
        return img
    idx = img.section_for_rva(rva)
    if idx is None:
        return img
    sec = img.sections[idx]
    data = bytearray(sec.data)
    start = rva - sec.virtual_address
    for i in range(size // DEBUG_ENTRY_SIZE):
        pos = start + i * DEBUG_ENTRY_SIZE + 24
        if pos + 4 > len(data):
            break
        (ptr,) = struct.unpack_from("<I", data, pos)
        if ptr:
            struct.pack_into("<I", data, pos, ptr + delta)
    return img.with_section(idx, replace(sec, data=bytes(data)))


def build_import_blob(
    base_rva: int,
    new_entries: Sequence[ImportEntry],
    pe32_plus: bool,
    keep: Sequence[bytes] = (),
) -> Tuple[bytes, int, List[Tuple[int, int]]]:
    """Lay out an import directory at ``base_rva``.

    ``keep`` holds raw descriptors copied verbatim (their thunk tables stay where
    they are, so code referencing the old IAT is unaffected). Returns the blob,
    the size of the descriptor array including its terminator, and the
    (rva, size) of each new IAT.
    """
    width = 8 if pe32_plus else 4
    fmt = "<Q" if pe32_plus else "<I"
    n_desc = len(keep) + len(new_entries)
    desc_size = IMPORT_DESCRIPTOR_SIZE * (n_desc + 1)

    # thunk arrays first (naturally aligned), then hint/name entries and dll names
    cursor = align_up(desc_size, 8)
    thunk_slots = []
    for entry in new_entries:
        n = len(entry.functions) + 1
        ilt = cursor
        iat = ilt + n * width
        thunk_slots.append((ilt, iat))
        cursor = iat + n * width

    strings = bytearray()
    str_base = cursor
    name_rvas = []
    hint_rvas = []
    for entry in new_entries:
        per = []
        for fn in entry.functions:
            if isinstance(fn, int):
                per.append(None)
                continue
            if (str_base + len(strings)) % 2:
                strings += b"\0"
            per.append(base_rva + str_base + len(strings))
            strings += b"\0\0" + fn.encode("latin-1") + b"\0"
        hint_rvas.append(per)
        name_rvas.append(base_rva + str_base + len(strings))
        strings += entry.library.encode("latin-1") + b"\0"

    blob = bytearray(str_base + len(strings))
    blob[str_base:] = strings
    pos = 0
    for desc in keep:
        blob[pos : pos + IMPORT_DESCRIPTOR_SIZE] = desc
        pos += IMPORT_DESCRIPTOR_SIZE
    iats = []
    flag = (1 << 63) if pe32_plus else (1 << 31)
    for entry, (ilt, iat), hints, name_rva in zip(new_entries, thunk_slots, hint_rvas, name_rvas):
        struct.pack_into("<IIIII", blob, pos, base_rva + ilt, 0, 0, name_rva, base_rva + iat)
        pos += IMPORT_DESCRIPTOR_SIZE
        for k, (fn, hint) in enumerate(zip(entry.functions, hints)):
            value = (flag | fn) if hint is None else hint
            struct.pack_into(fmt, blob, ilt + k * width, value)
            struct.pack_into(fmt, blob, iat + k * width, value)
        iats.append((base_rva + iat, (len(entry.functions) + 1) * width))
    return bytes(blob), desc_size, iats
