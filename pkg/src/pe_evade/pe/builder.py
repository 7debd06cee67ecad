"""Build small, well-formed PE files directly from the PE/COFF layout.

The builder writes bytes with ``struct`` and never goes through
:func:`~pe_evade.pe.image.serialize`, so files it produces are an
independent check on the parser.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

from .checksum import fix_checksum
from .directories import ImportEntry, build_import_blob
from .image import (
    DIR_BASERELOC,
    DIR_DEBUG,
    DIR_EXPORT,
    DIR_IAT,
    DIR_IMPORT,
    DIR_RESOURCE,
    DIR_SECURITY,
    MACHINE_AMD64,
    MACHINE_I386,
    NUM_DIRECTORIES,
    PE32,
    PE32_PLUS,
    SCN_CNT_CODE,
    SCN_CNT_INITIALIZED_DATA,
    SCN_MEM_DISCARDABLE,
    SCN_MEM_EXECUTE,
    SCN_MEM_READ,
    SCN_MEM_WRITE,
    align_up,
)

FILE_ALIGNMENT = 0x200
SECTION_ALIGNMENT = 0x1000
E_LFANEW = 0x80
SIZE_OF_HEADERS = 0x400

CODE = SCN_CNT_CODE | SCN_MEM_EXECUTE | SCN_MEM_READ
RDATA = SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ
DATA = SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ | SCN_MEM_WRITE

DOS_STUB = (
    bytes.fromhex("0e1fba0e00b409cd21b8014ccd21")
    + b"This program cannot be run in DOS mode.\r\r\n$"
).ljust(E_LFANEW - 64, b"\0")


@dataclass
class SectionSpec:
    name: str
    data: bytes
    characteristics: int = DATA
    virtual_size: Optional[int] = None


@dataclass
class PeSpec:
    sections: List[SectionSpec]
    machine: int = MACHINE_I386
    entry_section: int = 0
    entry_offset: int = 0
    imports: Sequence[ImportEntry] = ()
    exports: Sequence[str] = ()
    debug_path: Optional[str] = None
    certificate: Optional[bytes] = None
    relocations: bool = False
    resources: Optional[bytes] = None
    overlay: bytes = b""
    timestamp: int = 0
    subsystem: int = 2
    characteristics: int = 0x0102  # EXECUTABLE_IMAGE | 32BIT_MACHINE
    dll_characteristics: int = 0x8140
    linker_version: Tuple[int, int] = (14, 0)
    os_version: Tuple[int, int] = (6, 0)
    image_version: Tuple[int, int] = (0, 0)
    subsystem_version: Tuple[int, int] = (6, 0)
    heap_commit: int = 0x1000
    valid_checksum: bool = True

    @property
    def pe32_plus(self) -> bool:
        return self.machine == MACHINE_AMD64


def _export_blob(base_rva: int, names: Sequence[str], target_rva: int) -> bytes:
    n = len(names)
    dll_name = b"module.dll\0"
    head = 40
    eat = head
    npt = eat + 4 * n
    ot = npt + 4 * n
    strings_at = ot + 2 * n
    strings = bytearray(dll_name)
    name_rvas = []
    for name in sorted(names):
        name_rvas.append(base_rva + strings_at + len(strings))
        strings += name.encode("latin-1") + b"\0"
    blob = bytearray(strings_at) + strings
    struct.pack_into(
        "<IIHHIIIIIII", blob, 0,
        0, 0, 0, 0, base_rva + strings_at, 1, n, n,
        base_rva + eat, base_rva + npt, base_rva + ot,
    )
    for i in range(n):
        struct.pack_into("<I", blob, eat + 4 * i, target_rva + 16 * i)
        struct.pack_into("<I", blob, npt + 4 * i, name_rvas[i])
        struct.pack_into("<H", blob, ot + 2 * i, i)
    return bytes(blob)


def _debug_blob(base_rva: int, base_offset: int, pdb_path: str, timestamp: int) -> bytes:
    cv = b"RSDS" + bytes(range(16)) + struct.pack("<I", 1) + pdb_path.encode("latin-1") + b"\0"
    entry = struct.pack("<IIHHIIII", 0, timestamp, 0, 0, 2, len(cv), base_rva + 28, base_offset + 28)
    return entry + cv


def _reloc_blob(page_rva: int) -> bytes:
    entries = [(3 << 12) | off for off in (0x10, 0x20, 0x30, 0x40)]
    return struct.pack("<II", page_rva, 8 + 2 * len(entries)) + struct.pack(f"<{len(entries)}H", *entries)


def build_pe(spec: PeSpec) -> bytes:
    """Serialize ``spec`` to PE bytes."""
    pe32_plus = spec.pe32_plus
    dirs = [(0, 0)] * NUM_DIRECTORIES

    # (name, data, characteristics, virtual_size) with VA assigned in order
    layout: List[Tuple[bytes, bytes, int, int, int]] = []
    va = SECTION_ALIGNMENT
    raw = SIZE_OF_HEADERS

    def place(name: str, data: bytes, chars: int, vsize: Optional[int] = None):
        nonlocal va, raw
        vsize = len(data) if vsize is None else vsize
        raw_size = align_up(len(data), FILE_ALIGNMENT)
        layout.append((name.encode("latin-1").ljust(8, b"\0"), data.ljust(raw_size, b"\0"), chars, vsize, va, raw))
        here = (va, raw)
        va = align_up(va + max(vsize, 1), SECTION_ALIGNMENT)
        raw += raw_size
        return here

    for s in spec.sections:
        place(s.name, s.data, s.characteristics, s.virtual_size)
    entry_rva = layout[spec.entry_section][4] + spec.entry_offset
    code_rva = next((l[4] for l in layout if l[2] & SCN_CNT_CODE), entry_rva)

    if spec.imports:
        blob, desc_size, iats = build_import_blob(va, spec.imports, pe32_plus)
        place(".idata", blob, DATA)
        dirs[DIR_IMPORT] = (layout[-1][4], desc_size)
        first, last = iats[0], iats[-1]
        dirs[DIR_IAT] = (first[0], last[0] + last[1] - first[0])
    if spec.exports:
        blob = _export_blob(va, spec.exports, code_rva)
        place(".edata", blob, RDATA)
        dirs[DIR_EXPORT] = (layout[-1][4], len(blob))
    if spec.debug_path is not None:
        blob = _debug_blob(va, raw, spec.debug_path, spec.timestamp)
        place(".rdata", blob, RDATA)
        dirs[DIR_DEBUG] = (layout[-1][4], 28)
    if spec.resources is not None:
        blob = struct.pack("<IIHHHH", 0, spec.timestamp, 0, 0, 0, 0) + spec.resources
        place(".rsrc", blob, RDATA)
        dirs[DIR_RESOURCE] = (layout[-1][4], len(blob))
    if spec.relocations:
        blob = _reloc_blob(code_rva)
        place(".reloc", blob, RDATA | SCN_MEM_DISCARDABLE)
        dirs[DIR_BASERELOC] = (layout[-1][4], len(blob))

    size_of_image = va
    size_of_code = sum(len(l[1]) for l in layout if l[2] & SCN_CNT_CODE)
    data_end = raw
    overlay = spec.overlay
    cert_blob = b""
    if spec.certificate is not None:
        pad = b"\0" * (align_up(data_end + len(overlay), 8) - data_end - len(overlay))
        overlay = overlay + pad
        body = spec.certificate
        cert_blob = struct.pack("<IHH", 8 + len(body), 0x0200, 0x0002) + body
        cert_blob += b"\0" * (align_up(len(cert_blob), 8) - len(cert_blob))
        dirs[DIR_SECURITY] = (data_end + len(overlay), len(cert_blob))

    opt_size = (112 if pe32_plus else 96) + 8 * NUM_DIRECTORIES
    coff = struct.pack(
        "<HHIIIHH",
        spec.machine, len(layout), spec.timestamp, 0, 0, opt_size,
        spec.characteristics | (0x0020 if pe32_plus else 0),
    )
    if pe32_plus:
        opt = struct.pack(
            "<HBBIIIIIQIIHHHHHHIIIIHHQQQQII",
            PE32_PLUS, spec.linker_version[0], spec.linker_version[1],
            size_of_code, 0, 0, entry_rva, code_rva, 0x140000000,
            SECTION_ALIGNMENT, FILE_ALIGNMENT,
            spec.os_version[0], spec.os_version[1],
            spec.image_version[0], spec.image_version[1],
            spec.subsystem_version[0], spec.subsystem_version[1],
            0, size_of_image, SIZE_OF_HEADERS, 0, spec.subsystem, spec.dll_characteristics,
            0x100000, 0x1000, 0x100000, spec.heap_commit, 0, NUM_DIRECTORIES,
        )
    else:
        opt = struct.pack(
            "<HBBIIIIIIIIIHHHHHHIIIIHHIIIIII",
            PE32, spec.linker_version[0], spec.linker_version[1],
            size_of_code, 0, 0, entry_rva, code_rva, 0, 0x400000,
            SECTION_ALIGNMENT, FILE_ALIGNMENT,
            spec.os_version[0], spec.os_version[1],
            spec.image_version[0], spec.image_version[1],
            spec.subsystem_version[0], spec.subsystem_version[1],
            0, size_of_image, SIZE_OF_HEADERS, 0, spec.subsystem, spec.dll_characteristics,
            0x100000, 0x1000, 0x100000, spec.heap_commit, 0, NUM_DIRECTORIES,
        )
    opt += b"".join(struct.pack("<II", r, s) for r, s in dirs)
    assert len(opt) == opt_size

    table = b"".join(
        struct.pack("<8sIIII12sI", name, vsize, sva, len(data), roff, b"\0" * 12, chars)
        for name, data, chars, vsize, sva, roff in layout
    )
    dos = bytearray(64)
    dos[0:2] = b"MZ"
    struct.pack_into("<HHHHHHHHHH", dos, 2, 0x90, 3, 0, 4, 0, 0xFFFF, 0, 0xB8, 0, 0)
    struct.pack_into("<H", dos, 24, 0x40)
    struct.pack_into("<I", dos, 60, E_LFANEW)
    headers = bytes(dos) + DOS_STUB + b"PE\0\0" + coff + opt + table
    if len(headers) > SIZE_OF_HEADERS:
        raise ValueError(f"too many sections for a {SIZE_OF_HEADERS:#x}-byte header")
    out = headers.ljust(SIZE_OF_HEADERS, b"\0") + b"".join(l[1] for l in layout) + overlay + cert_blob
    return fix_checksum(out) if spec.valid_checksum else out


def minimal_pe(machine: int = MACHINE_I386, code: bytes = b"\x55\x89\xe5\x31\xc0\x5d\xc3") -> bytes:
    """One executable ``.text`` section whose first byte is the entry point."""
    return build_pe(PeSpec(sections=[SectionSpec(".text", code, CODE)], machine=machine))
