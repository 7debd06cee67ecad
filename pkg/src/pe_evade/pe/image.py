"""
Lossless region model of PE32/PE32+ files.

Every byte of a parsed file belongs to exactly one region: the DOS header,
the DOS stub, the NT headers plus section table, the header padding that
follows the table, a section's raw data, a gap between sections, or the
overlay. Regions the model does not understand (resources, relocations,
bound imports living in header padding...) are carried verbatim.

    img = parse(open("sample.exe", "rb").read())
    img = img.replace(overlay=img.overlay + b"\\0" * 16)
    data = serialize(img)

Reference: https://learn.microsoft.com/en-us/windows/win32/debug/pe-format
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from typing import Iterator, List, Optional, Sequence, Tuple

from ..errors import LayoutOverflow, Malformed, NotPe

MZ_MAGIC = b"MZ"
PE_SIGNATURE = b"PE\0\0"
PE32 = 0x10B
PE32_PLUS = 0x20B

MACHINE_I386 = 0x14C
MACHINE_AMD64 = 0x8664

DOS_HEADER_SIZE = 64
COFF_SIZE = 20
SECTION_HEADER_SIZE = 40
MAX_SECTIONS = 96

DIR_EXPORT = 0
DIR_IMPORT = 1
DIR_RESOURCE = 2
DIR_EXCEPTION = 3
DIR_SECURITY = 4
DIR_BASERELOC = 5
DIR_DEBUG = 6
DIR_TLS = 9
DIR_BOUND_IMPORT = 11
DIR_IAT = 12
NUM_DIRECTORIES = 16

SCN_CNT_CODE = 0x00000020
SCN_CNT_INITIALIZED_DATA = 0x00000040
SCN_CNT_UNINITIALIZED_DATA = 0x00000080
SCN_MEM_DISCARDABLE = 0x02000000
SCN_MEM_SHARED = 0x10000000
SCN_MEM_EXECUTE = 0x20000000
SCN_MEM_READ = 0x40000000
SCN_MEM_WRITE = 0x80000000

DEFAULT_FILE_ALIGNMENT = 512
DEFAULT_SECTION_ALIGNMENT = 4096

COFF_FORMAT = "<HHIIIHH"

# name -> (offset, struct code) for each optional-header dialect
_OPT_FIELDS_COMMON = {
    "magic": (0, "H"),
    "major_linker": (2, "B"),
    "minor_linker": (3, "B"),
    "size_of_code": (4, "I"),
    "entry_point": (16, "I"),
    "section_alignment": (32, "I"),
    "file_alignment": (36, "I"),
    "major_os": (40, "H"),
    "minor_os": (42, "H"),
    "major_image": (44, "H"),
    "minor_image": (46, "H"),
    "major_subsystem": (48, "H"),
    "minor_subsystem": (50, "H"),
    "size_of_image": (56, "I"),
    "size_of_headers": (60, "I"),
    "checksum": (64, "I"),
    "subsystem": (68, "H"),
    "dll_characteristics": (70, "H"),
}
_OPT_FIELDS = {
    PE32: dict(_OPT_FIELDS_COMMON, heap_commit=(84, "I"), num_rva_and_sizes=(92, "I")),
    PE32_PLUS: dict(_OPT_FIELDS_COMMON, heap_commit=(96, "Q"), num_rva_and_sizes=(108, "I")),
}
_DIR_OFFSET = {PE32: 96, PE32_PLUS: 112}

#: offset of the CheckSum field relative to e_lfanew
CHECKSUM_OFFSET_FROM_NT = 4 + COFF_SIZE + 64


def align_up(value: int, alignment: int) -> int:
    if alignment <= 1:
        return value
    return (value + alignment - 1) // alignment * alignment


@dataclass(frozen=True)
class CoffHeader:
    machine: int
    number_of_sections: int
    timestamp: int
    symbol_table_ptr: int
    symbol_count: int
    optional_header_size: int
    characteristics: int

    def pack(self, number_of_sections: int) -> bytes:
        return struct.pack(
            COFF_FORMAT,
            self.machine,
            number_of_sections,
            self.timestamp,
            self.symbol_table_ptr,
            self.symbol_count,
            self.optional_header_size,
            self.characteristics,
        )


@dataclass(frozen=True)
class OptionalHeader:
    """Decoded optional header. ``raw`` keeps every byte, decoded fields win on write."""

    magic: int
    major_linker: int
    minor_linker: int
    size_of_code: int
    entry_point: int
    section_alignment: int
    file_alignment: int
    major_os: int
    minor_os: int
    major_image: int
    minor_image: int
    major_subsystem: int
    minor_subsystem: int
    size_of_image: int
    size_of_headers: int
    checksum: int
    subsystem: int
    dll_characteristics: int
    heap_commit: int
    num_rva_and_sizes: int
    data_directories: Tuple[Tuple[int, int], ...]
    raw: bytes = field(repr=False)

    @property
    def is_pe32_plus(self) -> bool:
        return self.magic == PE32_PLUS

    def directory(self, index: int) -> Tuple[int, int]:
        if index < len(self.data_directories):
            return self.data_directories[index]
        return (0, 0)

    def with_directory(self, index: int, rva: int, size: int) -> "OptionalHeader":
        if index >= len(self.data_directories):
            raise Malformed(f"data directory {index} not present (only {len(self.data_directories)})")
        dirs = list(self.data_directories)
        dirs[index] = (rva, size)
        return replace(self, data_directories=tuple(dirs))

    def pack(self) -> bytes:
        buf = bytearray(self.raw)
        for name, (offset, code) in _OPT_FIELDS[self.magic].items():
            struct.pack_into("<" + code, buf, offset, getattr(self, name))
        base = _DIR_OFFSET[self.magic]
        for i, (rva, size) in enumerate(self.data_directories):
            struct.pack_into("<II", buf, base + 8 * i, rva, size)
        return bytes(buf)


@dataclass(frozen=True)
class Section:
    name: bytes  # exactly 8 raw bytes
    virtual_size: int
    virtual_address: int
    raw_size: int
    raw_offset: int
    characteristics: int
    data: bytes = field(repr=False)
    extra: bytes = field(default=b"\0" * 12, repr=False)  # reloc/linenumber fields, verbatim

    @property
    def label(self) -> str:
        return self.name.split(b"\0", 1)[0].decode("latin-1")

    @property
    def virtual_end(self) -> int:
        return self.virtual_address + max(self.virtual_size, self.raw_size)

    @property
    def raw_end(self) -> int:
        return self.raw_offset + self.raw_size

    def contains_rva(self, rva: int) -> bool:
        return self.virtual_address <= rva < self.virtual_end

    def pack(self) -> bytes:
        return struct.pack(
            "<8sIIII12sI",
            self.name,
            self.virtual_size,
            self.virtual_address,
            self.raw_size,
            self.raw_offset,
            self.extra,
            self.characteristics,
        )


def section_name(text: str) -> bytes:
    raw = text.encode("latin-1")
    if len(raw) > 8:
        raise ValueError(f"section name {text!r} longer than 8 bytes")
    return raw.ljust(8, b"\0")


@dataclass(frozen=True)
class PeImage:
    dos_header: bytes = field(repr=False)
    dos_stub: bytes = field(repr=False)
    coff: CoffHeader
    optional: OptionalHeader
    sections: Tuple[Section, ...]
    header_padding: bytes = field(repr=False)
    gaps: Tuple[Tuple[int, bytes], ...] = field(repr=False)
    overlay: bytes = field(repr=False)
    #: offset of the attribute certificate inside ``overlay``, if any
    certificate_offset: Optional[int] = None

    replace = replace

    @property
    def e_lfanew(self) -> int:
        return struct.unpack_from("<I", self.dos_header, 60)[0]

    @property
    def is_pe32_plus(self) -> bool:
        return self.optional.is_pe32_plus

    @property
    def section_table_offset(self) -> int:
        return self.e_lfanew + 4 + COFF_SIZE + self.coff.optional_header_size

    @property
    def section_table_end(self) -> int:
        return self.section_table_offset + SECTION_HEADER_SIZE * len(self.sections)

    @property
    def headers_end(self) -> int:
        return self.section_table_end + len(self.header_padding)

    @property
    def data_end(self) -> int:
        """File offset where the overlay begins."""
        end = self.headers_end
        for off, blob in self.gaps:
            end = max(end, off + len(blob))
        for s in self.sections:
            if s.raw_size:
                end = max(end, s.raw_end)
        return end

    @property
    def certificate(self) -> Optional[bytes]:
        if self.certificate_offset is None:
            return None
        size = self.optional.directory(DIR_SECURITY)[1]
        return self.overlay[self.certificate_offset : self.certificate_offset + size]

    def section_for_rva(self, rva: int) -> Optional[int]:
        for i, s in enumerate(self.sections):
            if s.contains_rva(rva):
                return i
        return None

    def with_optional(self, **changes) -> "PeImage":
        return replace(self, optional=replace(self.optional, **changes))

    def with_section(self, index: int, section: Section) -> "PeImage":
        sections = list(self.sections)
        sections[index] = section
        return replace(self, sections=tuple(sections))

    def regions(self) -> List[Tuple[str, int, int]]:
        """(name, start, end) of every serialized region, in file order."""
        out = [
            ("dos_header", 0, DOS_HEADER_SIZE),
            ("dos_stub", DOS_HEADER_SIZE, self.e_lfanew),
            ("nt_headers", self.e_lfanew, self.section_table_end),
            ("header_padding", self.section_table_end, self.headers_end),
        ]
        for off, blob in self.gaps:
            out.append(("gap", off, off + len(blob)))
        for i, s in enumerate(self.sections):
            if s.raw_size:
                out.append((f"section[{i}]", s.raw_offset, s.raw_end))
        start = self.data_end
        out.append(("overlay", start, start + len(self.overlay)))
        out.sort(key=lambda r: (r[1], r[2]))
        return out


def _u16(data: bytes, off: int) -> int:
    return struct.unpack_from("<H", data, off)[0]


def _u32(data: bytes, off: int) -> int:
    return struct.unpack_from("<I", data, off)[0]


def _parse_optional(data: bytes, offset: int, size: int) -> OptionalHeader:
    if size < 2 or offset + size > len(data):
        raise Malformed("optional header truncated")
    raw = data[offset : offset + size]
    magic = _u16(raw, 0)
    if magic not in _OPT_FIELDS:
        raise Malformed(f"unknown optional header magic {magic:#x}")
    base = _DIR_OFFSET[magic]
    if size < base:
        raise Malformed("optional header shorter than its fixed fields")
    values = {}
    for name, (off, code) in _OPT_FIELDS[magic].items():
        values[name] = struct.unpack_from("<" + code, raw, off)[0]
    count = values["num_rva_and_sizes"]
    if count > NUM_DIRECTORIES or base + 8 * count > size:
        raise Malformed(f"bad NumberOfRvaAndSizes {count}")
    dirs = tuple(struct.unpack_from("<II", raw, base + 8 * i) for i in range(count))
    if values["file_alignment"] == 0 or values["section_alignment"] == 0:
        raise Malformed("zero alignment")
    return OptionalHeader(data_directories=dirs, raw=raw, **values)


def parse(data: bytes) -> PeImage:
    """Parse raw bytes into a :class:`PeImage`.

    Raises :class:`NotPe` when either signature is missing and :class:`Malformed`
    for anything the strict layout rules reject (truncated tables, section data
    outside the file, overlapping sections, certificates outside the overlay).
    """
    data = bytes(data)
    if len(data) < DOS_HEADER_SIZE or data[:2] != MZ_MAGIC:
        raise NotPe("missing MZ signature")
    e_lfanew = _u32(data, 60)
    if e_lfanew + 4 > len(data) or data[e_lfanew : e_lfanew + 4] != PE_SIGNATURE:
        raise NotPe("missing PE signature")
    if e_lfanew < DOS_HEADER_SIZE:
        raise Malformed("e_lfanew overlaps the DOS header")
    coff_off = e_lfanew + 4
    if coff_off + COFF_SIZE > len(data):
        raise Malformed("COFF header truncated")
    coff = CoffHeader(*struct.unpack_from(COFF_FORMAT, data, coff_off))
    if coff.number_of_sections > MAX_SECTIONS:
        raise Malformed(f"too many sections ({coff.number_of_sections})")
    optional = _parse_optional(data, coff_off + COFF_SIZE, coff.optional_header_size)

    table_off = coff_off + COFF_SIZE + coff.optional_header_size
    table_end = table_off + SECTION_HEADER_SIZE * coff.number_of_sections
    if table_end > len(data):
        raise Malformed("section table truncated")

    headers = []
    for i in range(coff.number_of_sections):
        off = table_off + SECTION_HEADER_SIZE * i
        name, vsize, va, rsize, roff, extra, chars = struct.unpack_from("<8sIIII12sI", data, off)
        headers.append((name, vsize, va, rsize, roff, extra, chars))

    sections = []
    for name, vsize, va, rsize, roff, extra, chars in headers:
        if rsize:
            if roff < table_end:
                raise Malformed(f"section {name!r} data overlaps headers")
            if roff + rsize > len(data):
                raise Malformed(f"section {name!r} data past end of file")
        sections.append(
            Section(name, vsize, va, rsize, roff, chars, data[roff : roff + rsize] if rsize else b"", extra)
        )

    raw_sections = sorted((s for s in sections if s.raw_size), key=lambda s: s.raw_offset)
    for a, b in zip(raw_sections, raw_sections[1:]):
        if b.raw_offset < a.raw_end:
            raise Malformed("overlapping section data")

    if raw_sections:
        first = raw_sections[0].raw_offset
    else:
        first = max(table_end, min(optional.size_of_headers, len(data)))
    header_padding = data[table_end:first]

    gaps = []
    cursor = first
    for s in raw_sections:
        if s.raw_offset > cursor:
            gaps.append((cursor, data[cursor : s.raw_offset]))
        cursor = s.raw_end
    overlay = data[cursor:]

    cert_off = None
    cert_rva, cert_size = optional.directory(DIR_SECURITY)
    if cert_size:
        if cert_rva < cursor or cert_rva + cert_size > len(data):
            raise Malformed("certificate table outside the overlay")
        cert_off = cert_rva - cursor

    return PeImage(
        dos_header=data[:DOS_HEADER_SIZE],
        dos_stub=data[DOS_HEADER_SIZE:e_lfanew],
        coff=coff,
        optional=optional,
        sections=tuple(sections),
        header_padding=header_padding,
        gaps=tuple(gaps),
        overlay=overlay,
        certificate_offset=cert_off,
    )


def derived_size_of_image(img: PeImage) -> int:
    end = 0
    for s in img.sections:
        end = max(end, s.virtual_address + max(s.virtual_size, 1 if s.raw_size else 0))
    computed = align_up(end, img.optional.section_alignment)
    return max(img.optional.size_of_image, computed)


def derived_size_of_headers(img: PeImage) -> int:
    if img.section_table_end <= img.optional.size_of_headers:
        return img.optional.size_of_headers
    return align_up(img.section_table_end, img.optional.file_alignment)


def _check_layout(img: PeImage) -> None:
    if len(img.dos_header) != DOS_HEADER_SIZE:
        raise ValueError("DOS header must be 64 bytes")
    if DOS_HEADER_SIZE + len(img.dos_stub) != img.e_lfanew:
        raise ValueError("DOS stub length disagrees with e_lfanew")
    for s in img.sections:
        if len(s.data) != s.raw_size:
            raise ValueError(f"section {s.label!r}: raw_size {s.raw_size} != len(data) {len(s.data)}")
        if len(s.name) != 8:
            raise ValueError(f"section name {s.name!r} is not 8 bytes")
    regions = img.regions()
    prev_name, prev_end = None, 0
    for name, start, end in regions:
        if start < prev_end and end > start:
            if prev_name in ("nt_headers", "header_padding"):
                raise LayoutOverflow(f"{name} at {start:#x} collides with headers ending at {prev_end:#x}")
            raise LayoutOverflow(f"{name} at {start:#x} overlaps {prev_name} ending at {prev_end:#x}")
        if end > prev_end:
            prev_name, prev_end = name, end


def serialize(img: PeImage) -> bytes:
    """Write ``img`` back to bytes.

    Section count, SizeOfImage and SizeOfHeaders are re-derived when the model
    outgrew the stored values; everything else is written as recorded.
    """
    _check_layout(img)
    optional = img.optional
    size_of_image = derived_size_of_image(img)
    size_of_headers = derived_size_of_headers(img)
    data_end = img.data_end
    dirs_changed = {}
    if img.certificate_offset is not None:
        dirs_changed[DIR_SECURITY] = (data_end + img.certificate_offset, optional.directory(DIR_SECURITY)[1])
    if size_of_image != optional.size_of_image or size_of_headers != optional.size_of_headers or dirs_changed:
        optional = replace(optional, size_of_image=size_of_image, size_of_headers=size_of_headers)
        for idx, (rva, size) in dirs_changed.items():
            optional = optional.with_directory(idx, rva, size)

    out = bytearray(data_end + len(img.overlay))
    out[0:DOS_HEADER_SIZE] = img.dos_header
    out[DOS_HEADER_SIZE : img.e_lfanew] = img.dos_stub
    pos = img.e_lfanew
    nt = PE_SIGNATURE + img.coff.pack(len(img.sections)) + optional.pack()
    out[pos : pos + len(nt)] = nt
    pos += len(nt)
    for s in img.sections:
        out[pos : pos + SECTION_HEADER_SIZE] = s.pack()
        pos += SECTION_HEADER_SIZE
    out[pos : pos + len(img.header_padding)] = img.header_padding
    for off, blob in img.gaps:
        out[off : off + len(blob)] = blob
    for s in img.sections:
        if s.raw_size:
            out[s.raw_offset : s.raw_end] = s.data
    out[data_end:] = img.overlay
    return bytes(out)


def iter_section_ranges(img: PeImage) -> Iterator[Tuple[int, int, int]]:
    """Yield (index, start, end) file ranges of sections that carry raw data."""
    for i, s in enumerate(img.sections):
        if s.raw_size:
            yield i, s.raw_offset, s.raw_end


def read_rva(img: PeImage, rva: int, size: int) -> bytes:
    """Read ``size`` bytes at ``rva`` from section data; zero-filled past raw data."""
    idx = img.section_for_rva(rva)
    if idx is None:
        raise Malformed(f"RVA {rva:#x} not inside any section")
    s = img.sections[idx]
    start = rva - s.virtual_address
    if rva + size > s.virtual_end:
        raise Malformed(f"range {rva:#x}+{size} crosses the end of section {s.label!r}")
    chunk = s.data[start : start + size]
    return chunk + b"\0" * (size - len(chunk))


def read_cstring(img: PeImage, rva: int, limit: int = 512) -> bytes:
    idx = img.section_for_rva(rva)
    if idx is None:
        raise Malformed(f"string RVA {rva:#x} not inside any section")
    s = img.sections[idx]
    start = rva - s.virtual_address
    end = s.data.find(b"\0", start, start + limit)
    if end < 0:
        raise Malformed(f"unterminated string at RVA {rva:#x}")
    return s.data[start:end]


def structurally_equal(a: PeImage, b: PeImage) -> bool:
    return a == b


def next_section_slot(img: PeImage) -> Tuple[int, int]:
    """(raw_offset, virtual_address) for a section appended after every existing one."""
    raw_end = img.data_end
    va_end = 0
    for s in img.sections:
        va_end = max(va_end, s.virtual_address + max(s.virtual_size, s.raw_size))
    va_end = max(va_end, img.optional.size_of_headers)
    return (
        align_up(raw_end, img.optional.file_alignment),
        align_up(va_end, img.optional.section_alignment),
    )


def reserve_section_header(img: PeImage) -> PeImage:
    """Return an image whose header region has room for one more section header.

    Zero header padding is consumed first. Otherwise every section is shifted
    down the file by one file-alignment step, and the file-offset references the
    model knows about (certificate, debug raw pointers, symbol table) follow.
    Raises :class:`LayoutOverflow` when the grown headers would overlap the
    first section in memory.
    """
    pad = img.header_padding
    if len(pad) >= SECTION_HEADER_SIZE and not any(pad[:SECTION_HEADER_SIZE]):
        return replace(img, header_padding=pad[SECTION_HEADER_SIZE:])

    fa = img.optional.file_alignment
    needed = img.section_table_end + SECTION_HEADER_SIZE + len(pad)
    raw_sections = [s for s in img.sections if s.raw_size]
    first_raw = min((s.raw_offset for s in raw_sections), default=img.headers_end)
    delta = align_up(max(needed - first_raw, 0), fa)
    if delta == 0:
        delta = fa
    new_headers_size = align_up(max(img.optional.size_of_headers, needed), fa)
    first_va = min((s.virtual_address for s in img.sections), default=None)
    if first_va is not None and new_headers_size > first_va:
        raise LayoutOverflow("no room to grow the section table below the first section")

    shifted = tuple(
        replace(s, raw_offset=s.raw_offset + delta) if s.raw_size else s for s in img.sections
    )
    gaps = tuple((off + delta, blob) for off, blob in img.gaps)
    # header padding keeps its bytes, pushed back by the new header, then zero filled
    new_pad = pad + b"\0" * (first_raw + delta - needed)
    out = replace(img, sections=shifted, gaps=gaps, header_padding=new_pad)
    out = out.with_optional(size_of_headers=max(img.optional.size_of_headers, new_headers_size))
    if img.optional.directory(DIR_BOUND_IMPORT)[1]:
        # bound imports live in header padding at a file offset we just moved
        out = replace(out, optional=out.optional.with_directory(DIR_BOUND_IMPORT, 0, 0))
    if img.coff.symbol_table_ptr:
        out = replace(out, coff=replace(img.coff, symbol_table_ptr=img.coff.symbol_table_ptr + delta))
    from .directories import shift_debug_pointers  # local: directories imports this module

    return shift_debug_pointers(out, delta)
