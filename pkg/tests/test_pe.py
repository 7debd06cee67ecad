import struct
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pe_evade.errors import LayoutOverflow, Malformed, NotPe
from pe_evade.pe import (
    ImportEntry,
    compute_pe_checksum,
    fix_checksum,
    parse,
    read_debug,
    read_exports,
    read_imports,
    serialize,
    stored_checksum,
)
from pe_evade.pe.builder import CODE, DATA, PeSpec, SectionSpec, build_pe, minimal_pe
from pe_evade.pe.image import (
    DIR_SECURITY,
    MACHINE_AMD64,
    PE32,
    PE32_PLUS,
    SCN_CNT_CODE,
    reserve_section_header,
    section_name,
)


def hand_built_pe(code=b"\x31\xc0\xc3"):
    """One .text section, PE32, laid out byte by byte without the library."""
    dos = bytearray(64)
    dos[0:2] = b"MZ"
    struct.pack_into("<I", dos, 60, 0x40)
    coff = struct.pack("<HHIIIHH", 0x14C, 1, 0x5F000000, 0, 0, 224, 0x0102)
    opt = struct.pack(
        "<HBBIIIIIIIIIHHHHHHIIIIHHIIIIII",
        0x10B, 14, 0,                  # magic, linker
        0x200, 0, 0,                   # code, init data, uninit data
        0x1000, 0x1000, 0x2000,        # entry, base of code, base of data
        0x400000, 0x1000, 0x200,       # image base, section/file alignment
        6, 0, 1, 2, 6, 0,              # os, image, subsystem versions
        0,                             # win32 version
        0x2000, 0x200,                 # size of image, size of headers
        0,                             # checksum
        3, 0x8140,                     # subsystem, dll characteristics
        0x100000, 0x1000, 0x100000, 0x1000,
        0, 16,
    )
    opt += b"\0" * 128
    assert len(opt) == 224
    sect = struct.pack("<8sIIII12sI", b".text\0\0\0", len(code), 0x1000, 0x200, 0x200, b"\0" * 12, 0x60000020)
    head = bytes(dos) + b"PE\0\0" + coff + opt + sect
    head = head.ljust(0x200, b"\0")
    return head + code.ljust(0x200, b"\0")


def checksum_oracle(data: bytes) -> int:
    """Word-by-word fold, the way the loader documents it."""
    e_lfanew = struct.unpack_from("<I", data, 60)[0]
    skip = e_lfanew + 4 + 20 + 64
    padded = data + (b"\0" if len(data) % 2 else b"")
    total = 0
    for i in range(0, len(padded), 2):
        if i in (skip, skip + 2):
            continue
        total += padded[i] | (padded[i + 1] << 8)
        total = (total & 0xFFFF) + (total >> 16)
    total = (total & 0xFFFF) + (total >> 16)
    return (total + len(data)) & 0xFFFFFFFF


def test_hand_built_fields():
    img = parse(hand_built_pe())
    assert img.coff.machine == 0x14C
    assert img.coff.timestamp == 0x5F000000
    assert img.optional.magic == PE32
    assert img.optional.entry_point == 0x1000
    assert img.optional.file_alignment == 0x200
    assert img.optional.size_of_image == 0x2000
    assert (img.optional.major_image, img.optional.minor_image) == (1, 2)
    assert img.optional.subsystem == 3
    assert len(img.sections) == 1
    s = img.sections[0]
    assert s.label == ".text"
    assert (s.virtual_size, s.virtual_address, s.raw_size, s.raw_offset) == (3, 0x1000, 0x200, 0x200)
    assert s.data[:3] == b"\x31\xc0\xc3"
    assert img.overlay == b""
    assert img.section_for_rva(img.optional.entry_point) == 0


def test_minimal_pe_entry_inside_section():
    img = parse(minimal_pe())
    assert len(img.sections) == 1
    assert img.sections[0].contains_rva(img.optional.entry_point)
    assert img.sections[0].characteristics & SCN_CNT_CODE


def test_hand_built_round_trip():
    raw = hand_built_pe()
    assert serialize(parse(raw)) == raw


def test_corpus_round_trip(corpus_files):
    for raw in corpus_files:
        img = parse(raw)
        assert serialize(img) == raw
        assert parse(serialize(img)) == img


@pytest.mark.parametrize("raw", [b"", b"ZM" + b"\0" * 200, b"MZ" + b"\0" * 62])
def test_not_pe(raw):
    with pytest.raises(NotPe):
        parse(raw)


def test_truncated_section_data_is_malformed():
    raw = hand_built_pe()
    with pytest.raises(Malformed):
        parse(raw[:0x300])


def test_overlapping_sections_are_malformed():
    raw = bytearray(build_pe(PeSpec(sections=[SectionSpec(".text", b"\x90" * 600, CODE), SectionSpec(".data", b"d" * 100)])))
    img = parse(bytes(raw))
    second = img.section_table_offset + 40
    struct.pack_into("<I", raw, second + 20, img.sections[0].raw_offset)
    with pytest.raises(Malformed):
        parse(bytes(raw))


def test_serialize_rejects_overlap():
    img = parse(build_pe(PeSpec(sections=[SectionSpec(".text", b"\x90" * 600, CODE), SectionSpec(".data", b"d" * 100)])))
    a, b = img.sections
    bad = img.with_section(1, replace(b, raw_offset=a.raw_offset + 0x200))
    with pytest.raises(LayoutOverflow):
        serialize(bad)


def test_checksum_matches_reference_loop(corpus_files):
    for raw in corpus_files[:20] + [hand_built_pe(), hand_built_pe() + b"\x07"]:
        assert compute_pe_checksum(raw) == checksum_oracle(raw)


@given(st.binary(max_size=300))
@settings(max_examples=60, deadline=None)
def test_checksum_any_overlay(tail):
    raw = minimal_pe() + tail
    assert compute_pe_checksum(raw) == checksum_oracle(raw)
    fixed = fix_checksum(raw)
    assert stored_checksum(fixed) == compute_pe_checksum(fixed)


def test_builder_directories():
    spec = PeSpec(
        sections=[SectionSpec(".text", b"\x90" * 64, CODE)],
        imports=[ImportEntry("kernel32.dll", ("ExitProcess", "Sleep")), ImportEntry("ws2_32.dll", (23,))],
        exports=["alpha", "beta"],
        debug_path="C:\\build\\x.pdb",
        certificate=b"\x30\x82" + b"c" * 40,
        overlay=b"tail-bytes",
    )
    raw = build_pe(spec)
    img = parse(raw)
    assert read_imports(img) == [ImportEntry("kernel32.dll", ("ExitProcess", "Sleep")), ImportEntry("ws2_32.dll", (23,))]
    assert read_exports(img) == ["alpha", "beta"]
    assert len(read_debug(img)) == 1
    assert img.certificate is not None and img.optional.directory(DIR_SECURITY)[1] > 0
    assert serialize(img) == raw
    assert stored_checksum(raw) == compute_pe_checksum(raw)


def test_pe32_plus():
    img = parse(build_pe(PeSpec(sections=[SectionSpec(".text", b"\x90" * 64, CODE)], machine=MACHINE_AMD64)))
    assert img.optional.magic == PE32_PLUS


def test_serialize_grows_derived_fields():
    img = parse(minimal_pe())
    old = img.optional.size_of_image
    grown = reserve_section_header(img)
    s = img.sections[0]
    extra = replace(s, name=section_name(".new"), virtual_address=old, raw_offset=img.data_end, data=b"x" * 0x200, raw_size=0x200, virtual_size=0x200)
    out = parse(serialize(grown.replace(sections=grown.sections + (extra,))))
    assert out.coff.number_of_sections == 2
    assert out.optional.size_of_image > old


def test_reserve_header_shift_keeps_debug_payload_reachable():
    raw0 = build_pe(PeSpec(sections=[SectionSpec(".text", b"\x90" * 64, CODE)], debug_path="C:\\x.pdb"))
    img = parse(raw0)
    first = img.sections[0].raw_offset
    while img.sections[0].raw_offset == first:
        img = reserve_section_header(img)
    raw = serialize(img)
    entry = read_debug(parse(raw))[0]
    assert raw[entry.file_offset : entry.file_offset + 4] == b"RSDS"
    old_entry = read_debug(parse(raw0))[0]
    assert raw0[old_entry.file_offset : old_entry.file_offset + entry.size] == raw[entry.file_offset : entry.file_offset + entry.size]


_names = st.text(alphabet="abcdefghijklmnop", min_size=1, max_size=7).map(lambda s: "." + s)


@st.composite
def pe_specs(draw):
    n = draw(st.integers(1, 4))
    sections = [
        SectionSpec(draw(_names), draw(st.binary(min_size=1, max_size=1500)), draw(st.sampled_from([CODE, DATA])))
        for _ in range(n)
    ]
    libs = draw(st.lists(st.sampled_from(["kernel32.dll", "user32.dll", "advapi32.dll"]), unique=True, max_size=3))
    imports = [ImportEntry(lib, tuple(draw(st.lists(st.sampled_from(["A", "Bb", "Ccc", "Dddd"]), min_size=1, max_size=3, unique=True)))) for lib in libs]
    return PeSpec(
        sections=sections,
        imports=imports,
        machine=draw(st.sampled_from([0x14C, MACHINE_AMD64])),
        overlay=draw(st.binary(max_size=200)),
        certificate=draw(st.one_of(st.none(), st.binary(min_size=8, max_size=64))),
        timestamp=draw(st.integers(0, 2**32 - 1)),
    )


@given(pe_specs())
@settings(max_examples=40, deadline=None)
def test_round_trip_property(spec):
    raw = build_pe(spec)
    img = parse(raw)
    assert serialize(img) == raw
    assert read_imports(img) == list(spec.imports)
    assert [s.label for s in img.sections[: len(spec.sections)]] == [s.name for s in spec.sections]
