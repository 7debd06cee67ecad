"""
Static feature vector (2350 values) for PE files.

Blocks, in order:

    byte_histogram           256   normalized byte value counts
    byte_entropy_histogram   256   16x16 joint (byte >> 4, window entropy) distribution
    strings                  104   printable-string statistics
    general                   10   file-level counts and flags
    header                    62   COFF / optional header fields
    sections                 255   section statistics and hashed per-name maps
    imports                 1279   hashed libraries (255) and library:function pairs (1024)
    exports                  128   hashed export names

Unbounded vocabularies go through the hashing trick with 64-bit FNV-1a,
``bin = fnv1a(key) % bins``, accumulating values without a sign bit.
"""

from __future__ import annotations

import math
import re
from functools import lru_cache
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from .errors import Malformed
from .pe.directories import read_exports, read_imports
from .pe.image import (
    DIR_BASERELOC,
    DIR_DEBUG,
    DIR_RESOURCE,
    DIR_SECURITY,
    DIR_TLS,
    SCN_CNT_CODE,
    SCN_MEM_EXECUTE,
    SCN_MEM_READ,
    SCN_MEM_WRITE,
    PeImage,
    parse,
)

FEATURE_BLOCKS: Tuple[Tuple[str, int], ...] = (
    ("byte_histogram", 256),
    ("byte_entropy_histogram", 256),
    ("strings", 104),
    ("general", 10),
    ("header", 62),
    ("sections", 255),
    ("imports", 1279),
    ("exports", 128),
)
FEATURE_DIM = sum(n for _, n in FEATURE_BLOCKS)


def _block_slices() -> Dict[str, slice]:
    out, start = {}, 0
    for name, n in FEATURE_BLOCKS:
        out[name] = slice(start, start + n)
        start += n
    return out


BLOCK_SLICES = _block_slices()

ENTROPY_WINDOW = 2048
ENTROPY_STEP = 1024
MIN_STRING = 5

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

MACHINE_NAMES = {0x14C: "I386", 0x8664: "AMD64", 0x1C0: "ARM", 0xAA64: "ARM64", 0x200: "IA64"}
SUBSYSTEM_NAMES = {1: "NATIVE", 2: "WINDOWS_GUI", 3: "WINDOWS_CUI", 9: "WINDOWS_CE_GUI", 10: "EFI_APPLICATION"}
COFF_FLAGS = {
    0x0001: "RELOCS_STRIPPED", 0x0002: "EXECUTABLE_IMAGE", 0x0004: "LINE_NUMS_STRIPPED",
    0x0008: "LOCAL_SYMS_STRIPPED", 0x0020: "LARGE_ADDRESS_AWARE", 0x0100: "CHARA_32BIT_MACHINE",
    0x0200: "DEBUG_STRIPPED", 0x1000: "SYSTEM", 0x2000: "DLL",
}
DLL_FLAGS = {
    0x0020: "HIGH_ENTROPY_VA", 0x0040: "DYNAMIC_BASE", 0x0080: "FORCE_INTEGRITY", 0x0100: "NX_COMPAT",
    0x0200: "NO_ISOLATION", 0x0400: "NO_SEH", 0x0800: "NO_BIND", 0x1000: "APPCONTAINER",
    0x2000: "WDM_DRIVER", 0x4000: "GUARD_CF", 0x8000: "TERMINAL_SERVER_AWARE",
}
SECTION_FLAGS = {
    0x00000020: "CNT_CODE", 0x00000040: "CNT_INITIALIZED_DATA", 0x00000080: "CNT_UNINITIALIZED_DATA",
    0x02000000: "MEM_DISCARDABLE", 0x04000000: "MEM_NOT_CACHED", 0x08000000: "MEM_NOT_PAGED",
    0x10000000: "MEM_SHARED", 0x20000000: "MEM_EXECUTE", 0x40000000: "MEM_READ", 0x80000000: "MEM_WRITE",
}

_STRING_RE = re.compile(rb"[\x20-\x7f]{%d,}" % MIN_STRING)
STRING_MARKERS = (b"C:\\", b"http", b"HKEY_", b"MZ")


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


@lru_cache(maxsize=65536)
def hash_bin(key: str, bins: int) -> int:
    return fnv1a_64(key.encode("utf-8")) % bins


def hashed(pairs: Iterable[Tuple[str, float]], bins: int) -> np.ndarray:
    out = np.zeros(bins)
    for key, value in pairs:
        out[hash_bin(key, bins)] += value
    return out


def flag_names(value: int, table: Dict[int, str]) -> List[str]:
    return [name for bit, name in table.items() if value & bit]


def shannon_entropy(data: bytes) -> float:
    if not data:
        return 0.0
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
    p = counts[counts > 0] / len(data)
    return float(-(p * np.log2(p)).sum())


def byte_histogram(data: bytes) -> np.ndarray:
    if not data:
        return np.zeros(256)
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
    return counts / len(data)


def byte_entropy_histogram(data: bytes, window: int = ENTROPY_WINDOW, step: int = ENTROPY_STEP) -> np.ndarray:
    """Joint histogram of (byte >> 4, quantized window entropy), flattened row-major."""
    a = np.frombuffer(data, dtype=np.uint8)
    if a.size == 0:
        return np.zeros(256)
    if a.size < window:
        blocks = a[None, :]
    else:
        blocks = np.lib.stride_tricks.sliding_window_view(a, window)[::step]
    n_win, width = blocks.shape
    offsets = (np.arange(n_win, dtype=np.int64) * 256)[:, None]
    counts = np.bincount((blocks + offsets).ravel(), minlength=256 * n_win).reshape(n_win, 256)
    p = counts / width
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(counts > 0, -p * np.log2(np.where(counts > 0, p, 1.0)), 0.0)
    entropy = terms.sum(axis=1)
    ebin = np.minimum((entropy * 2).astype(np.int64), 15)
    rows = counts.reshape(n_win, 16, 16).sum(axis=2)
    out = np.zeros((16, 16))
    np.add.at(out.T, ebin, rows)
    return (out / out.sum()).ravel()


def string_features(data: bytes) -> np.ndarray:
    """count, mean length, 96-bin char distribution, its entropy, 4 marker counts, total bytes."""
    out = np.zeros(104)
    strings = _STRING_RE.findall(data)
    if not strings:
        return out
    joined = b"".join(strings)
    total = len(joined)
    hist = np.bincount(np.frombuffer(joined, dtype=np.uint8), minlength=128)[0x20:0x80] / total
    nz = hist[hist > 0]
    out[0] = len(strings)
    out[1] = total / len(strings)
    out[2:98] = hist
    out[98] = float(-(nz * np.log2(nz)).sum())
    for i, marker in enumerate(STRING_MARKERS):
        out[99 + i] = sum(s.count(marker) for s in strings)
    out[103] = total
    return out


def _safe_imports(img: PeImage):
    try:
        return read_imports(img)
    except Malformed:
        return []


def _safe_exports(img: PeImage):
    try:
        return read_exports(img)
    except Malformed:
        return []


def general_features(img: PeImage, raw: bytes, imports, exports) -> np.ndarray:
    opt = img.optional
    return np.array(
        [
            len(raw),
            opt.size_of_image,
            opt.directory(DIR_DEBUG)[1] > 0,
            opt.directory(DIR_SECURITY)[1] > 0,
            opt.directory(DIR_BASERELOC)[1] > 0,
            opt.directory(DIR_RESOURCE)[1] > 0,
            opt.directory(DIR_TLS)[1] > 0,
            sum(len(e.functions) for e in imports),
            len(exports),
            img.coff.symbol_count,
        ],
        dtype=float,
    )


def header_features(img: PeImage) -> np.ndarray:
    coff, opt = img.coff, img.optional
    machine = MACHINE_NAMES.get(coff.machine, f"{coff.machine:#x}")
    subsystem = SUBSYSTEM_NAMES.get(opt.subsystem, str(opt.subsystem))
    return np.concatenate(
        [
            [coff.timestamp],
            hashed([(machine, 1.0)], 10),
            hashed(((n, 1.0) for n in flag_names(coff.characteristics, COFF_FLAGS)), 10),
            hashed([(subsystem, 1.0)], 10),
            hashed(((n, 1.0) for n in flag_names(opt.dll_characteristics, DLL_FLAGS)), 10),
            hashed([("PE32+" if opt.is_pe32_plus else "PE32", 1.0)], 10),
            [
                opt.major_linker, opt.minor_linker, opt.major_os, opt.minor_os,
                opt.major_image, opt.minor_image, opt.major_subsystem, opt.minor_subsystem,
                opt.size_of_code, opt.size_of_headers, opt.heap_commit,
            ],
        ]
    )


def section_features(img: PeImage) -> np.ndarray:
    secs = img.sections
    entry_idx = img.section_for_rva(img.optional.entry_point)
    rwx = SCN_MEM_READ | SCN_MEM_WRITE | SCN_MEM_EXECUTE
    scalars = [
        len(secs),
        sum(1 for s in secs if s.raw_size == 0),
        sum(1 for s in secs if s.characteristics & rwx == rwx),
        -1 if entry_idx is None else entry_idx,
        sum(1 for s in secs if s.characteristics & (SCN_MEM_EXECUTE | SCN_CNT_CODE)),
    ]
    entry_pairs: List[Tuple[str, float]] = []
    entry_flags: List[Tuple[str, float]] = []
    if entry_idx is not None:
        entry = secs[entry_idx]
        entry_pairs = [(entry.label, 1.0)]
        entry_flags = [(n, 1.0) for n in flag_names(entry.characteristics, SECTION_FLAGS)]
    return np.concatenate(
        [
            scalars,
            hashed(((s.label, s.raw_size) for s in secs), 50),
            hashed(((s.label, shannon_entropy(s.data)) for s in secs), 50),
            hashed(((s.label, s.virtual_size) for s in secs), 50),
            hashed(entry_pairs, 50),
            hashed(entry_flags, 50),
        ]
    )


def import_features(imports) -> np.ndarray:
    libs = hashed(((e.library.lower(), 1.0) for e in imports), 255)
    pairs = []
    for e in imports:
        lib = e.library.lower()
        for fn in e.functions:
            name = f"ordinal{fn}" if isinstance(fn, int) else fn
            pairs.append((f"{lib}:{name}", 1.0))
    return np.concatenate([libs, hashed(pairs, 1024)])


def export_features(exports) -> np.ndarray:
    return hashed(((name, 1.0) for name in exports), 128)


def structured_features(img: PeImage, raw: bytes) -> np.ndarray:
    """general ++ header ++ sections ++ imports ++ exports (1734 values)."""
    imports = _safe_imports(img)
    exports = _safe_exports(img)
    return np.concatenate(
        [
            general_features(img, raw, imports, exports),
            header_features(img),
            section_features(img),
            import_features(imports),
            export_features(exports),
        ]
    )


def extract(data: bytes, img: Optional[PeImage] = None) -> np.ndarray:
    """Feature vector of a PE byte stream. Raises NotPe/Malformed if it does not parse."""
    data = bytes(data)
    if img is None:
        img = parse(data)
    vec = np.concatenate(
        [
            byte_histogram(data),
            byte_entropy_histogram(data),
            string_features(data),
            structured_features(img, data),
        ]
    )
    assert vec.shape == (FEATURE_DIM,)
    return vec


def split_blocks(vec: np.ndarray) -> Dict[str, np.ndarray]:
    return {name: np.asarray(vec)[sl] for name, sl in BLOCK_SLICES.items()}


def block_of(index: int) -> str:
    for name, sl in BLOCK_SLICES.items():
        if sl.start <= index < sl.stop:
            return name
    raise IndexError(index)
