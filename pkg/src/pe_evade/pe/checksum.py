"""PE image checksum (the value stored in OptionalHeader.CheckSum)."""

from __future__ import annotations

import struct

import numpy as np

from ..errors import NotPe
from .image import CHECKSUM_OFFSET_FROM_NT, MZ_MAGIC, PE_SIGNATURE


def checksum_offset(data: bytes) -> int:
    if len(data) < 64 or data[:2] != MZ_MAGIC:
        raise NotPe("missing MZ signature")
    (e_lfanew,) = struct.unpack_from("<I", data, 60)
    if data[e_lfanew : e_lfanew + 4] != PE_SIGNATURE:
        raise NotPe("missing PE signature")
    off = e_lfanew + CHECKSUM_OFFSET_FROM_NT
    if off + 4 > len(data):
        raise NotPe("optional header truncated before CheckSum")
    return off


def raw_checksum(data: bytes, skip_offset: int) -> int:
    """Fold ``data`` as little-endian 16-bit words, ignoring the 4 bytes at ``skip_offset``.

    Odd-length input is padded with one zero byte. The carry-folded 16-bit sum
    plus the byte length is returned.
    """
    n = len(data)
    buf = np.frombuffer(bytes(data) + b"\0" * (n & 1), dtype="<u2").astype(np.uint64)
    if 0 <= skip_offset <= n - 4:
        # skip_offset is 4-byte aligned in practice; handle odd offsets anyway
        if skip_offset % 2 == 0:
            buf[skip_offset // 2 : skip_offset // 2 + 2] = 0
        else:
            patched = bytearray(data)
            patched[skip_offset : skip_offset + 4] = b"\0\0\0\0"
            return raw_checksum(bytes(patched), -1)
    total = int(buf.sum())
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return (total + n) & 0xFFFFFFFF


def compute_pe_checksum(data: bytes) -> int:
    """Checksum the loader expects in OptionalHeader.CheckSum for ``data``."""
    return raw_checksum(data, checksum_offset(data))


def stored_checksum(data: bytes) -> int:
    return struct.unpack_from("<I", data, checksum_offset(data))[0]


def with_checksum(data: bytes, value: int) -> bytes:
    off = checksum_offset(data)
    return data[:off] + struct.pack("<I", value & 0xFFFFFFFF) + data[off + 4 :]


def fix_checksum(data: bytes) -> bytes:
    return with_checksum(data, compute_pe_checksum(data))
