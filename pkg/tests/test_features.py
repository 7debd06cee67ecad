import math
import re
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pe_evade.errors import NotPe
from pe_evade.features import (
    BLOCK_SLICES,
    FEATURE_DIM,
    byte_entropy_histogram,
    extract,
    fnv1a_64,
    split_blocks,
    string_features,
)
from pe_evade.mutations import ActionKind, mutate_bytes
from pe_evade.pe import ImportEntry, parse, serialize
from pe_evade.pe.builder import CODE, PeSpec, SectionSpec, build_pe
from pe_evade.pe.image import section_name


def entropy_histogram_oracle(data: bytes, window=2048, step=1024):
    """Plain-Python re-derivation: per-window Shannon entropy, 16x16 joint counts."""
    if len(data) < window:
        windows = [data]
    else:
        windows = [data[i : i + window] for i in range(0, len(data) - window + 1, step)]
    out = [[0] * 16 for _ in range(16)]
    for w in windows:
        counts = {}
        for b in w:
            counts[b] = counts.get(b, 0) + 1
        h = 0.0
        for c in counts.values():
            p = c / len(w)
            h -= p * math.log2(p)
        ebin = min(int(h * 2), 15)
        for b in w:
            out[b >> 4][ebin] += 1
    total = sum(map(sum, out))
    return [out[r][c] / total for r in range(16) for c in range(16)]


def test_fnv_reference_vectors():
    # published FNV-1a 64 test vectors
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_block_layout():
    assert FEATURE_DIM == 2350
    sizes = [sl.stop - sl.start for sl in BLOCK_SLICES.values()]
    assert sizes == [256, 256, 104, 10, 62, 255, 1279, 128]


def test_length_and_normalization(corpus_files):
    for raw in corpus_files:
        v = extract(raw)
        assert v.shape == (2350,)
        blocks = split_blocks(v)
        assert abs(blocks["byte_histogram"].sum() - 1) < 1e-9
        assert abs(blocks["byte_entropy_histogram"].sum() - 1) < 1e-9


def test_entropy_histogram_matches_oracle(corpus_files):
    for raw in corpus_files[:8] + [b"\x00" * 100, bytes(range(256)) * 9]:
        assert byte_entropy_histogram(raw).tolist() == pytest.approx(entropy_histogram_oracle(raw), abs=0, rel=1e-12)


def test_string_features_brute_force():
    data = b"\x00abcd\x01hello world\x02C:\\Windows http://x HKEY_LOCAL\x00MZxyz\x7f\x03"
    # brute-force scan for printable runs of length >= 5
    runs, cur = [], b""
    for b in data:
        if 0x20 <= b <= 0x7F:
            cur += bytes([b])
        else:
            if len(cur) >= 5:
                runs.append(cur)
            cur = b""
    if len(cur) >= 5:
        runs.append(cur)
    f = string_features(data)
    assert f[0] == len(runs)
    assert f[1] == pytest.approx(sum(map(len, runs)) / len(runs))
    assert f[99] == 1 and f[100] == 1 and f[101] == 1 and f[102] == 1
    assert f[103] == sum(map(len, runs))
    assert f[2:98].sum() == pytest.approx(1.0)


def test_determinism(corpus_files):
    for raw in corpus_files[:10]:
        assert np.array_equal(extract(raw), extract(raw))


def test_rejects_non_pe():
    with pytest.raises(NotPe):
        extract(b"not a pe file at all")


def test_single_import_sets_two_bins():
    raw = build_pe(PeSpec(sections=[SectionSpec(".text", b"\x90" * 32, CODE)], imports=[ImportEntry("kernel32.dll", ("Sleep",))]))
    imports = split_blocks(extract(raw))["imports"]
    lib_bin = fnv1a_64(b"kernel32.dll") % 255
    pair_bin = fnv1a_64(b"kernel32.dll:Sleep") % 1024
    assert set(np.flatnonzero(imports)) == {lib_bin, 255 + pair_bin}


def test_no_exports_zero_block():
    raw = build_pe(PeSpec(sections=[SectionSpec(".text", b"\x90" * 32, CODE)]))
    assert not split_blocks(extract(raw))["exports"].any()


def test_rename_touches_only_sections_and_byte_blocks(malicious_files):
    raw = malicious_files[0]
    img = parse(raw)
    renamed = serialize(img.with_section(0, replace(img.sections[0], name=section_name(".zzzz"))))
    a, b = split_blocks(extract(raw)), split_blocks(extract(renamed))
    changed = {k for k in a if not np.array_equal(a[k], b[k])}
    assert "sections" in changed
    assert changed <= {"sections", "byte_histogram", "byte_entropy_histogram", "strings"}
    # the byte-level difference is exactly the 8 name bytes
    diff = np.count_nonzero(np.frombuffer(raw, np.uint8) != np.frombuffer(renamed, np.uint8))
    assert 1 <= diff <= 8


def test_overlay_append_leaves_header_block(malicious_files):
    raw = malicious_files[1]
    out = mutate_bytes(raw, ActionKind.OVERLAY_APPEND, np.random.default_rng(0))
    a, b = split_blocks(extract(raw)), split_blocks(extract(out))
    assert not np.array_equal(a["byte_histogram"], b["byte_histogram"])
    assert np.array_equal(a["header"], b["header"])


@given(st.binary(min_size=1, max_size=5000))
@settings(max_examples=40, deadline=None)
def test_entropy_histogram_property(data):
    h = byte_entropy_histogram(data)
    assert h.sum() == pytest.approx(1.0, abs=1e-9)
    assert h.tolist() == pytest.approx(entropy_histogram_oracle(data), rel=1e-12, abs=0)
