import os
import stat
import sys
import textwrap

import numpy as np
import pytest

from pe_evade.errors import ActionUnavailable
from pe_evade.mutations import (
    BENIGN_IMPORTS,
    BENIGN_SECTION_NAMES,
    INTERNAL_ACTIONS,
    ActionKind,
    EngineConfig,
    action_space,
    apply_action,
    is_generated_name,
    mutate_bytes,
    validity_audit,
)
from pe_evade.pe import compute_pe_checksum, parse, read_imports, serialize, stored_checksum
from pe_evade.pe.builder import CODE, PeSpec, SectionSpec, build_pe
from pe_evade.pe.image import DIR_DEBUG, DIR_SECURITY


def rng(seed=0):
    return np.random.default_rng(seed)


@pytest.fixture(scope="module")
def rich_pe():
    return build_pe(
        PeSpec(
            sections=[SectionSpec(".text", b"\x90" * 300, CODE), SectionSpec(".data", b"d" * 100)],
            imports=[],
            debug_path="C:\\b\\x.pdb",
            certificate=b"\x30\x82" + b"s" * 60,
            overlay=b"OVL",
        )
    )


def test_action_space_sizes():
    assert len(action_space()) == 9
    assert len(action_space(EngineConfig(packer_path="/bin/true"))) == 11
    assert [a.value for a in action_space()][:2] == ["imports_append", "section_rename"]


@pytest.mark.parametrize("action", INTERNAL_ACTIONS, ids=lambda a: a.value)
def test_every_action_passes_audit(action, corpus_files):
    for i, raw in enumerate(corpus_files[:12]):
        out = mutate_bytes(raw, action, rng(i))
        report = validity_audit(raw, out)
        assert report.ok, (action, report.error)
        if action is not ActionKind.BREAK_CHECKSUM:
            assert stored_checksum(out) == compute_pe_checksum(out)


@pytest.mark.parametrize("action", INTERNAL_ACTIONS, ids=lambda a: a.value)
def test_actions_are_deterministic(action, rich_pe):
    assert mutate_bytes(rich_pe, action, rng(5)) == mutate_bytes(rich_pe, action, rng(5))


def test_rename_changes_one_name(rich_pe):
    before = parse(rich_pe)
    after = parse(mutate_bytes(rich_pe, ActionKind.SECTION_RENAME, rng(1)))
    changed = [(a.label, b.label) for a, b in zip(before.sections, after.sections) if a.name != b.name]
    assert len(changed) == 1
    assert changed[0][1] in BENIGN_SECTION_NAMES and changed[0][1] != changed[0][0]
    for a, b in zip(before.sections, after.sections):
        assert a.data == b.data


def test_section_add(rich_pe):
    before = parse(rich_pe)
    out = mutate_bytes(rich_pe, ActionKind.SECTION_ADD, rng(2))
    after = parse(out)
    assert len(after.sections) == len(before.sections) + 1
    new = after.sections[-1]
    assert is_generated_name(new.label)
    assert 32 <= new.virtual_size <= 4096
    assert any(f.startswith("generated_section_name:") for f in validity_audit(rich_pe, out).fingerprints)


def test_imports_append_keeps_old_entries(corpus_files):
    raw = corpus_files[0]
    old = read_imports(parse(raw))
    new = read_imports(parse(mutate_bytes(raw, ActionKind.IMPORTS_APPEND, rng(3))))
    old_pairs = {(e.library.lower(), f) for e in old for f in e.functions}
    new_pairs = {(e.library.lower(), f) for e in new for f in e.functions}
    added = new_pairs - old_pairs
    assert old_pairs <= new_pairs and len(added) == 1
    assert added.pop() in set(BENIGN_IMPORTS)


def test_section_append_grows_data(rich_pe):
    before = parse(rich_pe)
    after = parse(mutate_bytes(rich_pe, ActionKind.SECTION_APPEND, rng(4)))
    assert [s.label for s in before.sections] == [s.label for s in after.sections]
    assert any(a.data != b.data for a, b in zip(before.sections, after.sections))
    assert before.optional.entry_point == after.optional.entry_point


def test_new_entry_point_jumps_to_old(rich_pe):
    out = mutate_bytes(rich_pe, ActionKind.NEW_ENTRY_POINT, rng(5))
    report = validity_audit(rich_pe, out)
    assert report.jump_target == parse(rich_pe).optional.entry_point
    assert report.jump_target_resolves
    assert "entry_point_jump_stub" in report.fingerprints


def test_remove_signer(rich_pe):
    out = parse(mutate_bytes(rich_pe, ActionKind.REMOVE_SIGNER, rng()))
    assert out.optional.directory(DIR_SECURITY) == (0, 0)
    assert out.certificate is None
    # the 8-byte alignment padding before the certificate stays behind
    assert out.overlay.rstrip(b"\0") == b"OVL"
    assert b"ssss" not in serialize(out)


def test_remove_signer_identity_when_unsigned():
    raw = build_pe(PeSpec(sections=[SectionSpec(".text", b"\x90" * 10, CODE)]))
    assert mutate_bytes(raw, ActionKind.REMOVE_SIGNER, rng()) == raw


def test_remove_debug(rich_pe):
    out = parse(mutate_bytes(rich_pe, ActionKind.REMOVE_DEBUG, rng()))
    assert out.optional.directory(DIR_DEBUG) == (0, 0)


def test_break_checksum_only_touches_checksum(rich_pe):
    out = mutate_bytes(rich_pe, ActionKind.BREAK_CHECKSUM, rng(6))
    assert stored_checksum(out) != compute_pe_checksum(out)
    diff = [i for i, (a, b) in enumerate(zip(rich_pe, out)) if a != b]
    off = parse(rich_pe).e_lfanew + 24 + 64
    assert diff and all(off <= i < off + 4 for i in diff)
    assert "checksum_mismatch" in validity_audit(rich_pe, out).fingerprints


def test_overlay_append(rich_pe):
    out = parse(mutate_bytes(rich_pe, ActionKind.OVERLAY_APPEND, rng(7)))
    before = parse(rich_pe)
    assert out.overlay.startswith(before.overlay)
    assert 32 <= len(out.overlay) - len(before.overlay) <= 4096


def test_chains_stay_valid(corpus_files):
    r = rng(9)
    for raw in corpus_files[:10]:
        cur = raw
        for _ in range(10):
            action = INTERNAL_ACTIONS[int(r.integers(len(INTERNAL_ACTIONS)))]
            cur = mutate_bytes(cur, action, r)
        assert validity_audit(raw, cur).ok
        assert serialize(parse(cur)) == cur


# -- packer plumbing ---------------------------------------------------------------

FAKE_PACKER = textwrap.dedent(
    """\
    #!{python}
    # renames the first section to UPX0 (pack) or back to .text (-d)
    import struct, sys
    args = sys.argv[1:]
    path = args[-1]
    data = bytearray(open(path, "rb").read())
    e = struct.unpack_from("<I", data, 60)[0]
    opt = struct.unpack_from("<H", data, e + 20)[0]
    table = e + 24 + opt
    name = b".text\\0\\0\\0" if args[0] == "-d" else b"UPX0\\0\\0\\0\\0"
    data[table:table + 8] = name
    open(path, "wb").write(bytes(data))
    """
)


@pytest.fixture()
def fake_packer(tmp_path):
    path = tmp_path / "fakeupx"
    path.write_text(FAKE_PACKER.format(python=sys.executable))
    path.chmod(path.stat().st_mode | stat.S_IEXEC)
    return str(path)


def test_pack_and_unpack_through_subprocess(fake_packer, rich_pe):
    config = EngineConfig(packer_path=fake_packer)
    packed = apply_action(parse(rich_pe), ActionKind.UPX_PACK, rng(), config)
    assert packed.sections[0].label == "UPX0"
    assert stored_checksum(serialize(packed)) == compute_pe_checksum(serialize(packed))
    unpacked = apply_action(packed, ActionKind.UPX_UNPACK, rng(), config)
    assert unpacked.sections[0].label == ".text"


def test_unpack_identity_when_not_packed(fake_packer, rich_pe):
    img = parse(rich_pe)
    assert apply_action(img, ActionKind.UPX_UNPACK, rng(), EngineConfig(packer_path=fake_packer)) is img


def test_packer_failures(tmp_path, rich_pe):
    failing = tmp_path / "fail"
    failing.write_text("#!/bin/sh\nexit 3\n")
    failing.chmod(0o755)
    with pytest.raises(ActionUnavailable):
        apply_action(parse(rich_pe), ActionKind.UPX_PACK, rng(), EngineConfig(packer_path=str(failing)))
    with pytest.raises(ActionUnavailable):
        apply_action(parse(rich_pe), ActionKind.UPX_PACK, rng(), EngineConfig())
    with pytest.raises(ActionUnavailable):
        apply_action(parse(rich_pe), ActionKind.UPX_PACK, rng(), EngineConfig(packer_path=os.path.join(str(tmp_path), "missing")))
