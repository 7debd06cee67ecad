"""
Format-preserving PE rewrites: the action set of the evasion game.

Each action is a pure function ``(PeImage, rng) -> PeImage``. Stochastic
choices (names, lengths, entropy levels, packer levels) come from the numpy
``Generator`` passed in, so a fixed seed reproduces the output byte for byte.
Actions with nothing to do (no certificate to strip, no debug directory,
nothing packed) return the input image unchanged.
"""

from __future__ import annotations

import enum
import os
import re
import shutil
import struct
import subprocess
import tempfile
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ActionUnavailable, LayoutOverflow, Malformed, NotPe
from .pe.checksum import compute_pe_checksum, stored_checksum
from .pe.directories import ImportEntry, build_import_blob, import_descriptors, read_imports
from .pe.image import (
    DIR_DEBUG,
    DIR_IMPORT,
    DIR_SECURITY,
    MACHINE_AMD64,
    MACHINE_I386,
    SCN_CNT_CODE,
    SCN_CNT_INITIALIZED_DATA,
    SCN_MEM_EXECUTE,
    SCN_MEM_READ,
    SCN_MEM_WRITE,
    PeImage,
    Section,
    align_up,
    next_section_slot,
    parse,
    reserve_section_header,
    section_name,
    serialize,
)

PACKER_ENV_VAR = "PE_EVADE_PACKER"


class ActionKind(enum.Enum):
    IMPORTS_APPEND = "imports_append"
    SECTION_RENAME = "section_rename"
    SECTION_ADD = "section_add"
    SECTION_APPEND = "section_append"
    NEW_ENTRY_POINT = "create_new_entry"
    REMOVE_SIGNER = "remove_signature"
    REMOVE_DEBUG = "remove_debug"
    UPX_PACK = "upx_pack"
    UPX_UNPACK = "upx_unpack"
    BREAK_CHECKSUM = "break_optional_header_checksum"
    OVERLAY_APPEND = "overlay_append"

    def __str__(self) -> str:
        return self.value


ALL_ACTIONS: Tuple[ActionKind, ...] = tuple(ActionKind)
PACKER_ACTIONS = (ActionKind.UPX_PACK, ActionKind.UPX_UNPACK)
INTERNAL_ACTIONS: Tuple[ActionKind, ...] = tuple(k for k in ActionKind if k not in PACKER_ACTIONS)

BENIGN_SECTION_NAMES: Tuple[str, ...] = (
    ".text", ".rdata", ".data", ".rsrc", ".reloc", ".idata", ".edata", ".pdata",
    ".tls", ".bss", ".crt", ".didat", ".gfids", ".00cfg", ".CRT", ".xdata",
    ".sdata", ".srdata", ".debug", ".textbss", ".orpc", ".ndata", "CODE", "DATA",
    "BSS", ".itext", ".rodata", ".init", ".fini", ".code", ".shared", ".wixburn",
    ".retplne", ".voltbl", ".mrdata", "PAGE", "INIT", ".nep", ".rtc", ".sxdata",
    ".drectve", ".cormeta", ".msvcjmc", ".tlsdata", "_RDATA", ".data1", ".rdata1",
    ".imrsiv", ".fptable", ".rodata1",
)

BENIGN_IMPORTS: Tuple[Tuple[str, str], ...] = tuple(
    (lib, fn)
    for lib, fns in (
        ("kernel32.dll", (
            "GetTickCount", "GetCurrentProcessId", "GetCurrentThreadId", "QueryPerformanceCounter",
            "GetSystemTimeAsFileTime", "GetModuleHandleW", "GetVersionExW", "GetLastError",
            "SetLastError", "HeapAlloc", "HeapFree", "GetProcessHeap", "lstrlenW", "Sleep",
            "GetCommandLineW", "GetStartupInfoW", "IsDebuggerPresent", "GetACP", "MulDiv",
            "FlushFileBuffers",
        )),
        ("user32.dll", (
            "MessageBoxW", "GetDC", "ReleaseDC", "LoadIconW", "LoadCursorW", "GetSystemMetrics",
            "DefWindowProcW", "ShowWindow", "UpdateWindow", "GetClientRect", "DrawTextW",
            "SetWindowTextW", "IsWindowVisible", "CharUpperW", "wsprintfW",
        )),
        ("gdi32.dll", (
            "CreateFontW", "DeleteObject", "SelectObject", "GetStockObject", "SetTextColor",
            "SetBkMode", "CreateSolidBrush", "BitBlt", "GetDeviceCaps", "TextOutW",
        )),
        ("comctl32.dll", ("InitCommonControlsEx", "ImageList_Create", "ImageList_Destroy")),
        ("shell32.dll", ("SHGetFolderPathW", "ShellExecuteW", "DragAcceptFiles", "SHGetFileInfoW")),
        ("ole32.dll", ("CoInitialize", "CoUninitialize", "CoCreateInstance", "CoTaskMemFree")),
        ("oleaut32.dll", ("SysAllocString", "SysFreeString", "VariantInit", "VariantClear")),
        ("msvcrt.dll", ("malloc", "free", "memcpy", "memset", "strlen", "printf", "_initterm", "exit")),
        ("version.dll", ("GetFileVersionInfoW", "GetFileVersionInfoSizeW", "VerQueryValueW")),
        ("comdlg32.dll", ("GetOpenFileNameW", "GetSaveFileNameW", "ChooseColorW")),
    )
    for fn in fns
)

ENTROPY_CLASSES = ("low", "medium", "high")
MIN_APPEND = 32
MAX_APPEND = 4096
_GENERATED_NAME = re.compile(r"^\.[a-z]{5}$")


@dataclass(frozen=True)
class EngineConfig:
    """``packer_path`` enables the pack/unpack pair; args are templates over {level} and {file}."""

    packer_path: Optional[str] = None
    pack_args: Tuple[str, ...] = ("-{level}", "{file}")
    unpack_args: Tuple[str, ...] = ("-d", "{file}")
    timeout: float = 60.0

    @classmethod
    def from_env(cls, **overrides) -> "EngineConfig":
        path = os.environ.get(PACKER_ENV_VAR) or None
        return cls(packer_path=path, **overrides) if path else cls(**overrides)


def action_space(config: Optional[EngineConfig] = None) -> List[ActionKind]:
    """Active actions in fixed enum order; the packer pair needs a configured packer."""
    if config is not None and config.packer_path:
        return list(ALL_ACTIONS)
    return list(INTERNAL_ACTIONS)


# -- random draws ----------------------------------------------------------------


def draw_length(rng: np.random.Generator) -> int:
    """Log-uniform integer in [MIN_APPEND, MAX_APPEND]."""
    value = np.exp(rng.uniform(np.log(MIN_APPEND), np.log(MAX_APPEND)))
    return int(min(MAX_APPEND, max(MIN_APPEND, round(value))))


def draw_bytes(rng: np.random.Generator, length: int, entropy: Optional[str] = None) -> bytes:
    if entropy is None:
        entropy = ENTROPY_CLASSES[int(rng.integers(len(ENTROPY_CLASSES)))]
    if entropy == "low":
        return bytes([int(rng.integers(256))]) * length
    if entropy == "medium":
        return rng.integers(0x20, 0x7F, size=length, dtype=np.uint8).tobytes()
    return rng.integers(0, 256, size=length, dtype=np.uint8).tobytes()


def generated_section_name(rng: np.random.Generator) -> str:
    letters = rng.integers(ord("a"), ord("z") + 1, size=5)
    name = "." + "".join(chr(c) for c in letters)
    if name in BENIGN_SECTION_NAMES:
        return generated_section_name(rng)
    return name


def is_generated_name(name: str) -> bool:
    return bool(_GENERATED_NAME.match(name)) and name not in BENIGN_SECTION_NAMES


# -- helpers ---------------------------------------------------------------------


def _append_section(img: PeImage, name: str, payload: bytes, characteristics: int) -> PeImage:
    img = reserve_section_header(img)
    raw_offset, va = next_section_slot(img)
    fa = img.optional.file_alignment
    raw_size = align_up(len(payload), fa)
    # file bytes between the old data end and the aligned slot become a gap
    gaps = img.gaps
    if raw_offset > img.data_end:
        gaps = gaps + ((img.data_end, b"\0" * (raw_offset - img.data_end)),)
    sec = Section(
        name=section_name(name),
        virtual_size=len(payload),
        virtual_address=va,
        raw_size=raw_size,
        raw_offset=raw_offset,
        characteristics=characteristics,
        data=payload.ljust(raw_size, b"\0"),
    )
    return replace(img, sections=img.sections + (sec,), gaps=gaps)


def _last_raw_section(img: PeImage) -> Optional[int]:
    """Index of the section that is last both in the file and in memory, if it ends the data."""
    raw = [(s.raw_end, i) for i, s in enumerate(img.sections) if s.raw_size]
    if not raw:
        return None
    end, idx = max(raw)
    if end != img.data_end:
        return None
    top_va = max(s.virtual_address for s in img.sections)
    if img.sections[idx].virtual_address != top_va:
        return None
    return idx


# -- the actions -------------------------------------------------------------------


def imports_append(img: PeImage, rng: np.random.Generator) -> PeImage:
    if len(img.optional.data_directories) <= DIR_IMPORT:
        raise ActionUnavailable("no import data directory slot")
    try:
        keep = import_descriptors(img)
        present = {(e.library.lower(), f) for e in read_imports(img) for f in e.functions}
    except Malformed as exc:
        raise ActionUnavailable(f"existing import table unreadable: {exc}") from exc
    choices = [pair for pair in BENIGN_IMPORTS if pair not in present]
    if not choices:
        return img
    lib, fn = choices[int(rng.integers(len(choices)))]
    probe = reserve_section_header(img)
    _, va = next_section_slot(probe)
    blob, desc_size, _ = build_import_blob(va, [ImportEntry(lib, (fn,))], img.is_pe32_plus, keep)
    out = _append_section(img, ".idata", blob, SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ | SCN_MEM_WRITE)
    if out.sections[-1].virtual_address != va:
        raise LayoutOverflow("import section landed at an unexpected RVA")
    return replace(out, optional=out.optional.with_directory(DIR_IMPORT, va, desc_size))


def section_rename(img: PeImage, rng: np.random.Generator) -> PeImage:
    if not img.sections:
        return img
    idx = int(rng.integers(len(img.sections)))
    current = img.sections[idx].label
    pool = [n for n in BENIGN_SECTION_NAMES if n != current]
    new = pool[int(rng.integers(len(pool)))]
    return img.with_section(idx, replace(img.sections[idx], name=section_name(new)))


def section_add(img: PeImage, rng: np.random.Generator) -> PeImage:
    name = generated_section_name(rng)
    payload = draw_bytes(rng, draw_length(rng))
    return _append_section(img, name, payload, SCN_CNT_INITIALIZED_DATA | SCN_MEM_READ)


def section_append(img: PeImage, rng: np.random.Generator) -> PeImage:
    length = draw_length(rng)
    payload = draw_bytes(rng, length)
    candidates = [
        i for i, s in enumerate(img.sections) if s.virtual_size and s.raw_size > s.virtual_size
    ]
    last = _last_raw_section(img)
    if last is not None:
        s = img.sections[last]
        if s.virtual_size <= s.raw_size and last not in candidates:
            candidates.append(last)
    if not candidates:
        return img
    idx = candidates[int(rng.integers(len(candidates)))]
    s = img.sections[idx]
    if s.virtual_size and s.raw_size > s.virtual_size:
        n = min(length, s.raw_size - s.virtual_size)
        data = s.data[: s.virtual_size] + payload[:n] + s.data[s.virtual_size + n :]
        return img.with_section(idx, replace(s, data=data))
    raw_size = align_up(s.raw_size + length, img.optional.file_alignment)
    data = (s.data + payload).ljust(raw_size, b"\0")
    return img.with_section(idx, replace(s, data=data, raw_size=raw_size))


JMP_REL32 = 0xE9


def new_entry_point(img: PeImage, rng: np.random.Generator) -> PeImage:
    if img.coff.machine not in (MACHINE_I386, MACHINE_AMD64):
        return img
    name = generated_section_name(rng)
    probe = reserve_section_header(img)
    _, va = next_section_slot(probe)
    old = img.optional.entry_point
    rel = (old - (va + 5)) & 0xFFFFFFFF
    stub = bytes([JMP_REL32]) + struct.pack("<I", rel)
    out = _append_section(img, name, stub, SCN_CNT_CODE | SCN_MEM_EXECUTE | SCN_MEM_READ)
    return out.with_optional(entry_point=va)


def remove_signer(img: PeImage, rng: np.random.Generator) -> PeImage:
    if img.certificate_offset is None:
        return img
    off = img.certificate_offset
    size = img.optional.directory(DIR_SECURITY)[1]
    overlay = img.overlay[:off] + img.overlay[off + size :]
    out = replace(img, overlay=overlay, certificate_offset=None)
    return replace(out, optional=out.optional.with_directory(DIR_SECURITY, 0, 0))


def remove_debug(img: PeImage, rng: np.random.Generator) -> PeImage:
    if img.optional.directory(DIR_DEBUG) == (0, 0):
        return img
    return replace(img, optional=img.optional.with_directory(DIR_DEBUG, 0, 0))


def break_checksum(img: PeImage, rng: np.random.Generator) -> PeImage:
    correct = compute_pe_checksum(serialize(img))
    value = int(rng.integers(0, 1 << 32))
    if value == correct:
        value = (value + 1) & 0xFFFFFFFF
    return img.with_optional(checksum=value)


def overlay_append(img: PeImage, rng: np.random.Generator) -> PeImage:
    payload = draw_bytes(rng, draw_length(rng))
    return replace(img, overlay=img.overlay + payload)


def _run_packer(img: PeImage, args: Sequence[str], config: EngineConfig, level: int) -> PeImage:
    if not config.packer_path:
        raise ActionUnavailable("no packer configured")
    workdir = tempfile.mkdtemp(prefix="pe_evade_")
    try:
        path = os.path.join(workdir, "sample.exe")
        with open(path, "wb") as f:
            f.write(serialize(img))
        argv = [config.packer_path] + [a.format(level=level, file=path) for a in args]
        try:
            proc = subprocess.run(argv, capture_output=True, timeout=config.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ActionUnavailable(f"packer failed to run: {exc}") from exc
        if proc.returncode != 0:
            raise ActionUnavailable(f"packer exited with {proc.returncode}")
        with open(path, "rb") as f:
            result = f.read()
    finally:
        shutil.rmtree(workdir, ignore_errors=True)
    try:
        return parse(result)
    except (NotPe, Malformed) as exc:
        raise ActionUnavailable(f"packer output does not parse: {exc}") from exc


def is_packed(img: PeImage) -> bool:
    return any(s.label.upper().startswith("UPX") for s in img.sections)


def upx_pack(img: PeImage, rng: np.random.Generator, config: EngineConfig) -> PeImage:
    level = int(rng.integers(1, 10))
    return _run_packer(img, config.pack_args, config, level)


def upx_unpack(img: PeImage, rng: np.random.Generator, config: EngineConfig) -> PeImage:
    if not config.packer_path:
        raise ActionUnavailable("no packer configured")
    if not is_packed(img):
        return img
    return _run_packer(img, config.unpack_args, config, 0)


_ACTIONS = {
    ActionKind.IMPORTS_APPEND: imports_append,
    ActionKind.SECTION_RENAME: section_rename,
    ActionKind.SECTION_ADD: section_add,
    ActionKind.SECTION_APPEND: section_append,
    ActionKind.NEW_ENTRY_POINT: new_entry_point,
    ActionKind.REMOVE_SIGNER: remove_signer,
    ActionKind.REMOVE_DEBUG: remove_debug,
    ActionKind.BREAK_CHECKSUM: break_checksum,
    ActionKind.OVERLAY_APPEND: overlay_append,
}


def apply_action(
    img: PeImage,
    action: ActionKind,
    rng: np.random.Generator,
    config: Optional[EngineConfig] = None,
) -> PeImage:
    """Apply one mutation and return a new image; ``img`` is left untouched.

    Unless the action is BREAK_CHECKSUM, the checksum of the result is reset
    to the correct value. Identity outcomes return ``img`` itself.
    """
    action = ActionKind(action)
    config = config or EngineConfig()
    if action is ActionKind.UPX_PACK:
        out = upx_pack(img, rng, config)
    elif action is ActionKind.UPX_UNPACK:
        out = upx_unpack(img, rng, config)
    else:
        out = _ACTIONS[action](img, rng)
    if out is img or action is ActionKind.BREAK_CHECKSUM:
        return out
    return out.with_optional(checksum=compute_pe_checksum(serialize(out)))


def mutate_bytes(
    data: bytes,
    action: ActionKind,
    rng: np.random.Generator,
    config: Optional[EngineConfig] = None,
) -> bytes:
    return serialize(apply_action(parse(data), action, rng, config))


# -- static validity audit --------------------------------------------------------


@dataclass
class AuditReport:
    parses: bool
    entry_point_resolves: bool = False
    imports_resolve: bool = False
    checksum_valid: bool = False
    jump_target: Optional[int] = None
    jump_target_resolves: Optional[bool] = None
    fingerprints: List[str] = field(default_factory=list)
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.parses and self.entry_point_resolves and self.imports_resolve


def _entry_resolves(img: PeImage, rva: int) -> bool:
    idx = img.section_for_rva(rva)
    if idx is None:
        return False
    s = img.sections[idx]
    if not s.characteristics & (SCN_MEM_EXECUTE | SCN_CNT_CODE):
        return False
    return rva - s.virtual_address < s.raw_size


def _decode_jump(img: PeImage, rva: int) -> Optional[int]:
    idx = img.section_for_rva(rva)
    if idx is None:
        return None
    s = img.sections[idx]
    off = rva - s.virtual_address
    code = s.data[off : off + 5]
    if len(code) < 5 or code[0] != JMP_REL32:
        return None
    (rel,) = struct.unpack("<i", code[1:])
    return (rva + 5 + rel) & 0xFFFFFFFF


def validity_audit(original: bytes, mutated: bytes) -> AuditReport:
    """Static sanity checks on ``mutated`` plus the artifacts it carries relative to ``original``."""
    try:
        img = parse(mutated)
    except (NotPe, Malformed) as exc:
        return AuditReport(parses=False, error=str(exc))
    report = AuditReport(parses=True)
    ep = img.optional.entry_point
    report.entry_point_resolves = _entry_resolves(img, ep)
    try:
        read_imports(img)
        report.imports_resolve = True
    except Malformed as exc:
        report.error = str(exc)
    report.checksum_valid = stored_checksum(mutated) == compute_pe_checksum(mutated)

    try:
        base = parse(original)
    except (NotPe, Malformed):
        base = None
    if base is not None:
        old_names = {s.label for s in base.sections}
        for s in img.sections:
            if s.label not in old_names and is_generated_name(s.label):
                report.fingerprints.append(f"generated_section_name:{s.label}")
        if ep != base.optional.entry_point:
            target = _decode_jump(img, ep)
            if target is not None:
                report.jump_target = target
                report.jump_target_resolves = _entry_resolves(img, target)
                report.fingerprints.append("entry_point_jump_stub")
        base_valid = stored_checksum(original) == compute_pe_checksum(original)
        if base_valid and not report.checksum_valid:
            report.fingerprints.append("checksum_mismatch")
    return report
