"""
Synthetic PE corpora.

Nothing here is malware: "malicious-like" files differ from "benign-like"
ones only in distribution (section names, import sets, marker strings,
section entropy, signing and debug info), enough for a classifier to
separate them and for mutations to move a sample across the boundary.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .pe.builder import CODE, DATA, RDATA, PeSpec, SectionSpec, build_pe
from .pe.directories import ImportEntry
from .pe.image import MACHINE_AMD64, MACHINE_I386

MANIFEST = "manifest.json"

BENIGN_LIKE_SECTIONS = (".text", ".rdata", ".data", ".pdata", ".tls", ".didat")
MALICIOUS_LIKE_SECTIONS = (".aspack", ".adata", ".petite", ".vmp0", ".enigma1", ".nsp0", ".packed", ".MPRESS1")

BENIGN_LIKE_IMPORTS: Dict[str, Tuple[str, ...]] = {
    "kernel32.dll": (
        "GetModuleHandleW", "GetProcAddress", "LoadLibraryW", "CreateFileW", "ReadFile", "WriteFile",
        "CloseHandle", "GetLastError", "HeapAlloc", "HeapFree", "GetProcessHeap", "ExitProcess",
        "GetCommandLineW", "GetStartupInfoW", "QueryPerformanceCounter", "GetTickCount",
        "MultiByteToWideChar", "WideCharToMultiByte", "InitializeCriticalSection", "Sleep",
    ),
    "user32.dll": (
        "MessageBoxW", "CreateWindowExW", "DefWindowProcW", "RegisterClassExW", "ShowWindow",
        "GetMessageW", "DispatchMessageW", "TranslateMessage", "LoadIconW", "LoadCursorW",
    ),
    "gdi32.dll": ("CreateFontW", "DeleteObject", "SelectObject", "TextOutW", "BitBlt"),
    "comctl32.dll": ("InitCommonControlsEx",),
    "shell32.dll": ("SHGetFolderPathW", "ShellExecuteW"),
    "msvcrt.dll": ("malloc", "free", "memcpy", "memset", "printf", "_initterm"),
}
MALICIOUS_LIKE_IMPORTS: Dict[str, Tuple[str, ...]] = {
    "kernel32.dll": (
        "VirtualAllocEx", "WriteProcessMemory", "CreateRemoteThread", "OpenProcess",
        "VirtualProtect", "CreateToolhelp32Snapshot", "Process32First", "Process32Next",
        "GetProcAddress", "LoadLibraryA", "WinExec", "IsDebuggerPresent",
    ),
    "advapi32.dll": (
        "RegSetValueExA", "RegCreateKeyExA", "OpenProcessToken", "AdjustTokenPrivileges",
        "CryptEncrypt", "CryptAcquireContextA", "CreateServiceA",
    ),
    "wininet.dll": ("InternetOpenA", "InternetOpenUrlA", "InternetReadFile", "HttpSendRequestA"),
    "urlmon.dll": ("URLDownloadToFileA",),
    "ws2_32.dll": ("WSAStartup", "socket", "connect", "send", "recv"),
}
BENIGN_MARKERS = (
    b"Copyright (C) Contoso Ltd. All rights reserved.",
    b"FileDescription",
    b"ProductVersion",
    b"Please select a file to open",
    b"Settings saved successfully",
    b"%s: invalid argument",
    b"Help and Support",
)
MALICIOUS_MARKERS = (
    b"http://update.example.invalid/payload.bin",
    b"HKEY_LOCAL_MACHINE\\Software\\Microsoft\\Windows\\CurrentVersion\\Run",
    b"C:\\Windows\\System32\\cmd.exe /c ",
    b"HKEY_CURRENT_USER\\Software\\Classes",
    b"Your files have been encrypted",
    b"http://198.51.100.7/gate.php",
    b"MZ\x90\x00 embedded",
)

# coarse x86-ish opcode frequencies: code has mid-range entropy, not uniform noise
_OPCODES = np.array(
    [0x8B, 0x89, 0xE8, 0xFF, 0x83, 0x85, 0x74, 0x75, 0x50, 0x51, 0x52, 0x53, 0x55, 0x56, 0x57,
     0x5D, 0x5E, 0x5F, 0xC3, 0x33, 0x31, 0x8D, 0x0F, 0x84, 0xEB, 0x6A, 0x68, 0xC7, 0x45, 0x4D,
     0x00, 0x01, 0x04, 0x08, 0x10, 0x24, 0x48, 0xCC, 0x90, 0x3B, 0x39, 0xB8, 0xC0, 0xC9, 0xF8],
    dtype=np.uint8,
)


@dataclass
class SyntheticCorpusSpec:
    n_benign: int = 1000
    n_malicious: int = 1000
    x64_fraction: float = 0.2
    # probability that a malicious-like file shows each trait
    p_packed_section: float = 0.7
    p_suspicious_imports: float = 0.75
    p_markers: float = 0.7
    p_signed_benign: float = 0.5
    p_signed_malicious: float = 0.05
    p_debug_benign: float = 0.75
    p_debug_malicious: float = 0.2
    min_code: int = 2048
    max_code: int = 16384


@dataclass
class CorpusEntry:
    id: str
    file: str
    label: int
    seed: int


def _code_bytes(rng: np.random.Generator, n: int) -> bytes:
    weights = np.linspace(3.0, 0.3, len(_OPCODES))
    return rng.choice(_OPCODES, size=n, p=weights / weights.sum()).tobytes()


def _pick(rng: np.random.Generator, pool: Sequence, k: int) -> List:
    k = min(k, len(pool))
    idx = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in sorted(idx)]


def _imports(rng: np.random.Generator, pools: Sequence[Dict[str, Tuple[str, ...]]], counts: Sequence[int]):
    merged: Dict[str, List[str]] = {}
    for pool, count in zip(pools, counts):
        libs = sorted(pool)
        for lib in _pick(rng, libs, max(1, int(rng.integers(1, len(libs) + 1)))):
            fns = _pick(rng, pool[lib], max(1, count // max(1, len(libs)) + int(rng.integers(0, 3))))
            merged.setdefault(lib, [])
            merged[lib].extend(f for f in fns if f not in merged[lib])
    return [ImportEntry(lib, tuple(fns)) for lib, fns in sorted(merged.items())]


def _string_blob(rng: np.random.Generator, markers: Sequence[bytes], n: int) -> bytes:
    chosen = [markers[i] for i in rng.integers(0, len(markers), size=n)]
    return b"\0".join(chosen) + b"\0"


def generate_sample(spec: SyntheticCorpusSpec, label: int, seed: int) -> bytes:
    """One synthetic PE; ``label`` 1 draws from the malicious-like distribution."""
    rng = np.random.default_rng(seed)
    malicious = label == 1
    machine = MACHINE_AMD64 if rng.random() < spec.x64_fraction else MACHINE_I386
    code = _code_bytes(rng, int(rng.integers(spec.min_code, spec.max_code)))
    sections = [SectionSpec(".text", code, CODE)]

    strings = _string_blob(rng, BENIGN_MARKERS, int(rng.integers(2, 8)))
    if malicious and rng.random() < spec.p_markers:
        strings += _string_blob(rng, MALICIOUS_MARKERS, int(rng.integers(2, 6)))
    sections.append(SectionSpec(".rdata", strings, RDATA))
    sections.append(
        SectionSpec(".data", rng.integers(0, 16, size=int(rng.integers(64, 1024)), dtype=np.uint8).tobytes(), DATA,
                    virtual_size=int(rng.integers(1024, 8192)))
    )
    if malicious and rng.random() < spec.p_packed_section:
        name = MALICIOUS_LIKE_SECTIONS[int(rng.integers(len(MALICIOUS_LIKE_SECTIONS)))]
        payload = rng.integers(0, 256, size=int(rng.integers(4096, 24576)), dtype=np.uint8).tobytes()
        sections.append(SectionSpec(name, payload, CODE | DATA))
    elif not malicious and rng.random() < 0.3:
        name = BENIGN_LIKE_SECTIONS[int(rng.integers(3, len(BENIGN_LIKE_SECTIONS)))]
        sections.append(SectionSpec(name, _code_bytes(rng, int(rng.integers(256, 2048))), RDATA))

    pools: List[Dict[str, Tuple[str, ...]]] = [BENIGN_LIKE_IMPORTS]
    counts = [int(rng.integers(4, 24))]
    if malicious and rng.random() < spec.p_suspicious_imports:
        pools.append(MALICIOUS_LIKE_IMPORTS)
        counts.append(int(rng.integers(4, 14)))
    imports = _imports(rng, pools, counts)

    signed = rng.random() < (spec.p_signed_malicious if malicious else spec.p_signed_benign)
    debug = rng.random() < (spec.p_debug_malicious if malicious else spec.p_debug_benign)
    exports = []
    if not malicious and rng.random() < 0.3:
        exports = [f"Api{k:03d}" for k in _pick(rng, list(range(200)), int(rng.integers(1, 12)))]
    overlay = b""
    if malicious and rng.random() < 0.3:
        overlay = rng.integers(0, 256, size=int(rng.integers(256, 4096)), dtype=np.uint8).tobytes()

    pe = PeSpec(
        sections=sections,
        machine=machine,
        entry_offset=int(rng.integers(0, 64)),
        imports=imports,
        exports=exports,
        debug_path=(f"D:\\build\\proj{int(rng.integers(100))}\\Release\\app.pdb" if debug else None),
        certificate=(rng.integers(0, 256, size=int(rng.integers(512, 2048)), dtype=np.uint8).tobytes() if signed else None),
        relocations=bool(rng.random() < (0.3 if malicious else 0.7)),
        resources=(b"\0" * int(rng.integers(16, 512)) if rng.random() < (0.4 if malicious else 0.85) else None),
        overlay=overlay,
        timestamp=int(rng.integers(1_300_000_000, 1_700_000_000)),
        subsystem=2 if rng.random() < 0.8 else 3,
        linker_version=(int(rng.choice([9, 10, 11, 12, 14])), int(rng.integers(0, 30))),
        os_version=(6, int(rng.integers(0, 2))) if not malicious else (int(rng.choice([4, 5, 6])), 0),
        dll_characteristics=0x8140 if (not malicious or rng.random() < 0.4) else 0x0000,
    )
    return build_pe(pe)


def rigged_sample(seed: int, blacklisted: str = ".evil", size: int = 4096) -> bytes:
    """Single-section file whose only section carries the blacklisted name."""
    rng = np.random.default_rng(seed)
    code = _code_bytes(rng, size)
    return build_pe(PeSpec(sections=[SectionSpec(blacklisted, code, CODE)], timestamp=int(rng.integers(1 << 30))))


def gen_corpus(spec: SyntheticCorpusSpec, seed: int, out_dir: str) -> List[CorpusEntry]:
    """Write files and ``manifest.json`` to ``out_dir``; same seed gives identical bytes."""
    os.makedirs(out_dir, exist_ok=True)
    labels = [0] * spec.n_benign + [1] * spec.n_malicious
    children = np.random.SeedSequence(seed).generate_state(len(labels), dtype=np.uint32)
    entries = []
    for i, (label, child) in enumerate(zip(labels, children)):
        sid = f"{'mal' if label else 'ben'}_{i:05d}"
        fname = sid + ".exe"
        with open(os.path.join(out_dir, fname), "wb") as f:
            f.write(generate_sample(spec, label, int(child)))
        entries.append(CorpusEntry(sid, fname, label, int(child)))
    write_manifest(out_dir, entries, seed=seed, spec=asdict(spec))
    return entries


def write_manifest(out_dir: str, entries: Sequence[CorpusEntry], **extra) -> None:
    with open(os.path.join(out_dir, MANIFEST), "w") as f:
        json.dump({**extra, "entries": [asdict(e) for e in entries]}, f, indent=1)


def write_rigged_corpus(out_dir: str, n: int, seed: int = 0) -> List[CorpusEntry]:
    """``n`` rigged malicious files: a single code section named ``.evil``."""
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for i in range(n):
        sid = f"rig_{i:05d}"
        with open(os.path.join(out_dir, sid + ".exe"), "wb") as f:
            f.write(rigged_sample(seed * 1_000_003 + i))
        entries.append(CorpusEntry(sid, sid + ".exe", 1, seed * 1_000_003 + i))
    write_manifest(out_dir, entries, seed=seed, rigged=True)
    return entries


def load_manifest(corpus_dir: str) -> List[CorpusEntry]:
    with open(os.path.join(corpus_dir, MANIFEST)) as f:
        doc = json.load(f)
    return [CorpusEntry(**e) for e in doc["entries"]]


def read_sample(corpus_dir: str, entry: CorpusEntry) -> bytes:
    with open(os.path.join(corpus_dir, entry.file), "rb") as f:
        return f.read()


def holdout_split(entries: Sequence[CorpusEntry], holdout_size: int, seed: int) -> Tuple[List[CorpusEntry], List[CorpusEntry]]:
    """(rest, holdout): ``holdout_size`` malicious entries withheld from model and agent training."""
    mal = [e for e in entries if e.label == 1]
    if holdout_size >= len(mal):
        raise ValueError(f"holdout of {holdout_size} needs more than {len(mal)} malicious samples")
    order = np.random.default_rng(seed).permutation(len(mal))
    held_ids = {mal[i].id for i in order[:holdout_size]}
    holdout = [e for e in entries if e.id in held_ids]
    rest = [e for e in entries if e.id not in held_ids]
    return rest, holdout
