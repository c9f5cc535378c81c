"""Code/data profiling of original images.

Static profiling walks the code recursively from exported functions and
harvested pointer-table entries.  Dynamic profiling replays workloads in an
unprotected recording process and keeps what was executed and what was read.
Profiles of one image can be merged.
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import isa
from .bitmaps import PermissionBitmaps
from .enforcer import SimProcess
from .program.image import BinaryImage

CONFIDENCE = ("conservative", "aggressive")


class DimensionMismatch(ValueError):
    pass


@dataclass
class WorkloadCrash:
    index: int
    entry: int
    reason: str


def _harvest_roots(img: BinaryImage) -> list[int]:
    roots = [img.entry_address(f) for f in img.entry_points]
    lo, hi = img.text_base, img.text_base + len(img.text)
    for t in img.pointer_tables:
        for k in range(len(t.entries)):
            (v,) = struct.unpack_from("<I", img.data, t.offset + 4 * k)
            if lo <= v < hi:
                roots.append(v)
    return roots


def profile_static(img: BinaryImage, confidence: str = "conservative") -> PermissionBitmaps:
    """Recursive-descent code discovery.

    Direct jumps, branches, calls and the return site after a call are
    followed; jump tables are followed through their explicit entry count and
    the table bytes are marked data.  Register-indirect calls and jumps stop the
    walk in conservative mode.  Aggressive mode additionally resolves
    ``MOVI base; LOAD target, [base+k]; CALLR target`` through the data section
    and linearly sweeps forward from known code until it meets a known byte or
    an undecodable one, which can produce false positives.
    """
    if confidence not in CONFIDENCE:
        raise ValueError(f"unknown confidence {confidence!r}")
    text = bytes(img.text)
    n = len(text)
    lo = img.text_base
    code = np.zeros(n, dtype=bool)
    data = np.zeros(n, dtype=bool)
    seen_insn = np.zeros(n, dtype=bool)
    work = deque(a - lo for a in _harvest_roots(img))
    aggressive = confidence == "aggressive"

    def in_text(off: int) -> bool:
        return 0 <= off < n

    def walk(start: int) -> None:
        consts: dict[int, int] = {}
        off = start
        while in_text(off) and not seen_insn[off]:
            ins = isa.try_decode(text, off)
            if ins is None or off + ins.length > n:
                return
            seen_insn[off] = True
            code[off:off + ins.length] = True
            nxt = off + ins.length
            m = ins.mnemonic
            tk = ins.terminator_kind
            if m in ("LOADPC", "LEAPC"):
                tgt = nxt + ins.imm
                if m == "LOADPC" and in_text(tgt):
                    data[tgt:min(n, tgt + 4)] = True
                consts[ins.regs[0]] = lo + tgt if m == "LEAPC" else None
            elif m in ("MOVI", "MOVIS"):
                consts[ins.regs[0]] = ins.imm & isa.MASK32
            elif m == "LOAD":
                base = consts.get(ins.regs[1])
                val = None
                if base is not None:
                    ea = (base + ins.imm) & isa.MASK32
                    if in_text(ea - lo):
                        data[ea - lo:min(n, ea - lo + 4)] = True
                    elif aggressive and img.data_base <= ea <= img.data_base + len(img.data) - 4:
                        (val,) = struct.unpack_from("<I", img.data, ea - img.data_base)
                consts[ins.regs[0]] = val
            else:
                for r in ins.def_set:
                    consts.pop(r, None)
            if tk == "none":
                off = nxt
                continue
            if tk == "jump":
                if m != "JMPR":
                    work.append(nxt + ins.imm)
                return
            if tk == "cond-branch":
                work.append(nxt + ins.imm)
                off = nxt
                continue
            if tk == "call-direct":
                work.append(nxt + ins.imm)
                off = nxt
                continue
            if tk == "call-indirect":
                tgt = consts.get(ins.regs[0]) if aggressive else None
                if tgt is not None:
                    work.append(tgt - lo)
                off = nxt
                continue
            if tk == "table-jump":
                tab = nxt + ins.imm
                cnt = ins.count
                if in_text(tab) and tab + 4 * cnt <= n:
                    data[tab:tab + 4 * cnt] = True
                    for k in range(cnt):
                        (v,) = struct.unpack_from("<I", text, tab + 4 * k)
                        work.append(v - lo)
                return
            return  # return

    while work:
        walk(work.popleft())
    if aggressive:
        _sweep(text, code, data, seen_insn)
    both = code & data
    code &= ~both
    data &= ~both
    return PermissionBitmaps(code, data)


def _sweep(text: bytes, code: np.ndarray, data: np.ndarray, seen: np.ndarray) -> None:
    n = len(text)
    known = code | data
    ends = np.nonzero(known[:-1] & ~known[1:])[0] + 1 if n > 1 else np.zeros(0, dtype=np.int64)
    for off in ends.tolist():
        while off < n and not (code[off] or data[off]):
            ins = isa.try_decode(text, off)
            if ins is None or off + ins.length > n or (code[off:off + ins.length] | data[off:off + ins.length]).any():
                break
            code[off:off + ins.length] = True
            seen[off] = True
            off += ins.length
            if ins.terminator_kind in ("jump", "return", "table-jump"):
                break


def profile_dynamic(img: BinaryImage, workload, fuel: int = 1_000_000,
                    crashes: list | None = None) -> PermissionBitmaps:
    """Record executed bytes as code and text bytes read as data.

    ``workload`` is a sequence of (entry address, args).  Each item runs in a
    fresh recording process.  A byte that was both executed and read keeps both
    bits, so enforcing the profile never breaks the recorded behaviour.
    Crashing items are appended to ``crashes`` and their bits kept.
    """
    n = len(img.text)
    code = np.zeros(n, dtype=bool)
    data = np.zeros(n, dtype=bool)
    for i, (entry, args) in enumerate(workload):
        p = SimProcess(img, None, "none", mode="record")
        snap = p.run(entry, args, fuel)
        code |= np.frombuffer(bytes(p.exec_mask), dtype=np.uint8).astype(bool)
        data |= np.frombuffer(bytes(p.read_mask), dtype=np.uint8).astype(bool)
        if snap.status != "exited" and crashes is not None:
            crashes.append(WorkloadCrash(i, entry, snap.reason or snap.status))
    return PermissionBitmaps(code, data)


def merge(a: PermissionBitmaps, b: PermissionBitmaps) -> PermissionBitmaps:
    """Byte-wise union where conflicting code/data verdicts become uncertain."""
    if len(a) != len(b):
        raise DimensionMismatch(f"bitmaps of {len(a)} and {len(b)} bytes")
    code = a.code | b.code
    data = a.data | b.data
    conflict = (a.code & ~a.data & b.data & ~b.code) | (b.code & ~b.data & a.data & ~a.code)
    return PermissionBitmaps(code & ~conflict, data & ~conflict)


# ------------------------------------------------------------- workloads

def default_workload(img: BinaryImage, items: int = 8, seed: int = 0,
                     include_pointer_targets: bool = True) -> list[tuple[int, tuple[int, ...]]]:
    """Test-input style workload: exported functions (and optionally pointer
    table targets) called with small random arguments."""
    rng = np.random.default_rng(seed)
    fids = list(img.entry_points)
    if include_pointer_targets:
        for t in img.pointer_tables:
            fids.extend(t.entries)
    fids = sorted(set(fids))
    if not fids:
        return []
    out = []
    for _ in range(items):
        f = img.functions[int(rng.choice(fids))]
        args = tuple(int(x) for x in rng.integers(-64, 64, f.param_count) & isa.MASK32)
        out.append((img.entry_address(f.id), args))
    return out


def fixture_suite(img: BinaryImage, seed: int = 0) -> dict[str, list]:
    """Named workloads of increasing breadth, used as a stand-in for benchmark test inputs."""
    return {
        "smoke": default_workload(img, 4, seed, include_pointer_targets=False),
        "test": default_workload(img, 32, seed + 1),
        "train": default_workload(img, 96, seed + 2),
    }


def executed_ratio(bitmaps: PermissionBitmaps, img: BinaryImage) -> float:
    """Fraction of true instruction bytes marked code."""
    truth = ~img.embedded_mask
    return float((bitmaps.code & truth).sum()) / max(1, int(truth.sum()))
