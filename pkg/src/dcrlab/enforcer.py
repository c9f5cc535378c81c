"""Simulated process with split code/data views and per-byte fetch policies.

Byte policies follow the code/data bit pair of each text byte:

    =========  =================  ======================  =======================
    bits       policy             data fetch              instruction fetch
    =========  =================  ======================  =======================
    (1, 0)     execute-only       terminate               allow
    (0, 1)     read-only          allow (data view)       terminate
    (0, 0)     destructive read   allow, garble code      allow until garbled
    =========  =================  ======================  =======================

Process-wide policy modes decide how bitmaps are interpreted: ``bgdx`` uses
them as above, ``dcr-only`` treats every text byte as (0, 0), ``xom-only``
enforces the execute-only and read-only rows but leaves uncertain bytes
unprotected, and ``none`` disables enforcement.
"""

from __future__ import annotations

import collections
import json
from dataclasses import dataclass, field

import numpy as np

from . import isa
from .bitmaps import PermissionBitmaps
from .program.image import STACK_SIZE, STACK_TOP, BinaryImage

POLICIES = ("none", "dcr-only", "xom-only", "bgdx")
MODES = ("enforce", "record")

PLAIN, XOM, RO, DCR = 0, 1, 2, 3
POLICY_NAMES = {PLAIN: "plain", XOM: "xom", RO: "ro", DCR: "dcr"}

EXIT_SENTINEL = 0xFFFFFFF0
CHAIN_STACK = STACK_TOP - 0x2000
MASK32 = isa.MASK32


class Crash(Exception):
    def __init__(self, reason: str, address: int = -1):
        super().__init__(reason)
        self.reason = reason
        self.address = address


@dataclass
class FetchEvent:
    kind: str  # instruction | data
    address: int
    length: int
    verdict: str  # allow | redirect-to-data-view | garble-and-allow | terminate

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "address": self.address, "length": self.length,
                           "verdict": self.verdict}, separators=(",", ":"))


@dataclass
class ExitSnapshot:
    status: str  # exited | crashed | fuel-exhausted
    reason: str
    regs: list[int]
    syscalls: list[int]
    steps: int
    data: bytes

    @property
    def ok(self) -> bool:
        return self.status == "exited"


@dataclass
class ChainOutcome:
    success: bool
    status: str
    reason: str
    syscalls: list[int] = field(default_factory=list)
    steps: int = 0


def policy_classes(bitmaps: PermissionBitmaps | None, n: int, policy: str) -> np.ndarray:
    """Per-byte policy class (PLAIN/XOM/RO/DCR) for a process-wide policy mode."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    if policy == "none":
        return np.zeros(n, dtype=np.uint8)
    if policy == "dcr-only":
        return np.full(n, DCR, dtype=np.uint8)
    bm = bitmaps if bitmaps is not None else PermissionBitmaps.empty(n)
    if len(bm) != n:
        raise ValueError("bitmaps do not match the text section")
    cls = np.zeros(n, dtype=np.uint8)
    cls[bm.code & ~bm.data] = XOM
    cls[bm.data & ~bm.code] = RO
    if policy == "bgdx":
        cls[~bm.code & ~bm.data] = DCR
    return cls


class SimProcess:
    """A loaded image.  Not thread-safe; one process per worker."""

    def __init__(self, image: BinaryImage, bitmaps: PermissionBitmaps | None = None, policy: str = "bgdx",
                 mode: str = "enforce", trace: bool = False, count_fetches: bool = False):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.image = image
        self.policy = policy
        self.mode = mode
        self.text_base = image.text_base
        self.text_end = image.text_base + len(image.text)
        self.data_base = image.data_base
        n = len(image.text)
        self.cls = policy_classes(bitmaps, n, policy if mode == "enforce" else "none")
        self._cls_b = self.cls.tobytes()
        self.data_view = bytes(image.text)
        code = np.frombuffer(image.text, dtype=np.uint8).copy()
        code[self.cls == RO] = isa.GARBLE_BYTE
        self.code_view = bytearray(code.tobytes())
        self.data = bytearray(image.data)
        self.stack_base = STACK_TOP - STACK_SIZE
        self.stack = bytearray(STACK_SIZE)
        self.regs = [0] * isa.NUM_REGS
        self.regs[isa.SP] = STACK_TOP - 16
        self.read_mask = bytearray(n)
        self.exec_mask = bytearray(n)
        self.garbled_mask = bytearray(n)
        self.status = "running"
        self.reason = ""
        self.syscalls: list[int] = []
        self.events: list[FetchEvent] | None = [] if trace else None
        self._dcache: dict[int, isa.Instruction] = {}
        # instruction fetches per address, when requested
        self.fetch_counts: collections.Counter | None = collections.Counter() if count_fetches else None

    # ----------------------------------------------------------- sets
    @staticmethod
    def _addr_set(mask: bytearray, base: int) -> set[int]:
        return set((np.flatnonzero(np.frombuffer(mask, dtype=np.uint8)) + base).tolist())

    @property
    def read_set(self) -> set[int]:
        return self._addr_set(self.read_mask, self.text_base)

    @property
    def exec_set(self) -> set[int]:
        return self._addr_set(self.exec_mask, self.text_base)

    @property
    def garbled_set(self) -> set[int]:
        return self._addr_set(self.garbled_mask, self.text_base)

    @property
    def crashed(self) -> bool:
        return self.status == "crashed"

    def _crash(self, reason: str, addr: int = -1):
        self.status = "crashed"
        self.reason = reason
        raise Crash(reason, addr)

    def _event(self, kind, addr, length, verdict):
        if self.events is not None:
            self.events.append(FetchEvent(kind, addr, length, verdict))

    def trace_lines(self) -> list[str]:
        return [e.to_json() for e in self.events or []]

    # ---------------------------------------------------------- fetches
    def _data_fetch(self, addr: int, length: int) -> bytes:
        if self.status == "crashed":
            raise Crash(self.reason, addr)
        tb, te = self.text_base, self.text_end
        if tb <= addr and addr + length <= te:
            o = addr - tb
            if self.mode == "record":
                for k in range(o, o + length):
                    self.read_mask[k] = 1
                self._event("data", addr, length, "allow")
                return self.data_view[o:o + length]
            cls = self._cls_b[o:o + length]
            if XOM in cls:
                self._event("data", addr, length, "terminate")
                self._crash("xom-read", addr)
            garble = DCR in cls
            for k in range(length):
                self.read_mask[o + k] = 1
                if cls[k] == DCR:
                    self.code_view[o + k] = isa.GARBLE_BYTE
                    self.garbled_mask[o + k] = 1
                    self._dcache.pop(addr + k, None)
            if garble:
                self._event("data", addr, length, "garble-and-allow")
            elif RO in cls:
                self._event("data", addr, length, "redirect-to-data-view")
            else:
                self._event("data", addr, length, "allow")
            return self.data_view[o:o + length]
        if addr < te and addr + length > tb:
            self._crash("unmapped", addr)  # straddles the text boundary
        db = self.data_base
        if db <= addr and addr + length <= db + len(self.data):
            return bytes(self.data[addr - db:addr - db + length])
        sb = self.stack_base
        if sb <= addr and addr + length <= STACK_TOP:
            return bytes(self.stack[addr - sb:addr - sb + length])
        self._crash("unmapped", addr)
        raise Crash("unmapped", addr)

    def data_fetch(self, address: int, length: int) -> bytes | None:
        """Read through the policy; returns None if the process crashed."""
        try:
            return self._data_fetch(address, length)
        except Crash:
            return None

    def _read32(self, addr: int) -> int:
        db = self.data_base
        if db <= addr and addr + 4 <= db + len(self.data):
            o = addr - db
            d = self.data
            return d[o] | d[o + 1] << 8 | d[o + 2] << 16 | d[o + 3] << 24
        sb = self.stack_base
        if sb <= addr and addr + 4 <= STACK_TOP:
            o = addr - sb
            d = self.stack
            return d[o] | d[o + 1] << 8 | d[o + 2] << 16 | d[o + 3] << 24
        return int.from_bytes(self._data_fetch(addr, 4), "little")

    def _write32(self, addr: int, value: int) -> None:
        value &= MASK32
        sb = self.stack_base
        if sb <= addr and addr + 4 <= STACK_TOP:
            self.stack[addr - sb:addr - sb + 4] = value.to_bytes(4, "little")
            return
        db = self.data_base
        if db <= addr and addr + 4 <= db + len(self.data):
            self.data[addr - db:addr - db + 4] = value.to_bytes(4, "little")
            return
        if addr < self.text_end and addr + 4 > self.text_base:
            self._crash("write-protect", addr)
        self._crash("unmapped", addr)

    def _ifetch(self, pc: int) -> isa.Instruction:
        if self.status == "crashed":
            raise Crash(self.reason, pc)
        o = pc - self.text_base
        if not 0 <= o < len(self.code_view):
            self._crash("unmapped-execute", pc)
        enforce = self.mode == "enforce"
        if enforce:
            c = self._cls_b[o]
            if c == RO:
                self._event("instruction", pc, 1, "terminate")
                self._crash("ro-execute", pc)
            if self.garbled_mask[o]:
                self._event("instruction", pc, 1, "terminate")
                self._crash("garbled-execute", pc)
        ins = self._dcache.get(pc)
        if ins is None:
            ins = isa.try_decode(self.code_view, o)
            if ins is None:
                self._event("instruction", pc, 1, "terminate")
                self._crash("decode-failure", pc)
            self._dcache[pc] = ins
        ln = ins.length
        if enforce and ln > 1:
            for k in range(o + 1, o + ln):
                if self._cls_b[k] == RO:
                    self._crash("ro-execute", pc)
                if self.garbled_mask[k]:
                    self._crash("garbled-execute", pc)
        em = self.exec_mask
        for k in range(o, o + ln):
            em[k] = 1
        if self.events is not None:
            self._event("instruction", pc, ln, "allow")
        if self.fetch_counts is not None:
            self.fetch_counts[pc] += 1
        return ins

    def instruction_fetch(self, address: int) -> isa.Instruction | None:
        try:
            return self._ifetch(address)
        except Crash:
            return None

    # ------------------------------------------------------- execution
    def _push(self, v: int) -> None:
        self.regs[isa.SP] = (self.regs[isa.SP] - 4) & MASK32
        self._write32(self.regs[isa.SP], v)

    def _pop(self) -> int:
        v = self._read32(self.regs[isa.SP])
        self.regs[isa.SP] = (self.regs[isa.SP] + 4) & MASK32
        return v

    def _step(self, pc: int) -> int:
        ins = self._ifetch(pc)
        r = self.regs
        m = ins.mnemonic
        nxt = pc + ins.length
        rg = ins.regs
        if m in isa.RR_MNEMONICS:
            d, s = rg
            if m == "XCHG":
                r[d], r[s] = r[s], r[d]
            else:
                r[d] = isa.alu(m, r[d], r[s])
            return nxt
        if m in ("MOVI", "MOVIS"):
            r[rg[0]] = ins.imm & MASK32
            return nxt
        if m == "LOAD":
            r[rg[0]] = self._read32((r[rg[1]] + ins.imm) & MASK32)
            return nxt
        if m == "STORE":
            self._write32((r[rg[0]] + ins.imm) & MASK32, r[rg[1]])
            return nxt
        if m in isa.RI16_MNEMONICS or m in ("SHLI", "SHRI"):
            r[rg[0]] = isa.alu(m, r[rg[0]], ins.imm & MASK32)
            return nxt
        if m == "JMP" or m == "JMP8":
            return nxt + ins.imm
        if m in isa.COND_MNEMONICS:
            v = r[rg[0]]
            base = m.rstrip("8")
            if base == "JZ":
                t = v == 0
            elif base == "JNZ":
                t = v != 0
            elif base == "JLTZ":
                t = bool(v & 0x80000000)
            else:
                t = not v & 0x80000000
            return nxt + ins.imm if t else nxt
        if m == "CALL":
            self._push(nxt)
            return nxt + ins.imm
        if m == "RET":
            return self._pop()
        if m == "NOP":
            return nxt
        if m == "SYS":
            self.syscalls.append(r[rg[0]])
            return nxt
        if m == "CALLR":
            tgt = r[rg[0]]
            self._push(nxt)
            return tgt
        if m == "JMPR":
            return r[rg[0]]
        if m == "JTAB":
            table = nxt + ins.imm
            k = r[rg[0]] % ins.count
            return self._read32(table + 4 * k)
        if m == "NOT":
            r[rg[0]] = ~r[rg[0]] & MASK32
            return nxt
        if m == "NEG":
            r[rg[0]] = -r[rg[0]] & MASK32
            return nxt
        if m == "PUSH":
            self._push(r[rg[0]])
            return nxt
        if m == "PUSHI":
            self._push(ins.imm)
            return nxt
        if m == "POP":
            v = self._pop()
            r[rg[0]] = v
            return nxt
        if m == "LEA":
            r[rg[0]] = (r[rg[1]] + ins.imm) & MASK32
            return nxt
        if m == "LOADPC":
            r[rg[0]] = self._read32((nxt + ins.imm) & MASK32)
            return nxt
        if m == "LEAPC":
            r[rg[0]] = (nxt + ins.imm) & MASK32
            return nxt
        raise AssertionError(m)

    def _loop(self, pc: int, fuel: int) -> tuple[str, int]:
        steps = 0
        try:
            while steps < fuel:
                if pc == EXIT_SENTINEL:
                    return "exited", steps
                pc = self._step(pc)
                steps += 1
            if pc == EXIT_SENTINEL:
                return "exited", steps
            return "fuel-exhausted", steps
        except Crash:
            return "crashed", steps

    def run(self, entry: int, args=(), fuel: int = 1_000_000) -> ExitSnapshot:
        """Call ``entry`` and run to its return.

        ``args`` is a sequence placed in r0..r3 or a {register: value} mapping.
        """
        if self.status == "crashed":
            return ExitSnapshot("crashed", self.reason, list(self.regs), [], 0, bytes(self.data))
        if not isinstance(args, dict):
            if len(args) > 4:
                raise ValueError("at most four register arguments")
            args = dict(enumerate(args))
        for r, a in args.items():
            if not 0 <= r < isa.SP:
                raise ValueError(f"cannot pass an argument in r{r}")
            self.regs[r] = a & MASK32
        self.regs[isa.SP] = STACK_TOP - 16
        before = len(self.syscalls)
        try:
            self._push(EXIT_SENTINEL)
        except Crash:
            pass
        status, steps = self._loop(entry, fuel)
        if status != "crashed":
            self.status = "running"
        return ExitSnapshot(status, self.reason if status == "crashed" else "", list(self.regs),
                            self.syscalls[before:], steps, bytes(self.data))

    def invoke_chain(self, chain, expect=(), fuel: int = 100_000) -> ChainOutcome:
        """Hijack control flow with a prepared chain.

        ``chain`` items are ("gadget", addr), ("word", value) or
        ("call", addr, {reg: value}).  Consecutive gadget/word items form a
        return-oriented segment whose words are placed on an attacker
        controlled stack; a call item loads its register assignment and
        calls the function.  Success means the sequence ``expect`` appears
        contiguously among the system-call values observed during the chain.
        """
        if not chain:
            return ChainOutcome(False, self.status, "empty chain")
        if self.status == "crashed":
            return ChainOutcome(False, "crashed", self.reason)
        segments: list = []
        cur: list = []
        for item in chain:
            if item[0] == "call":
                if cur:
                    segments.append(("rop", cur))
                    cur = []
                segments.append(item)
            elif item[0] in ("gadget", "word"):
                cur.append(item[1] & MASK32)
            else:
                raise ValueError(f"bad chain item {item!r}")
        if cur:
            segments.append(("rop", cur))
        before = len(self.syscalls)
        steps = 0
        status = "exited"
        for seg in segments:
            if seg[0] == "rop":
                words = seg[1] + [EXIT_SENTINEL]
                sp = CHAIN_STACK
                for k, w in enumerate(words):
                    self._write32(sp + 4 * k, w)
                self.regs[isa.SP] = (sp + 4) & MASK32
                status, n = self._loop(words[0], fuel - steps)
            else:
                _, addr, assign = seg
                for reg, val in assign.items():
                    self.regs[reg] = val & MASK32
                self.regs[isa.SP] = STACK_TOP - 16
                try:
                    self._push(EXIT_SENTINEL)
                except Crash:
                    pass
                status, n = self._loop(addr, fuel - steps)
            steps += n
            if status != "exited":
                break
        got = self.syscalls[before:]
        exp = list(expect)
        hit = bool(exp) and any(got[i:i + len(exp)] == exp for i in range(len(got) - len(exp) + 1))
        return ChainOutcome(hit and status == "exited", status, self.reason if status == "crashed" else "",
                            got, steps)


def load(rand, policy: str = "bgdx", mode: str = "enforce", bitmaps: PermissionBitmaps | None = None,
         trace: bool = False) -> SimProcess:
    """Load a randomized image (anything with ``image`` and ``bitmap``) or a plain image."""
    if hasattr(rand, "image"):
        img, bm = rand.image, rand.bitmap if bitmaps is None else bitmaps
    else:
        img, bm = rand, bitmaps
    return SimProcess(img, bm, policy, mode, trace)


def observable_state(snap: ExitSnapshot, image: BinaryImage, result_reg: int | None = 0) -> tuple:
    """What a caller can observe after a run: status, the result register,
    syscalls and data outside the pointer tables (those hold code addresses
    that move).  Pass ``result_reg=None`` for functions without a result."""
    data = bytearray(snap.data)
    for t in image.pointer_tables:
        data[t.offset:t.offset + 4 * len(t.entries)] = bytes(4 * len(t.entries))
    rv = None if result_reg is None else snap.regs[result_reg]
    return snap.status, rv, tuple(snap.syscalls), bytes(data)
