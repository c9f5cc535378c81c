"""MIN32: a small variable-length instruction set.

Every instruction starts with one opcode byte.  Register operands live in a
dedicated register byte: field ``a`` in bits 3-5, field ``b`` in bits 0-2,
bits 6-7 must be zero.  Immediates and displacements are little-endian.
See docs/ISA.md for the full table (generated by :func:`isa_reference`).
"""

from __future__ import annotations

import functools
import random
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

NUM_REGS = 8
SP = 7
GARBLE_BYTE = 0xCC
MASK32 = 0xFFFFFFFF

FIELD_A = 0x38
FIELD_B = 0x07

# format -> (length, number of register fields)
FORMATS = {
    "N": (1, 0),
    "R": (2, 1),
    "RR": (2, 2),
    "RI8": (3, 1),
    "RI16": (4, 1),
    "RI32": (6, 1),
    "RRI16": (4, 2),
    "REL8": (2, 0),
    "REL32": (5, 0),
    "RREL8": (3, 1),
    "RREL32": (6, 1),
    "I32": (5, 0),
    "JTAB": (5, 1),
}

TERMINATOR_KINDS = ("jump", "cond-branch", "call-direct", "call-indirect", "return", "table-jump", "none")


class DecodeError(ValueError):
    """Raised when bytes do not form a valid MIN32 instruction."""


class EncodeError(ValueError):
    pass


class NoSubstitution(LookupError):
    """The instruction has no entry in the enabled substitution catalog."""


@dataclass(frozen=True)
class OpInfo:
    mnemonic: str
    opcode: int
    fmt: str
    swapped: bool = False  # register fields stored b,a instead of a,b
    terminator: str = "none"

    @property
    def length(self) -> int:
        return FORMATS[self.fmt][0]


_RR_OPS = [
    ("MOV", 0x89, 0x8B), ("ADD", 0x01, 0x03), ("SUB", 0x29, 0x2B), ("XOR", 0x31, 0x33),
    ("AND", 0x21, 0x23), ("OR", 0x09, 0x0B), ("MUL", 0xAF, 0xAD), ("SHL", 0xD3, 0xD1),
    ("SHR", 0xD5, 0xD7), ("SAR", 0xD9, 0xDB), ("ROL", 0xDD, 0xDF), ("SLT", 0x39, 0x3B),
    ("XCHG", 0x87, 0x85),
]

_TABLE: list[OpInfo] = [
    OpInfo("NOP", 0x90, "N"),
    OpInfo("RET", 0xC3, "N", terminator="return"),
]
for _m, _op, _opd in _RR_OPS:
    _TABLE.append(OpInfo(_m, _op, "RR"))
    _TABLE.append(OpInfo(_m, _opd, "RR", swapped=True))
_TABLE += [
    OpInfo("NOT", 0xF7, "R"),
    OpInfo("NEG", 0xF6, "R"),
    OpInfo("PUSH", 0x50, "R"),
    OpInfo("POP", 0x58, "R"),
    OpInfo("SYS", 0x05, "R"),
    OpInfo("CALLR", 0xFF, "R", terminator="call-indirect"),
    OpInfo("JMPR", 0xFE, "R", terminator="jump"),
    OpInfo("MOVI", 0xB8, "RI32"),
    OpInfo("MOVIS", 0xB9, "RI16"),
    OpInfo("ADDI", 0x81, "RI16"),
    OpInfo("SUBI", 0x83, "RI16"),
    OpInfo("XORI", 0x35, "RI16"),
    OpInfo("ANDI", 0x25, "RI16"),
    OpInfo("ORI", 0x0D, "RI16"),
    OpInfo("MULI", 0x69, "RI16"),
    OpInfo("SHLI", 0xC1, "RI8"),
    OpInfo("SHRI", 0xC0, "RI8"),
    OpInfo("LOAD", 0x8A, "RRI16"),
    OpInfo("STORE", 0x88, "RRI16"),
    OpInfo("LEA", 0x8D, "RRI16"),
    OpInfo("LOADPC", 0xA1, "RREL32"),
    OpInfo("LEAPC", 0xA3, "RREL32"),
    OpInfo("PUSHI", 0x68, "I32"),
    OpInfo("JMP8", 0xEB, "REL8", terminator="jump"),
    OpInfo("JMP", 0xE9, "REL32", terminator="jump"),
    OpInfo("JZ8", 0x74, "RREL8", terminator="cond-branch"),
    OpInfo("JNZ8", 0x75, "RREL8", terminator="cond-branch"),
    OpInfo("JLTZ8", 0x7C, "RREL8", terminator="cond-branch"),
    OpInfo("JGEZ8", 0x7D, "RREL8", terminator="cond-branch"),
    OpInfo("JZ", 0xE4, "RREL32", terminator="cond-branch"),
    OpInfo("JNZ", 0xE5, "RREL32", terminator="cond-branch"),
    OpInfo("JLTZ", 0xEC, "RREL32", terminator="cond-branch"),
    OpInfo("JGEZ", 0xED, "RREL32", terminator="cond-branch"),
    OpInfo("CALL", 0xE8, "REL32", terminator="call-direct"),
    OpInfo("JTAB", 0xEA, "JTAB", terminator="table-jump"),
]

OPINFO: dict[int, OpInfo] = {}
for _info in _TABLE:
    assert _info.opcode not in OPINFO, hex(_info.opcode)
    assert _info.opcode != GARBLE_BYTE
    OPINFO[_info.opcode] = _info

# canonical (non-swapped) opcode per mnemonic
OPCODE: dict[str, int] = {}
for _info in _TABLE:
    OPCODE.setdefault(_info.mnemonic, _info.opcode)
SWAPPED_OPCODE: dict[str, int] = {i.mnemonic: i.opcode for i in _TABLE if i.swapped}

BRANCH_LONG = {"JMP8": "JMP", "JZ8": "JZ", "JNZ8": "JNZ", "JLTZ8": "JLTZ", "JGEZ8": "JGEZ"}
BRANCH_SHORT = {v: k for k, v in BRANCH_LONG.items()}
COND_MNEMONICS = ("JZ", "JNZ", "JLTZ", "JGEZ", "JZ8", "JNZ8", "JLTZ8", "JGEZ8")
RR_MNEMONICS = tuple(m for m, _, _ in _RR_OPS)
RI16_MNEMONICS = ("MOVIS", "ADDI", "SUBI", "XORI", "ANDI", "ORI", "MULI")

# mnemonics whose first register operand is written
_WRITES_FIRST = set(RR_MNEMONICS) | set(RI16_MNEMONICS) | {
    "NOT", "NEG", "POP", "MOVI", "LOAD", "LEA", "LOADPC", "LEAPC", "SHLI", "SHRI"}
_READS_FIRST = {"ADD", "SUB", "XOR", "AND", "OR", "MUL", "SHL", "SHR", "SAR", "ROL", "SLT", "XCHG",
                "NOT", "NEG", "PUSH", "SYS", "CALLR", "JMPR", "ADDI", "SUBI", "XORI", "ANDI", "ORI",
                "MULI", "SHLI", "SHRI", "STORE", "JZ", "JNZ", "JLTZ", "JGEZ", "JZ8", "JNZ8", "JLTZ8",
                "JGEZ8", "JTAB"}


@dataclass(frozen=True)
class Reg:
    index: int


@dataclass(frozen=True)
class Imm:
    value: int
    width: int


@dataclass(frozen=True)
class Rel:
    disp: int
    width: int


@dataclass(frozen=True)
class Instruction:
    """One decoded MIN32 instruction.

    ``regs`` lists register operands in assembly order; ``imm`` holds the
    immediate or displacement (signed where the format is signed); ``count``
    is only used by JTAB.  ``opcode`` pins the exact encoding so that
    encode(decode(b)) == b even for the two RR encodings.
    """

    opcode: int
    regs: tuple[int, ...] = ()
    imm: int = 0
    count: int = 0

    @property
    def info(self) -> OpInfo:
        return OPINFO[self.opcode]

    @property
    def mnemonic(self) -> str:
        return OPINFO[self.opcode].mnemonic

    @property
    def fmt(self) -> str:
        return OPINFO[self.opcode].fmt

    @property
    def length(self) -> int:
        return FORMATS[OPINFO[self.opcode].fmt][0]

    @property
    def terminator_kind(self) -> str:
        return OPINFO[self.opcode].terminator

    @property
    def is_terminator(self) -> bool:
        return OPINFO[self.opcode].terminator != "none"

    @property
    def operands(self) -> list:
        fmt = self.fmt
        ops: list = [Reg(r) for r in self.regs]
        if fmt == "RI8":
            ops.append(Imm(self.imm, 1))
        elif fmt in ("RI16", "RRI16"):
            ops.append(Imm(self.imm, 2))
        elif fmt in ("RI32", "I32"):
            ops.append(Imm(self.imm, 4))
        elif fmt in ("REL8", "RREL8"):
            ops.append(Rel(self.imm, 1))
        elif fmt in ("REL32", "RREL32"):
            ops.append(Rel(self.imm, 4))
        elif fmt == "JTAB":
            ops += [Imm(self.count, 1), Rel(self.imm, 2)]
        return ops

    @property
    def def_set(self) -> frozenset[int]:
        m = self.mnemonic
        out = set()
        if self.regs and m in _WRITES_FIRST:
            out.add(self.regs[0])
        if m == "XCHG":
            out.add(self.regs[1])
        if m in ("PUSH", "POP", "PUSHI", "CALL", "CALLR", "RET"):
            out.add(SP)
        if m in ("CALL", "CALLR"):
            # caller-saved convention: a call may clobber every general register
            out.update(range(SP))
        return frozenset(out)

    @property
    def use_set(self) -> frozenset[int]:
        m = self.mnemonic
        out = set()
        if self.regs and m in _READS_FIRST:
            out.add(self.regs[0])
        if len(self.regs) == 2:
            out.add(self.regs[1])
        if m in ("PUSH", "POP", "PUSHI", "CALL", "CALLR", "RET"):
            out.add(SP)
        return frozenset(out)

    @property
    def reads_memory(self) -> bool:
        return self.mnemonic in ("LOAD", "LOADPC", "POP", "RET", "JTAB")

    @property
    def writes_memory(self) -> bool:
        return self.mnemonic in ("STORE", "PUSH", "PUSHI", "CALL", "CALLR")

    def with_regs(self, regs: Sequence[int]) -> "Instruction":
        return Instruction(self.opcode, tuple(regs), self.imm, self.count)

    def with_imm(self, imm: int) -> "Instruction":
        return Instruction(self.opcode, self.regs, imm, self.count)

    def __str__(self) -> str:
        return disassemble_one(self)


def make(mnemonic: str, *regs: int, imm: int = 0, count: int = 0, swapped: bool = False,
         check: bool = True) -> Instruction:
    """Build an instruction by mnemonic (canonical encoding unless ``swapped``)."""
    op = SWAPPED_OPCODE[mnemonic] if swapped else OPCODE[mnemonic]
    ins = Instruction(op, regs, imm, count)
    if check:
        encode(ins)  # validates operands
    return ins


def _check_reg(r: int) -> int:
    if not 0 <= r < NUM_REGS:
        raise EncodeError(f"register index {r} out of range")
    return r


def _fits(value: int, bits: int, signed: bool) -> bool:
    if signed:
        return -(1 << (bits - 1)) <= value < (1 << (bits - 1))
    return 0 <= value < (1 << bits)


def encode(ins: Instruction) -> bytes:
    info = OPINFO.get(ins.opcode)
    if info is None:
        raise EncodeError(f"invalid opcode {ins.opcode:#x}")
    fmt = info.fmt
    nregs = FORMATS[fmt][1]
    if len(ins.regs) != nregs:
        raise EncodeError(f"{info.mnemonic} takes {nregs} registers, got {len(ins.regs)}")
    out = bytearray([ins.opcode])
    if nregs == 1:
        out.append(_check_reg(ins.regs[0]) << 3)
    elif nregs == 2:
        a, b = (_check_reg(r) for r in ins.regs)
        if info.swapped:
            a, b = b, a
        out.append((a << 3) | b)
    imm = ins.imm
    if fmt == "RI8":
        if not _fits(imm, 8, False):
            raise EncodeError("imm8 out of range")
        out.append(imm)
    elif fmt in ("RI16", "RRI16"):
        if not _fits(imm, 16, True):
            raise EncodeError("imm16 out of range")
        out += struct.pack("<h", imm)
    elif fmt in ("RI32", "I32"):
        if not _fits(imm, 32, False):
            raise EncodeError("imm32 out of range")
        out += struct.pack("<I", imm)
    elif fmt in ("REL8", "RREL8"):
        if not _fits(imm, 8, True):
            raise EncodeError("rel8 out of range")
        out += struct.pack("<b", imm)
    elif fmt in ("REL32", "RREL32"):
        if not _fits(imm, 32, True):
            raise EncodeError("rel32 out of range")
        out += struct.pack("<i", imm)
    elif fmt == "JTAB":
        if not 1 <= ins.count <= 255:
            raise EncodeError("table count must be 1..255")
        if not _fits(imm, 16, True):
            raise EncodeError("rel16 out of range")
        out.append(ins.count)
        out += struct.pack("<h", imm)
    elif ins.imm or ins.count:
        raise EncodeError(f"{info.mnemonic} takes no immediate")
    return bytes(out)


def try_decode(data, offset: int = 0) -> Instruction | None:
    """Like :func:`decode` but returns None instead of raising."""
    n = len(data)
    if offset < 0 or offset >= n:
        return None
    info = OPINFO.get(data[offset])
    if info is None:
        return None
    fmt = info.fmt
    length, nregs = FORMATS[fmt]
    if offset + length > n:
        return None
    regs: tuple[int, ...] = ()
    if nregs:
        rb = data[offset + 1]
        if rb & 0xC0:
            return None
        a, b = (rb >> 3) & 7, rb & 7
        if nregs == 1:
            if b:
                return None
            regs = (a,)
        else:
            regs = (b, a) if info.swapped else (a, b)
    imm = 0
    count = 0
    if fmt == "RI8":
        imm = data[offset + 2]
    elif fmt in ("RI16", "RRI16"):
        imm = int.from_bytes(data[offset + 2:offset + 4], "little", signed=True)
    elif fmt == "RI32":
        imm = int.from_bytes(data[offset + 2:offset + 6], "little")
    elif fmt == "I32":
        imm = int.from_bytes(data[offset + 1:offset + 5], "little")
    elif fmt == "REL8":
        imm = int.from_bytes(data[offset + 1:offset + 2], "little", signed=True)
    elif fmt == "RREL8":
        imm = int.from_bytes(data[offset + 2:offset + 3], "little", signed=True)
    elif fmt == "REL32":
        imm = int.from_bytes(data[offset + 1:offset + 5], "little", signed=True)
    elif fmt == "RREL32":
        imm = int.from_bytes(data[offset + 2:offset + 6], "little", signed=True)
    elif fmt == "JTAB":
        count = data[offset + 2]
        if count == 0:
            return None
        imm = int.from_bytes(data[offset + 3:offset + 5], "little", signed=True)
    return Instruction(info.opcode, regs, imm, count)


def decode(data, offset: int = 0) -> Instruction:
    ins = try_decode(data, offset)
    if ins is None:
        if offset < 0 or offset >= len(data):
            raise DecodeError(f"offset {offset} outside buffer")
        raise DecodeError(f"no valid instruction at offset {offset}")
    return ins


def decode_all(data, offset: int = 0, end: int | None = None) -> list[Instruction]:
    """Linear sweep from offset to end; raises DecodeError on any invalid byte."""
    end = len(data) if end is None else end
    out = []
    pos = offset
    while pos < end:
        ins = decode(data, pos)
        if pos + ins.length > end:
            raise DecodeError("instruction runs past end")
        out.append(ins)
        pos += ins.length
    return out


def gap_mask(ins: Instruction) -> bytes:
    """Per-byte mask of register-field bits in the encoding of ``ins``."""
    nregs = FORMATS[ins.fmt][1]
    mask = bytearray(ins.length)
    if nregs == 1:
        mask[1] = FIELD_A
    elif nregs == 2:
        mask[1] = FIELD_A | FIELD_B
    return bytes(mask)


def reloc_mask(ins: Instruction) -> bytes:
    """Per-byte mask of bytes that change when code moves (pc-relative parts).

    Short branches are marked entirely: relocation rewrites them into the
    long form, so even their opcode byte is not preserved.
    """
    fmt = ins.fmt
    mask = bytearray(ins.length)
    if fmt in ("REL8", "RREL8"):
        mask[:] = b"\xff" * ins.length
    elif fmt == "REL32":
        mask[1:5] = b"\xff" * 4
    elif fmt == "RREL32":
        mask[2:6] = b"\xff" * 4
    elif fmt == "JTAB":
        mask[3:5] = b"\xff\xff"
    return bytes(mask)


def unstable_mask(ins: Instruction) -> bytes:
    g, r = gap_mask(ins), reloc_mask(ins)
    return bytes(x | y for x, y in zip(g, r))


def map_registers(ins: Instruction, mapping: Sequence[int]) -> Instruction:
    """Rename every register operand through ``mapping`` (index -> index)."""
    if not ins.regs:
        return ins
    return ins.with_regs(tuple(mapping[r] for r in ins.regs))


# ---------------------------------------------------------------- semantics

def to_signed(v: int) -> int:
    return v - (1 << 32) if v & 0x80000000 else v


def alu(mnemonic: str, a: int, b: int) -> int:
    """Two-operand arithmetic on 32-bit values; returns the new destination."""
    if mnemonic == "MOV":
        return b
    if mnemonic in ("ADD", "ADDI"):
        return (a + b) & MASK32
    if mnemonic in ("SUB", "SUBI"):
        return (a - b) & MASK32
    if mnemonic in ("XOR", "XORI"):
        return (a ^ b) & MASK32
    if mnemonic in ("AND", "ANDI"):
        return a & b & MASK32
    if mnemonic in ("OR", "ORI"):
        return (a | b) & MASK32
    if mnemonic in ("MUL", "MULI"):
        return (a * b) & MASK32
    if mnemonic in ("SHL", "SHLI"):
        return (a << (b & 31)) & MASK32
    if mnemonic in ("SHR", "SHRI"):
        return (a & MASK32) >> (b & 31)
    if mnemonic == "SAR":
        return (to_signed(a) >> (b & 31)) & MASK32
    if mnemonic == "ROL":
        s = b & 31
        return ((a << s) | (a >> (32 - s))) & MASK32 if s else a
    if mnemonic == "SLT":
        return 1 if to_signed(a) < to_signed(b) else 0
    raise ValueError(mnemonic)


def eval_straightline(seq: Iterable[Instruction], regs: Sequence[int],
                      memory: dict[int, int] | None = None) -> tuple[list[int], dict[int, int]]:
    """Evaluate register/memory effects of non-control-flow instructions.

    Memory is a sparse dict of 32-bit words keyed by address; used to check
    substitutions and reorderings without a full process model.
    """
    r = [v & MASK32 for v in regs]
    mem = dict(memory or {})
    for ins in seq:
        m = ins.mnemonic
        if m == "NOP":
            continue
        if m in RR_MNEMONICS:
            d, s = ins.regs
            if m == "XCHG":
                r[d], r[s] = r[s], r[d]
            else:
                r[d] = alu(m, r[d], r[s])
        elif m in ("NOT", "NEG"):
            d = ins.regs[0]
            r[d] = (~r[d] & MASK32) if m == "NOT" else (-r[d]) & MASK32
        elif m == "MOVI":
            r[ins.regs[0]] = ins.imm & MASK32
        elif m == "MOVIS":
            r[ins.regs[0]] = ins.imm & MASK32
        elif m in RI16_MNEMONICS:
            d = ins.regs[0]
            r[d] = alu(m, r[d], ins.imm & MASK32)
        elif m in ("SHLI", "SHRI"):
            d = ins.regs[0]
            r[d] = alu(m, r[d], ins.imm)
        elif m == "LOAD":
            d, s = ins.regs
            r[d] = mem.get((r[s] + ins.imm) & MASK32, 0)
        elif m == "STORE":
            base, s = ins.regs
            mem[(r[base] + ins.imm) & MASK32] = r[s]
        elif m == "LEA":
            d, s = ins.regs
            r[d] = (r[s] + ins.imm) & MASK32
        else:
            raise ValueError(f"{m} not supported in straight-line evaluation")
    return r, mem


# ----------------------------------------------------------- substitution

SUBSTITUTION_RULES = ("nop-identity", "addi-subi", "mov-xor-add", "zero-idiom", "movi-width", "direction-bit")


def _sub_candidates(ins: Instruction, rules: Iterable[str]) -> list[list[Instruction]]:
    m = ins.mnemonic
    out: list[list[Instruction]] = []
    rules = set(rules)
    if "nop-identity" in rules and m == "NOP":
        out.append([ins])
    if "addi-subi" in rules and m in ("ADDI", "SUBI") and ins.imm != -0x8000:
        other = "SUBI" if m == "ADDI" else "ADDI"
        out.append([make(other, ins.regs[0], imm=-ins.imm)])
    if "mov-xor-add" in rules and m == "MOV" and ins.regs[0] != ins.regs[1]:
        d, s = ins.regs
        out.append([make("XOR", d, d), make("ADD", d, s)])
    if "zero-idiom" in rules and m in ("XOR", "SUB") and ins.regs[0] == ins.regs[1]:
        other = "SUB" if m == "XOR" else "XOR"
        out.append([make(other, ins.regs[0], ins.regs[0])])
    if "movi-width" in rules:
        if m == "MOVI":
            sv = to_signed(ins.imm)
            if _fits(sv, 16, True):
                out.append([make("MOVIS", ins.regs[0], imm=sv)])
        elif m == "MOVIS":
            out.append([make("MOVI", ins.regs[0], imm=ins.imm & MASK32)])
    if "direction-bit" in rules and m in RR_MNEMONICS:
        info = ins.info
        op = OPCODE[m] if info.swapped else SWAPPED_OPCODE[m]
        out.append([Instruction(op, ins.regs)])
    return out


def substitute(ins: Instruction, rng: random.Random, rules: Iterable[str] = SUBSTITUTION_RULES) -> list[Instruction]:
    """Return an equivalent instruction sequence chosen at random."""
    cands = _sub_candidates(ins, rules)
    if not cands:
        raise NoSubstitution(ins.mnemonic)
    return rng.choice(cands)


# ------------------------------------------------------ vectorised tables

@functools.lru_cache(maxsize=None)
def decode_tables() -> dict[str, np.ndarray]:
    """Per-opcode-byte lookup arrays used for whole-image scans (shared, do not mutate)."""
    valid = np.zeros(256, dtype=bool)
    length = np.zeros(256, dtype=np.int64)
    nregs = np.zeros(256, dtype=np.int64)
    term = np.zeros(256, dtype=np.int8)  # index into TERMINATOR_KINDS, 6 = none
    fmt_jtab = np.zeros(256, dtype=bool)
    for op, info in OPINFO.items():
        valid[op] = True
        length[op], nregs[op] = FORMATS[info.fmt]
        term[op] = TERMINATOR_KINDS.index(info.terminator)
        fmt_jtab[op] = info.fmt == "JTAB"
    term[~valid] = TERMINATOR_KINDS.index("none")
    return {"valid": valid, "length": length, "nregs": nregs, "term": term, "jtab": fmt_jtab}


def valid_at(data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised decode check: (ok, length) for every offset of ``data``."""
    t = decode_tables()
    n = len(data)
    op = data.astype(np.int64)
    ok = t["valid"][op].copy()
    length = t["length"][op]
    nr = t["nregs"][op]
    idx = np.arange(n)
    ok &= idx + length <= n
    nxt = np.zeros(n, dtype=np.int64)
    if n > 1:
        nxt[:-1] = data[1:]
    ok &= ~((nr > 0) & ((nxt & 0xC0) != 0))
    ok &= ~((nr == 1) & ((nxt & 0x07) != 0))
    cnt = np.zeros(n, dtype=np.int64)
    if n > 2:
        cnt[:-2] = data[2:]
    ok &= ~(t["jtab"][op] & (cnt == 0))
    return ok, np.where(ok, length, 0)


# ----------------------------------------------------- text assembly

def _reg(tok: str) -> int:
    tok = tok.strip().lower()
    if tok == "sp":
        return SP
    if not tok.startswith("r") or not tok[1:].isdigit():
        raise ValueError(f"bad register {tok!r}")
    return _check_reg(int(tok[1:]))


def _num(tok: str) -> int:
    return int(tok.strip().replace("+", ""), 0)


def _mem(tok: str) -> tuple[int, int]:
    tok = tok.strip()
    if not (tok.startswith("[") and tok.endswith("]")):
        raise ValueError(f"bad memory operand {tok!r}")
    inner = tok[1:-1].replace(" ", "")
    for sign in ("+", "-"):
        if sign in inner[1:]:
            i = inner.index(sign, 1)
            return _reg(inner[:i]), int(inner[i:], 0)
    return _reg(inner), 0


def disassemble_one(ins: Instruction) -> str:
    m = ins.mnemonic
    fmt = ins.fmt
    r = [f"r{x}" for x in ins.regs]
    if fmt == "N":
        return m
    if fmt in ("R", "RR"):
        return f"{m} {', '.join(r)}"
    if fmt in ("RI8", "RI16"):
        return f"{m} {r[0]}, {ins.imm}"
    if fmt == "RI32":
        return f"{m} {r[0]}, {ins.imm:#x}"
    if m == "STORE":
        return f"STORE [{r[0]}{ins.imm:+d}], {r[1]}"
    if fmt == "RRI16":
        return f"{m} {r[0]}, [{r[1]}{ins.imm:+d}]"
    if fmt in ("REL8", "REL32"):
        return f"{m} {ins.imm:+d}"
    if fmt in ("RREL8", "RREL32"):
        return f"{m} {r[0]}, {ins.imm:+d}"
    if fmt == "I32":
        return f"{m} {ins.imm:#x}"
    if fmt == "JTAB":
        return f"JTAB {r[0]}, {ins.count}, {ins.imm:+d}"
    raise AssertionError(fmt)


def _split_operands(rest: str) -> list[str]:
    out, depth, cur = [], 0, ""
    for ch in rest:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
        else:
            cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def assemble(source: str, base: int = 0) -> tuple[bytes, dict[str, int]]:
    """Two-pass assembler for fixtures.

    One instruction per line (``;`` also separates).  ``name:`` defines a
    label; branch operands may name a label; ``.word label|number`` emits a
    4-byte little-endian absolute value.  Returns (bytes, label addresses).
    """
    lines = []
    for raw in source.replace(";", "\n").splitlines():
        line = raw.split("#", 1)[0].strip()
        while ":" in line and not line.startswith("["):
            label, _, line = line.partition(":")
            lines.append(label.strip() + ":")
            line = line.strip()
        if line:
            lines.append(line)

    def parse(line: str, labels: dict[str, int] | None, pc: int) -> tuple[str, object, int]:
        if line.endswith(":"):
            return "label", line[:-1].strip(), 0
        head, _, rest = line.partition(" ")
        head = head.upper()
        ops = _split_operands(rest)
        if head == ".WORD":
            val = 0
            if labels is not None:
                tok = ops[0]
                val = labels[tok] if tok in labels else _num(tok)
            return "bytes", struct.pack("<I", val & MASK32), 4
        swapped = head.endswith(".D")
        mn = head[:-2] if swapped else head
        if mn not in OPCODE:
            raise ValueError(f"unknown mnemonic {mn}")
        fmt = OPINFO[OPCODE[mn]].fmt
        length = FORMATS[fmt][0]
        if labels is None:
            return "ins", None, length

        def target(tok: str) -> int:
            if tok in labels:
                return labels[tok] - (pc + length)
            return _num(tok)

        if fmt == "N":
            ins = make(mn)
        elif fmt in ("R", "RR"):
            ins = make(mn, *[_reg(o) for o in ops], swapped=swapped)
        elif fmt in ("RI8", "RI16", "RI32"):
            tok = ops[1]
            ins = make(mn, _reg(ops[0]), imm=labels[tok] if tok in labels else _num(tok))
        elif fmt == "RRI16":
            if mn == "STORE":
                b, off = _mem(ops[0])
                ins = make(mn, b, _reg(ops[1]), imm=off)
            else:
                b, off = _mem(ops[1])
                ins = make(mn, _reg(ops[0]), b, imm=off)
        elif fmt in ("REL8", "REL32"):
            ins = make(mn, imm=target(ops[0]))
        elif fmt in ("RREL8", "RREL32"):
            ins = make(mn, _reg(ops[0]), imm=target(ops[1]))
        elif fmt == "I32":
            tok = ops[0]
            ins = make(mn, imm=labels[tok] if tok in labels else _num(tok))
        elif fmt == "JTAB":
            ins = make(mn, _reg(ops[0]), count=_num(ops[1]), imm=target(ops[2]))
        else:
            raise AssertionError(fmt)
        return "bytes", encode(ins), length

    labels: dict[str, int] = {}
    pc = base
    for line in lines:
        kind, val, n = parse(line, None, pc)
        if kind == "label":
            labels[val] = pc
        pc += n
    out = bytearray()
    pc = base
    for line in lines:
        kind, val, n = parse(line, labels, pc)
        if kind == "bytes":
            out += val
        pc += n
    return bytes(out), labels


def disassemble(data: bytes, base: int = 0) -> list[str]:
    return [f"{base + off:#010x}: {disassemble_one(i)}" for off, i in _sweep(data)]


def _sweep(data: bytes):
    pos = 0
    while pos < len(data):
        ins = try_decode(data, pos)
        if ins is None:
            pos += 1
            continue
        yield pos, ins
        pos += ins.length


def isa_reference() -> str:
    """Markdown table of every opcode, its encoding and gap-bit positions."""
    rows = ["# MIN32 instruction set reference", "",
            "Encoding: `[opcode]` then, for register formats, one register byte "
            "`00aaabbb` (field a = bits 3-5, mask 0x38; field b = bits 0-2, mask 0x07). "
            "Immediates and displacements are little-endian. Displacements are relative "
            "to the address of the next instruction. Bits 6-7 of the register byte and "
            f"unused register fields must be zero. Byte {GARBLE_BYTE:#04x} is reserved "
            "as the garble byte and never decodes. Register r7 is the stack pointer.", "",
            "Gap bits are the register-field bits. Relocation bytes are the bytes rewritten "
            "when code moves (short branches are rewritten entirely).", "",
            "| opcode | mnemonic | format | length | layout | gap mask | relocation mask | terminator |",
            "|---|---|---|---|---|---|---|---|"]
    layouts = {
        "N": "op", "R": "op a:0", "RR": "op a:b", "RI8": "op a:0 imm8", "RI16": "op a:0 imm16",
        "RI32": "op a:0 imm32", "RRI16": "op a:b imm16", "REL8": "op rel8", "REL32": "op rel32",
        "RREL8": "op a:0 rel8", "RREL32": "op a:0 rel32", "I32": "op imm32",
        "JTAB": "op a:0 count8 rel16",
    }
    for op in sorted(OPINFO):
        info = OPINFO[op]
        nregs = FORMATS[info.fmt][1]
        regs = tuple(range(1, 1 + nregs))
        ins = Instruction(op, regs, 0, 1 if info.fmt == "JTAB" else 0)
        g = " ".join(f"{b:02x}" for b in gap_mask(ins))
        rl = " ".join(f"{b:02x}" for b in reloc_mask(ins))
        lay = layouts[info.fmt]
        if info.swapped:
            lay += " (a=second operand, b=first)"
        rows.append(f"| {op:#04x} | {info.mnemonic}{'.D' if info.swapped else ''} | {info.fmt} | "
                    f"{info.length} | {lay} | {g} | {rl} | {info.terminator} |")
    rows += ["", f"{len(OPINFO)} of 256 opcode bytes are valid ({len(OPINFO) / 256:.1%})."]
    return "\n".join(rows) + "\n"
