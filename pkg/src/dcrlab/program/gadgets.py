"""Gadget discovery at every byte offset of a text section."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import isa
from .image import BinaryImage

GADGET_CLASSES = ("load-const", "move", "arith", "load-mem", "store-mem", "stack-pivot", "call", "other")
_CLS = {c: i for i, c in enumerate(GADGET_CLASSES)}

_MOVE = {"MOV", "XCHG", "LEA", "LEAPC"}
_CONST = {"POP", "MOVI", "MOVIS"}
_LOADM = {"LOAD", "LOADPC"}
_STOREM = {"STORE", "PUSH", "PUSHI"}
_GADGET_END = {"RET", "CALLR", "JMPR"}


@dataclass(frozen=True)
class Gadget:
    start: int
    instructions: tuple[isa.Instruction, ...]
    byte_length: int
    gapless: bool
    gadget_class: str


def _op_class(ins: isa.Instruction) -> str | None:
    """Class contributed by one non-terminating instruction, None if it produces nothing."""
    m = ins.mnemonic
    if m == "NOP":
        return None
    if isa.SP in ins.def_set and m not in ("PUSH", "PUSHI", "POP") or (m == "POP" and ins.regs[0] == isa.SP):
        return "stack-pivot"
    if m in _CONST:
        return "load-const"
    if m in _MOVE:
        return "move"
    if m in _LOADM:
        return "load-mem"
    if m in _STOREM:
        return "store-mem"
    if m == "SYS":
        return "call"
    return "arith"


def classify(instructions) -> str:
    cls = "other"
    for ins in instructions[:-1]:
        c = _op_class(ins)
        if c is not None:
            cls = c
    return cls


def _class_tables():
    """Per-opcode class code, -1 for no value; stack pivots need the register byte."""
    cls = np.full(256, -1, dtype=np.int64)
    writes_first = np.zeros(256, dtype=bool)
    first_field_b = np.zeros(256, dtype=bool)  # regs[0] stored in field b (swapped RR)
    xchg = np.zeros(256, dtype=bool)
    for op, info in isa.OPINFO.items():
        if info.terminator != "none":
            continue
        nregs = isa.FORMATS[info.fmt][1]
        probe = isa.Instruction(op, tuple([0] * nregs), 0, 1 if info.fmt == "JTAB" else 0)
        c = _op_class(probe)
        cls[op] = -1 if c is None else _CLS[c]
        if nregs and 0 in probe.def_set:
            writes_first[op] = True
        first_field_b[op] = info.swapped
        xchg[op] = info.mnemonic == "XCHG"
    return cls, writes_first, first_field_b, xchg


@dataclass
class GadgetTable:
    """Column store of gadgets found in one text section (offsets, not addresses)."""

    start: np.ndarray
    length: np.ndarray
    n_instr: np.ndarray
    gapless: np.ndarray
    cls: np.ndarray

    def __len__(self) -> int:
        return len(self.start)

    def class_name(self, i: int) -> str:
        return GADGET_CLASSES[int(self.cls[i])]

    def materialize(self, text: bytes, base: int, idx=None) -> list[Gadget]:
        idx = range(len(self)) if idx is None else idx
        out = []
        for i in idx:
            s = int(self.start[i])
            ins = []
            pos = s
            for _ in range(int(self.n_instr[i])):
                d = isa.decode(text, pos)
                ins.append(d)
                pos += d.length
            out.append(Gadget(base + s, tuple(ins), int(self.length[i]), bool(self.gapless[i]),
                              GADGET_CLASSES[int(self.cls[i])]))
        return out


def scan(text: np.ndarray, unstable: np.ndarray, max_instructions: int = 6) -> GadgetTable:
    """Vectorised search: every offset that decodes into RET/CALLR/JMPR within the limit."""
    n = len(text)
    if n == 0:
        z = np.zeros(0, dtype=np.int64)
        return GadgetTable(z, z, z, z.astype(bool), z)
    text = np.asarray(text, dtype=np.uint8)
    ok, length = isa.valid_at(text)
    term = isa.decode_tables()["term"][text.astype(np.int64)]
    none_k = isa.TERMINATOR_KINDS.index("none")
    end_ops = np.zeros(256, dtype=bool)
    for op, info in isa.OPINFO.items():
        if info.mnemonic in _GADGET_END:
            end_ops[op] = True
    is_end = end_ops[text] & ok
    is_branch = (term != none_k) & ~is_end
    cls_t, wf, fb, xc = _class_tables()
    nxt = np.zeros(n, dtype=np.int64)
    nxt[:-1] = text[1:]
    field_a = (nxt >> 3) & 7
    field_b = nxt & 7
    first_reg = np.where(fb[text], field_b, field_a)
    op_cls = cls_t[text]
    pivot = ok & ((wf[text] & (first_reg == isa.SP)) | (xc[text] & ((field_a == isa.SP) | (field_b == isa.SP))))
    op_cls = np.where(pivot, _CLS["stack-pivot"], op_cls)

    starts, lens, nins, clss = [], [], [], []
    cur = np.arange(n, dtype=np.int64)
    org = cur.copy()
    last_cls = np.full(n, _CLS["other"], dtype=np.int64)
    for step in range(max_instructions):
        okc = ok[cur]
        cur, org, last_cls = cur[okc], org[okc], last_cls[okc]
        e = is_end[cur]
        if e.any():
            starts.append(org[e])
            lens.append(cur[e] + length[cur[e]] - org[e])
            nins.append(np.full(int(e.sum()), step + 1))
            clss.append(last_cls[e])
        keep = ~e & ~is_branch[cur]
        cur, org, last_cls = cur[keep], org[keep], last_cls[keep]
        c = op_cls[cur]
        last_cls = np.where(c >= 0, c, last_cls)
        cur = cur + length[cur]
        inside = cur < n
        cur, org, last_cls = cur[inside], org[inside], last_cls[inside]
        if not len(cur):
            break
    if not starts:
        z = np.zeros(0, dtype=np.int64)
        return GadgetTable(z, z, z, z.astype(bool), z)
    s = np.concatenate(starts)
    ln = np.concatenate(lens)
    order = np.argsort(s, kind="stable")
    s, ln = s[order], ln[order]
    unstable_prefix = np.concatenate([[0], np.cumsum(np.asarray(unstable) != 0)])
    gapless = (unstable_prefix[s + ln] - unstable_prefix[s]) == 0
    return GadgetTable(s, ln, np.concatenate(nins)[order], gapless, np.concatenate(clss)[order])


def gadget_table(img: BinaryImage, max_instructions: int = 6) -> GadgetTable:
    key = ("gadgets", max_instructions)
    cache = img.__dict__.setdefault("_cache", {})
    if key not in cache:
        cache[key] = scan(img.text_array, img.unstable_bits, max_instructions)
    return cache[key]


def extract_gadgets(img: BinaryImage, max_instructions: int = 6) -> list[Gadget]:
    t = gadget_table(img, max_instructions)
    return t.materialize(img.text, img.text_base)


def brute_force_gadgets(text: bytes, max_instructions: int = 6) -> list[tuple[int, tuple[isa.Instruction, ...]]]:
    """Reference implementation: decode forward from every offset with the scalar decoder."""
    out = []
    for s in range(len(text)):
        pos, seq = s, []
        for _ in range(max_instructions):
            ins = isa.try_decode(text, pos)
            if ins is None:
                break
            seq.append(ins)
            if ins.mnemonic in _GADGET_END:
                out.append((s, tuple(seq)))
                break
            if ins.is_terminator:
                break
            pos += ins.length
    return out


def simple_gadgets(img: BinaryImage, max_instructions: int = 6) -> dict[str, np.ndarray]:
    """Two-instruction ``X; RET`` gadgets with decoded opcode and registers, for chain planning."""
    t = gadget_table(img, max_instructions)
    text = img.text_array
    sel = np.nonzero((t.n_instr == 2) & (text[t.start + t.length - 1] == 0xC3))[0]
    s = t.start[sel]
    op = text[s].astype(np.int64)
    rb = text[np.minimum(s + 1, len(text) - 1)].astype(np.int64)
    swapped = np.zeros(256, dtype=bool)
    for o, info in isa.OPINFO.items():
        swapped[o] = info.swapped
    fa, fb = (rb >> 3) & 7, rb & 7
    r0 = np.where(swapped[op], fb, fa)
    r1 = np.where(swapped[op], fa, fb)
    return {"index": sel, "start": s, "op": op, "r0": r0, "r1": r1, "gapless": t.gapless[sel],
            "cls": t.cls[sel], "length": t.length[sel]}
