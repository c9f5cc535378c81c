"""In-memory model of an original (or randomized) binary image."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator

import numpy as np

from .. import isa

TEXT_BASE = 0x10000000
DATA_BASE = 0x20000000
STACK_TOP = 0x30000000
STACK_SIZE = 0x40000

EDGE_LABELS = ("jump", "true", "false", "fallthrough", "call", "return", "table")

KIND_NONE = "none"


class ImageError(ValueError):
    pass


class BasicBlock:
    """A basic block.  ``succs`` holds (target block id, label, slot) triples.

    ``slot`` is the jump-table index for ``table`` edges and 0 otherwise.
    ``callee`` is the called function for call blocks (direct or indirect),
    ``ptr_slot`` the (table index, entry index) an indirect call loads from.
    """

    __slots__ = ("id", "start", "size", "function", "kind", "succs", "callee", "ptr_slot",
                 "table_addr", "table_count")

    def __init__(self, id: int, start: int, size: int, function: int, kind: str,
                 succs: tuple = (), callee: int = -1, ptr_slot: tuple[int, int] | None = None,
                 table_addr: int = -1, table_count: int = 0):
        self.id = id
        self.start = start
        self.size = size
        self.function = function
        self.kind = kind
        self.succs = tuple(succs)
        self.callee = callee
        self.ptr_slot = ptr_slot
        self.table_addr = table_addr
        self.table_count = table_count

    @property
    def end(self) -> int:
        return self.start + self.size

    def succ(self, label: str, slot: int = 0) -> int:
        for dst, lab, s in self.succs:
            if lab == label and (label != "table" or s == slot):
                return dst
        return -1

    def __repr__(self) -> str:
        return f"BasicBlock(id={self.id}, start={self.start:#x}, size={self.size}, kind={self.kind})"


@dataclass
class Function:
    id: int
    entry: int
    blocks: list[int]
    param_count: int = 0
    exported: bool = False
    param_order: tuple[int, ...] = ()
    returns_value: bool = False
    frame_size: int = 0
    address_taken: bool = False
    payload: bool = False

    def __post_init__(self):
        if not self.param_order:
            self.param_order = tuple(range(self.param_count))

    @property
    def abi_fixed(self) -> bool:
        """Callable from outside the randomizer's view: calling convention frozen."""
        return self.exported or self.address_taken


@dataclass
class PointerTable:
    offset: int  # byte offset inside the data section
    entries: tuple[int, ...]  # function ids


@dataclass
class BinaryImage:
    text: bytes
    data: bytes
    blocks: list[BasicBlock]
    functions: list[Function]
    pointer_tables: list[PointerTable] = field(default_factory=list)
    entry_points: list[int] = field(default_factory=list)  # function ids
    embedded: list[tuple[int, int]] = field(default_factory=list)  # (address, length)
    text_base: int = TEXT_BASE
    data_base: int = DATA_BASE
    meta: dict = field(default_factory=dict)

    # ----------------------------------------------------------- lookups
    @cached_property
    def starts(self) -> np.ndarray:
        return np.array([b.start for b in self.blocks], dtype=np.int64)

    @cached_property
    def _order(self) -> np.ndarray:
        return np.argsort(self.starts, kind="stable")

    @cached_property
    def _sorted_starts(self) -> np.ndarray:
        return self.starts[self._order]

    @cached_property
    def _sorted_ends(self) -> np.ndarray:
        return np.array([self.blocks[i].end for i in self._order], dtype=np.int64)

    def block_at(self, addr: int) -> int:
        """Id of the block containing ``addr``, or -1."""
        i = int(np.searchsorted(self._sorted_starts, addr, side="right")) - 1
        if i < 0 or addr >= self._sorted_ends[i]:
            return -1
        return int(self._order[i])

    def blocks_at(self, addrs: np.ndarray) -> np.ndarray:
        addrs = np.asarray(addrs, dtype=np.int64)
        i = np.searchsorted(self._sorted_starts, addrs, side="right") - 1
        ok = i >= 0
        ic = np.where(ok, i, 0)
        ok &= addrs < self._sorted_ends[ic]
        return np.where(ok, self._order[ic], -1)

    @cached_property
    def block_by_start(self) -> dict[int, int]:
        return {b.start: b.id for b in self.blocks}

    def entry_address(self, fid: int) -> int:
        return self.blocks[self.functions[fid].entry].start

    @property
    def text_end(self) -> int:
        return self.text_base + len(self.text)

    def offset(self, addr: int) -> int:
        return addr - self.text_base

    def block_bytes(self, bid: int) -> bytes:
        b = self.blocks[bid]
        o = b.start - self.text_base
        return self.text[o:o + b.size]

    def instructions(self, bid: int) -> list[isa.Instruction]:
        return isa.decode_all(self.block_bytes(bid))

    def instruction_offsets(self, bid: int) -> list[tuple[int, isa.Instruction]]:
        out, pos, data = [], 0, self.block_bytes(bid)
        while pos < len(data):
            ins = isa.decode(data, pos)
            out.append((pos, ins))
            pos += ins.length
        return out

    def terminator(self, bid: int) -> tuple[int, isa.Instruction]:
        """(address, instruction) of the block's terminator."""
        b = self.blocks[bid]
        o = int(self.terminator_offsets[bid])
        return b.start + o, isa.decode(self.text, b.start - self.text_base + o)

    @cached_property
    def text_array(self) -> np.ndarray:
        return np.frombuffer(self.text, dtype=np.uint8)

    # --------------------------------------------------- aligned stream
    @cached_property
    def _aligned(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(instruction offsets, owning block id, terminator offset per block).

        Walks all blocks in lock-step with numpy; raises if any block does
        not decode cleanly to its end.
        """
        text = self.text_array
        ok, length = isa.valid_at(text)
        tk = isa.decode_tables()["term"]
        none_k = isa.TERMINATOR_KINDS.index("none")
        nb = len(self.blocks)
        pos = np.array([b.start - self.text_base for b in self.blocks], dtype=np.int64)
        end = pos + np.array([b.size for b in self.blocks], dtype=np.int64)
        bid = np.arange(nb)
        term_off = np.full(nb, -1, dtype=np.int64)
        starts_chunks, owner_chunks = [], []
        active = np.ones(nb, dtype=bool)
        base = pos.copy()
        while active.any():
            idx = np.nonzero(active)[0]
            p = pos[idx]
            if (~ok[p]).any():
                bad = idx[~ok[p]][0]
                raise ImageError(f"block {bad} does not decode at offset {pos[bad] - base[bad]}")
            starts_chunks.append(p)
            owner_chunks.append(bid[idx])
            nxt = p + length[p]
            is_term = tk[text[p]] != none_k
            if (nxt > end[idx]).any():
                bad = idx[nxt > end[idx]][0]
                raise ImageError(f"block {bad} overruns its end")
            if (is_term & (nxt != end[idx])).any():
                bad = idx[is_term & (nxt != end[idx])][0]
                raise ImageError(f"block {bad} has a terminator before its end")
            if ((~is_term) & (nxt == end[idx])).any():
                bad = idx[(~is_term) & (nxt == end[idx])][0]
                raise ImageError(f"block {bad} does not end in a terminator")
            term_off[idx[is_term]] = p[is_term] - base[idx[is_term]]
            pos[idx] = nxt
            active[idx[is_term]] = False
        if starts_chunks:
            s = np.concatenate(starts_chunks)
            o = np.concatenate(owner_chunks)
            order = np.argsort(s, kind="stable")
            return s[order], o[order], term_off
        return np.zeros(0, np.int64), np.zeros(0, np.int64), term_off

    @property
    def insn_offsets(self) -> np.ndarray:
        return self._aligned[0]

    @property
    def insn_owner(self) -> np.ndarray:
        return self._aligned[1]

    @property
    def terminator_offsets(self) -> np.ndarray:
        """Offset of each block's terminator relative to the block start."""
        return self._aligned[2]

    def _mask_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        text = self.text_array
        n = len(text)
        gap = np.zeros(n, dtype=np.uint8)
        rel = np.zeros(n, dtype=np.uint8)
        starts = self.insn_offsets
        if len(starts):
            ops = text[starts]
            fmt_of = {}
            for op, info in isa.OPINFO.items():
                fmt_of[op] = info.fmt
            fmt_idx = np.zeros(256, dtype=np.int64)
            names = list(isa.FORMATS)
            for op, f in fmt_of.items():
                fmt_idx[op] = names.index(f)
            fi = fmt_idx[ops]
            nregs = np.array([isa.FORMATS[f][1] for f in names])[fi]
            gap[starts[nregs == 1] + 1] = isa.FIELD_A
            gap[starts[nregs == 2] + 1] = isa.FIELD_A | isa.FIELD_B
            for fname, lo, hi in (("REL8", 0, 2), ("RREL8", 0, 3), ("REL32", 1, 5),
                                  ("RREL32", 2, 6), ("JTAB", 3, 5)):
                sel = starts[fi == names.index(fname)]
                for k in range(lo, hi):
                    rel[sel + k] = 0xFF
        for addr, ln in self.embedded:
            o = addr - self.text_base
            rel[o:o + ln] = 0xFF
        return gap, rel

    @cached_property
    def gap_bits(self) -> np.ndarray:
        """Per-byte register-field mask of the aligned instruction stream."""
        return self._masks[0]

    @cached_property
    def unstable_bits(self) -> np.ndarray:
        """Per-byte mask of bits that randomization may change (gaps plus relocations)."""
        g, r = self._masks
        return g | r

    @cached_property
    def _masks(self):
        return self._mask_arrays()

    @cached_property
    def embedded_mask(self) -> np.ndarray:
        m = np.zeros(len(self.text), dtype=bool)
        for addr, ln in self.embedded:
            o = addr - self.text_base
            m[o:o + ln] = True
        return m

    # -------------------------------------------------------- graph views
    def edges(self) -> Iterator[tuple[int, int, str, int]]:
        for b in self.blocks:
            for dst, lab, slot in b.succs:
                yield b.id, dst, lab, slot

    def return_edges(self) -> Iterator[tuple[int, int]]:
        """(ret block, return site) pairs for every direct call."""
        rets = {f.id: [bid for bid in f.blocks if self.blocks[bid].kind == "return"] for f in self.functions}
        for b in self.blocks:
            if b.callee >= 0:
                site = b.succ("fallthrough")
                for r in rets.get(b.callee, []):
                    yield r, site

    def call_graph(self) -> dict[int, set[int]]:
        g: dict[int, set[int]] = {f.id: set() for f in self.functions}
        for b in self.blocks:
            if b.callee >= 0:
                g[b.function].add(b.callee)
        return g

    def pointer_table_address(self, t: int) -> int:
        return self.data_base + self.pointer_tables[t].offset

    def validate(self) -> None:
        """Check structural invariants; raises ImageError."""
        nt = len(self.text)
        cover = np.zeros(nt, dtype=np.int32)
        for b in self.blocks:
            if b.size < 1:
                raise ImageError(f"block {b.id} is empty")
            o = b.start - self.text_base
            if o < 0 or o + b.size > nt:
                raise ImageError(f"block {b.id} outside text")
            cover[o:o + b.size] += 1
        for addr, ln in self.embedded:
            o = addr - self.text_base
            cover[o:o + ln] += 1
        if self.meta.get("tiled", True) and nt and (cover != 1).any():
            raise ImageError("blocks and embedded data do not tile the text section")
        if (cover > 1).any():
            raise ImageError("overlapping blocks")
        _ = self._aligned  # decode check
        starts = self.block_by_start
        for b in self.blocks:
            for dst, lab, _slot in b.succs:
                if not 0 <= dst < len(self.blocks) or self.blocks[dst].start not in starts:
                    raise ImageError(f"edge {b.id}->{dst} does not target a block start")
                if lab not in EDGE_LABELS:
                    raise ImageError(f"unknown edge label {lab}")
        entries = {f.entry for f in self.functions}
        for t in self.pointer_tables:
            for k, fid in enumerate(t.entries):
                word = int.from_bytes(self.data[t.offset + 4 * k:t.offset + 4 * k + 4], "little")
                if word != self.entry_address(fid) or self.functions[fid].entry not in entries:
                    raise ImageError(f"pointer table entry {t.offset}+{k} is not a function entry")
