"""The two destructive-read bypass attacks.

Both attacks see the victim only through the process interface: byte reads
(``data_fetch``), a leaked text base and size, and a final control-flow
hijack (``invoke_chain``).  Everything else comes from the unrandomized
original image.  The attacker never looks at ``proc.image`` or any
randomization record.

attack1 (block shuffling + register renaming): probe random windows until
one matches a single original location, walk a precomputed control-flow path
from there by decoding the visited blocks, and hit gapless gadgets in blocks
that were located but never read.

attack2 (adds NOPs, substitutions, reordering and argument permutation):
take code anchors from the pointer tables in the data section, walk to a call
site of a function with a useful side effect, read that call site to learn
which register carries which argument, and call the function directly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import isa
from .enforcer import SimProcess
from .program.cfg import NoPath, path_graph
from .program.gadgets import Gadget, GADGET_CLASSES, classify, simple_gadgets
from .program.image import BinaryImage
from .program.templates import TemplateIndex, templates_at

MODES = ("attack1", "attack2")
WALK_MODES = ("block", "decode")
DEFAULT_CHAIN = ("load-const", "load-const", "arith", "move", "call")
MAX_INSN = max(length for length, _ in isa.FORMATS.values())


@dataclass(frozen=True)
class CodeAnchor:
    address_orig: int
    address_rand: int


@dataclass
class AttackBudget:
    max_probes: int = 500
    probe_length: int = 6
    chain_length: int = 5

    def __post_init__(self):
        if not 3 <= self.probe_length <= 8:
            raise ValueError("probe_length must be within 3..8")
        if self.max_probes < 1:
            raise ValueError("max_probes must be >= 1")


class CrashObserved(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class AttackFailure(Exception):
    def __init__(self, kind: str, detail: str = ""):
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind
        self.detail = detail


class BudgetExhausted(AttackFailure):
    def __init__(self):
        super().__init__("budget")


@dataclass
class MatchResult:
    kind: str  # unique | ambiguous | boundary | no-match
    count: int = 0
    offset: int = -1  # template offset for unique matches


@dataclass
class CampaignReport:
    mode: str
    outcome: str  # success | crash | budget-exhausted | failure
    reason: str = ""
    probes_used: int = 0
    bytes_read: int = 0
    anchors: int = 0
    garble_events: int = 0
    chain_bytes_read: int = 0
    target_bytes_read: int = 0
    disjoint: bool = True
    recovered_args: dict = field(default_factory=dict)  # function id -> argument registers
    anchor_probes: int = 0
    trial: int = -1
    seed: int = -1

    @property
    def success(self) -> bool:
        return self.outcome == "success"

    def to_json(self) -> str:
        d = asdict(self)
        d["recovered_args"] = {str(k): list(v) for k, v in self.recovered_args.items()}
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "CampaignReport":
        d = json.loads(line)
        d["recovered_args"] = {int(k): tuple(v) for k, v in d.get("recovered_args", {}).items()}
        return cls(**d)


# ------------------------------------------------------------ primitives

def probe(proc: SimProcess, address: int, length: int) -> bytes:
    """One disclosure through the victim's data-read path."""
    out = proc.data_fetch(address, length)
    if out is None:
        raise CrashObserved(proc.reason)
    return out


def match_anchor(leaked: bytes, templates: TemplateIndex) -> MatchResult:
    offs = templates.lookup(leaked)
    if len(offs) == 0:
        return MatchResult("no-match")
    if len(offs) > 1:
        return MatchResult("ambiguous", len(offs))
    o = int(offs[0])
    if templates.fits is not None and not templates.fits[o]:
        return MatchResult("boundary", 1, o)  # straddles a block boundary of the original
    return MatchResult("unique", 1, o)


class Session:
    """Probe bookkeeping for one campaign: counts, read log and a byte cache."""

    def __init__(self, proc: SimProcess, budget: AttackBudget):
        self.proc = proc
        self.budget = budget
        self.text_base = proc.text_base
        self.text_end = proc.text_end
        self.probes = 0
        self.read = np.zeros(self.text_end - self.text_base, dtype=bool)
        self.cache = np.zeros(self.text_end - self.text_base, dtype=np.uint8)

    def probe(self, address: int, length: int) -> bytes:
        if self.probes >= self.budget.max_probes:
            raise BudgetExhausted()
        self.probes += 1
        out = probe(self.proc, address, length)
        o = address - self.text_base
        if 0 <= o < len(self.read):
            self.read[o:o + length] = True
            self.cache[o:o + length] = np.frombuffer(out, dtype=np.uint8)
        return out

    def read_text(self, address: int, length: int) -> bytes:
        """Read through the cache; only unseen ranges cost a probe."""
        o = address - self.text_base
        if o < 0 or o + length > len(self.read):
            raise AttackFailure("decode", f"read outside text at {address:#x}")
        if self.read[o:o + length].all():
            return self.cache[o:o + length].tobytes()
        return self.probe(address, length)

    def read_data_word(self, address: int) -> int:
        return struct.unpack("<I", probe(self.proc, address, 4))[0]

    def read_addresses(self) -> np.ndarray:
        return np.flatnonzero(self.read) + self.text_base


def find_anchor(proc_or_session, templates: TemplateIndex, budget: AttackBudget,
                rng: np.random.Generator) -> tuple[CodeAnchor, int]:
    """Probe random windows until one matches a single original window."""
    s = proc_or_session if isinstance(proc_or_session, Session) else Session(proc_or_session, budget)
    m = templates.length
    span = s.text_end - s.text_base - m + 1
    if span <= 0:
        raise AttackFailure("budget", "text smaller than a probe")
    used = 0
    while True:
        for _ in range(64):
            o = int(rng.integers(0, span))
            if not s.read[o:o + m].any():
                break
        leaked = s.probe(s.text_base + o, m)
        used += 1
        r = match_anchor(leaked, templates)
        if r.kind == "unique":
            return CodeAnchor(templates.base + r.offset, s.text_base + o), used


def harvest_pointers(proc_or_session, orig: BinaryImage) -> list[CodeAnchor]:
    """Anchors from the pointer tables, which sit at fixed data-section offsets."""
    out = []
    for t in orig.pointer_tables:
        raw = probe(proc_or_session.proc if isinstance(proc_or_session, Session) else proc_or_session,
                    orig.data_base + t.offset, 4 * len(t.entries))
        vals = struct.unpack(f"<{len(t.entries)}I", raw)
        for fid, v in zip(t.entries, vals):
            out.append(CodeAnchor(orig.entry_address(fid), v))
    return out


# ---------------------------------------------------------- rediscovery

def _long_length(ins: isa.Instruction) -> int:
    m = ins.mnemonic
    if m in isa.BRANCH_LONG:
        return isa.OPINFO[isa.OPCODE[isa.BRANCH_LONG[m]]].length
    return ins.length


class Walker:
    """Locates original blocks in the randomized process by walking CFG paths."""

    def __init__(self, session: Session, orig: BinaryImage, mode: str = "block"):
        if mode not in WALK_MODES:
            raise ValueError(f"unknown walk mode {mode!r}")
        self.s = session
        self.orig = orig
        self.mode = mode
        self.known: dict[int, int] = {}  # original block id -> randomized start
        self.terms: dict[int, tuple[int, isa.Instruction]] = {}  # block -> (terminator address, insn)
        self.extents: dict[int, int] = {}  # block -> randomized end (after the terminator)

    # each decoded block must agree with the original one, which also
    # exposes false anchors quickly
    def _decode_block(self, bid: int) -> tuple[int, isa.Instruction]:
        if bid in self.terms:
            return self.terms[bid]
        start = self.known[bid]
        ob = self.orig.blocks[bid]
        orig_ins = self.orig.instructions(bid)
        if self.mode == "block":
            prefix = sum(i.length for i in orig_ins[:-1])
            size = prefix + _long_length(orig_ins[-1])
            # the trampoline for a false/fallthrough edge follows the block
            extra = 5 if any(lab in ("false", "fallthrough") for _, lab, _ in ob.succs) and not ob.table_count else 0
            raw = self.s.read_text(start, size + extra)[:size]
            pos = 0
            for oi in orig_ins[:-1]:
                ins = isa.try_decode(raw, pos)
                if ins is None or ins.mnemonic != oi.mnemonic or ins.length != oi.length:
                    raise AttackFailure("decode", f"block {bid} differs from the original")
                pos += ins.length
            term = isa.try_decode(raw, pos)
            if term is None or term.terminator_kind != ob.kind:
                raise AttackFailure("decode", f"block {bid} terminator mismatch")
            out = (start + pos, term)
        else:
            pc = start
            limit = start + 8 * max(ob.size, 8) + 64
            while True:
                n = min(MAX_INSN, self.s.text_end - pc)
                if n <= 0 or pc > limit:
                    raise AttackFailure("decode", f"block {bid} runs off")
                raw = self.s.read_text(pc, n)
                ins = isa.try_decode(raw, 0)
                if ins is None:
                    raise AttackFailure("decode", f"undecodable byte in block {bid}")
                if ins.is_terminator:
                    if ins.terminator_kind != ob.kind:
                        raise AttackFailure("decode", f"block {bid} terminator mismatch")
                    out = (pc, ins)
                    break
                pc += ins.length
        self.terms[bid] = out
        self.extents[bid] = out[0] + out[1].length
        return out

    def block_bytes(self, bid: int) -> bytes:
        """Read the whole located block (used on call sites and predecessors)."""
        ta, term = self._decode_block(bid)
        start = self.known[bid]
        return self.s.read_text(start, ta + term.length - start)

    def _follow(self, bid: int, label: str, nxt: int) -> int:
        ta, term = self._decode_block(bid)
        end = ta + term.length
        m = term.mnemonic
        if label in ("jump", "true", "call"):
            if term.fmt not in ("REL8", "REL32", "RREL8", "RREL32"):
                raise AttackFailure("decode", f"block {bid}: {m} has no static target")
            return end + term.imm
        if label in ("false", "fallthrough"):
            tail = end + 4 * self.orig.blocks[bid].table_count
            raw = self.s.read_text(tail, 5)
            j = isa.try_decode(raw, 0)
            if j is None or j.mnemonic != "JMP":
                raise AttackFailure("decode", f"no trampoline after block {bid}")
            return tail + 5 + j.imm
        if label.startswith("table:"):
            k = int(label.split(":")[1])
            if m != "JTAB" or k >= term.count:
                raise AttackFailure("decode", f"block {bid} has no table slot {k}")
            (v,) = struct.unpack("<I", self.s.read_text(end + term.imm + 4 * k, 4))
            return v
        raise AttackFailure("no-path", f"label {label}")

    def rediscover(self, start_block: int, steps: list[tuple[str, int]]) -> int:
        """Randomized address of the last block of ``steps`` (its bytes are never read)."""
        cur = start_block
        for label, nxt in steps:
            if nxt not in self.known:
                addr = self._follow(cur, label, nxt)
                if not self.s.text_base <= addr < self.s.text_end:
                    raise AttackFailure("decode", "edge leaves the text section")
                self.known[nxt] = addr
            cur = nxt
        return self.known[cur]

    def add_anchor(self, a: CodeAnchor) -> int:
        bid = self.orig.block_at(a.address_orig)
        if bid < 0:
            raise AttackFailure("no-path", "anchor outside any block")
        self.known.setdefault(bid, a.address_rand - (a.address_orig - self.orig.blocks[bid].start))
        return bid


def rediscover(proc, anchor: CodeAnchor, target: int, orig: BinaryImage, budget: AttackBudget | None = None,
               mode: str = "block", session: Session | None = None) -> int:
    """Randomized start of the block holding original address ``target``."""
    s = session or Session(proc, budget or AttackBudget(max_probes=10 ** 6))
    w = Walker(s, orig, mode)
    src = w.add_anchor(anchor)
    dst = orig.block_at(target)
    if dst < 0:
        raise AttackFailure("no-path", "target outside any block")
    try:
        steps = path_graph(orig).path(src, dst)
    except NoPath as exc:
        raise AttackFailure("no-path", str(exc)) from exc
    return w.rediscover(src, steps)


# --------------------------------------------------------- gadget chains

def _fits_block(orig: BinaryImage, start: np.ndarray, length: np.ndarray) -> np.ndarray:
    a = orig.blocks_at(start + orig.text_base)
    b = orig.blocks_at(start + length - 1 + orig.text_base)
    return (a >= 0) & (a == b)


def _reachable(orig: BinaryImage) -> np.ndarray:
    pg = path_graph(orig)
    roots = {orig.functions[f].entry for f in orig.entry_points}
    for t in orig.pointer_tables:
        roots.update(orig.functions[f].entry for f in t.entries)
    seen = np.zeros(len(orig.blocks), dtype=bool)
    for r in roots:
        if not seen[r]:
            order, _ = pg.tree(r)
            seen[order] = True
    return seen


def _gadget(orig: BinaryImage, start: int, length: int) -> Gadget:
    ins = tuple(isa.decode_all(orig.text, start, start + length))
    return Gadget(orig.text_base + start, ins, length, True, classify(ins))


def select_gapless_chain(orig: BinaryImage, chain_spec=DEFAULT_CHAIN, reachable: np.ndarray | None = None,
                         exclude_blocks: set[int] | None = None) -> list[Gadget]:
    """One reachable gapless two-instruction gadget per requested class, inside a single block.

    For the default chain the registers are chosen to compose:
    ``POP x; POP y; OP x, y; MOV z, x; SYS z``.
    """
    if reachable is None:
        reachable = _reachable(orig)
    g = simple_gadgets(orig)
    ok = g["gapless"] & _fits_block(orig, g["start"], g["length"])
    blk = orig.blocks_at(g["start"] + orig.text_base)
    ok &= reachable[np.maximum(blk, 0)] & (blk >= 0)
    if exclude_blocks:
        ok &= ~np.isin(blk, list(exclude_blocks))
    idx = np.nonzero(ok)[0]
    if tuple(chain_spec) == DEFAULT_CHAIN:
        plan = _plan_default(g, idx, None)
        if plan is None:
            raise AttackFailure("class-unsatisfiable", "no register-consistent gapless chain")
        return [_gadget(orig, int(g["start"][i]), int(g["length"][i])) for i in plan]
    out = []
    for c in chain_spec:
        if c == "return-only":
            hit = _bare_ret(orig, reachable)
            if hit is None:
                raise AttackFailure("class-unsatisfiable", c)
            out.append(hit)
            continue
        ci = GADGET_CLASSES.index(c)
        cand = idx[g["cls"][idx] == ci]
        if not len(cand):
            raise AttackFailure("class-unsatisfiable", c)
        out.append(_gadget(orig, int(g["start"][cand[0]]), int(g["length"][cand[0]])))
    return out


def _bare_ret(orig: BinaryImage, reachable: np.ndarray) -> Gadget | None:
    if not orig.blocks:
        return None
    starts = np.array([b.start - orig.text_base for b in orig.blocks], dtype=np.int64)
    offs = starts + orig.terminator_offsets
    text = orig.text_array
    for b in np.nonzero((text[offs] == isa.OPCODE["RET"]) & reachable)[0].tolist():
        return _gadget(orig, int(offs[b]), 1)
    return None


_ARITH = {"ADD": lambda a, b: a + b, "SUB": lambda a, b: a - b, "XOR": lambda a, b: a ^ b}


def _plan_default(g: dict, idx: np.ndarray, cost: np.ndarray | None) -> list[int] | None:
    """Cheapest register-consistent (pop x, pop y, op x y, mov z x, sys z) choice."""
    op_m = {o: isa.OPINFO[o].mnemonic for o in isa.OPINFO}
    best_pop: dict[int, int] = {}
    best_sys: dict[int, int] = {}
    best_mov: dict[tuple[int, int], int] = {}
    best_ar: dict[tuple[int, int], int] = {}

    def c(i):
        return 0 if cost is None else cost[i]

    def keep(d, k, i):
        if k not in d or c(i) < c(d[k]):
            d[k] = i

    for i in idx.tolist():
        m = op_m[int(g["op"][i])]
        r0, r1 = int(g["r0"][i]), int(g["r1"][i])
        if r0 == isa.SP or (m in ("MOV", "ADD", "SUB", "XOR") and r1 == isa.SP):
            continue
        if m == "POP":
            keep(best_pop, r0, i)
        elif m == "SYS":
            keep(best_sys, r0, i)
        elif m == "MOV" and r0 != r1:
            keep(best_mov, (r0, r1), i)
        elif m in _ARITH and r0 != r1:
            keep(best_ar, (r0, r1), i)
    best = None
    for (x, y), ia in best_ar.items():
        if x not in best_pop or y not in best_pop:
            continue
        for (z, src), im in best_mov.items():
            if src != x or z not in best_sys:
                continue
            plan = [best_pop[x], best_pop[y], ia, im, best_sys[z]]
            tot = sum(c(i) for i in plan)
            if best is None or tot < best[0]:
                best = (tot, plan)
    return None if best is None else best[1]


def gadget_setup(proc, target_block_orig: int, predecessor_rand: int, orig: BinaryImage,
                 predecessor_orig: int | None = None, session: Session | None = None) -> tuple[dict, set]:
    """Recover part of the target function's register renaming from a predecessor block.

    The predecessor is read and aligned instruction by instruction with the
    original (block shuffling keeps the instruction sequence).  Returns
    (original register -> randomized register, gap registers of the target
    block left unresolved).
    """
    s = session or Session(proc, AttackBudget(max_probes=10 ** 6))
    tb = orig.blocks[target_block_orig]
    if predecessor_orig is None:
        preds = [b.id for b in orig.blocks for d, lab, _ in b.succs
                 if d == target_block_orig and lab in ("jump", "true", "false", "fallthrough")
                 and b.function == tb.function]
        if not preds:
            raise AttackFailure("alignment", "no intra-procedural predecessor")
        predecessor_orig = preds[0]
    w = Walker(s, orig, "block")
    w.known[predecessor_orig] = predecessor_rand
    raw = w.block_bytes(predecessor_orig)
    orig_ins = orig.instructions(predecessor_orig)
    mapping: dict[int, int] = {isa.SP: isa.SP}
    pos = 0
    for oi in orig_ins[:-1]:
        ri = isa.try_decode(raw, pos)
        if ri is None or ri.mnemonic != oi.mnemonic or len(ri.regs) != len(oi.regs):
            raise AttackFailure("alignment", "instruction sequence differs")
        for a, b in zip(oi.regs, ri.regs):
            if mapping.get(a, b) != b:
                raise AttackFailure("alignment", "inconsistent register mapping")
            mapping[a] = b
        pos += ri.length
    needed = set()
    for ins in orig.instructions(target_block_orig):
        needed.update(r for r in ins.regs if r != isa.SP)
    unresolved = {r for r in needed if r not in mapping}
    return mapping, unresolved


# --------------------------------------------------------------- attack 1

class _AnchorFailure(AttackFailure):
    def __init__(self, which: int, inner: AttackFailure):
        super().__init__(inner.kind, inner.detail)
        self.which = which


def _attack1(s: Session, orig: BinaryImage, budget: AttackBudget, rng: np.random.Generator,
             rep: CampaignReport, walk_mode: str) -> list:
    """Collect anchors until a register-consistent gapless chain is reachable, then walk to it."""
    templates = templates_at(orig, budget.probe_length)
    pg = path_graph(orig)
    g = simple_gadgets(orig)
    ok = g["gapless"] & _fits_block(orig, g["start"], g["length"])
    gblk = orig.blocks_at(g["start"] + orig.text_base)
    idx = np.nonzero(ok & (gblk >= 0))[0]
    anchors: list[tuple[Walker, int, np.ndarray, np.ndarray]] = []
    while True:
        anchor, used = find_anchor(s, templates, budget, rng)
        rep.anchor_probes += used
        rep.anchors += 1
        w = Walker(s, orig, walk_mode)
        try:
            src = w.add_anchor(anchor)
        except AttackFailure:
            continue
        order, pred = pg.tree(src)
        anchors.append((w, src, pred, _bfs_dist(order, pred, len(orig.blocks))))
        try:
            return _chain_from_anchors(s, anchors, orig, pg, g, gblk, idx, rng)
        except BudgetExhausted:
            raise
        except _AnchorFailure as exc:
            del anchors[exc.which]  # most likely a false anchor
        except AttackFailure:
            continue


def _chain_from_anchors(s: Session, anchors, orig: BinaryImage, pg, g, gblk, idx,
                        rng: np.random.Generator, replans: int = 8) -> list:
    d = np.stack([a[3] for a in anchors])
    d = np.where(d < 0, np.iinfo(np.int64).max, d)
    which = np.argmin(d, axis=0)
    dist = d[which, np.arange(d.shape[1])]
    own = {a[1] for a in anchors}
    reach = dist < np.iinfo(np.int64).max
    cand = idx[reach[gblk[idx]] & ~np.isin(gblk[idx], list(own))]
    burnt: set[int] = set()
    for _ in range(replans):
        # drop gadgets in blocks already read while walking, and gadgets found disclosed
        dirty = set().union(*(a[0].terms.keys() for a in anchors))
        if len(cand):
            cand = cand[~np.isin(gblk[cand], list(dirty)) & ~np.isin(cand, list(burnt))]
        plan = _plan_default(g, cand, dist[gblk])
        if plan is None:
            raise AttackFailure("class-unsatisfiable", "no chain reachable from the anchors")
        addrs = []
        for i in plan:
            b = int(gblk[i])
            k = int(which[b])
            w, src, pred, _ = anchors[k]
            try:
                start = w.rediscover(src, pg.path_from_tree(pred, src, b))
            except BudgetExhausted:
                raise
            except AttackFailure as exc:
                raise _AnchorFailure(k, exc) from exc
            addrs.append(start + int(g["start"][i]) + orig.text_base - orig.blocks[b].start)
        read = [i for a, i in zip(addrs, plan) if s.read[a - s.text_base:a - s.text_base + int(g["length"][i])].any()]
        if not read:
            return _default_chain(g, plan, addrs, rng)
        burnt.update(read)
    raise AttackFailure("decode", "chain gadgets keep getting disclosed")


def _bfs_dist(order: np.ndarray, pred: np.ndarray, n: int) -> np.ndarray:
    """Hop counts from the BFS root (-1 when unreachable)."""
    dist = np.full(n, -1, dtype=np.int64)
    if len(order):
        dist[order[0]] = 0
        for v in order[1:].tolist():
            dist[v] = dist[pred[v]] + 1
    return dist


def _default_chain(g: dict, plan: list[int], addrs: list[int], rng: np.random.Generator) -> list:
    a_val = int(rng.integers(1, 1 << 16))
    b_val = int(rng.integers(1, 1 << 16))
    m = isa.OPINFO[int(g["op"][plan[2]])].mnemonic
    v = _ARITH[m](a_val, b_val) & isa.MASK32
    chain = [("gadget", addrs[0]), ("word", a_val), ("gadget", addrs[1]), ("word", b_val),
             ("gadget", addrs[2]), ("gadget", addrs[3]), ("gadget", addrs[4])]
    return [chain, [v], [(a, int(g["length"][i])) for a, i in zip(addrs, plan)]]


# --------------------------------------------------------------- attack 2

def _marshal_sources(orig: BinaryImage, bid: int, nparams: int) -> list | None:
    """Per argument, a randomization-invariant source or None when untraceable."""
    ins = orig.instructions(bid)
    if len(ins) < nparams + 1:
        return None
    f = orig.functions[orig.blocks[bid].function]
    param_slots = {4 * i for i in range(f.param_count)}
    last: dict[int, isa.Instruction] = {}
    for i in ins[:-1]:
        for r in i.def_set:
            last[r] = i
    out = []
    for j in range(nparams):
        d = last.get(j)
        if d is None:
            out.append(None)
        elif d.mnemonic in ("MOVIS", "MOVI"):
            out.append(("const", d.imm & isa.MASK32))
        elif d.mnemonic == "LOAD" and d.regs[1] == isa.SP and d.imm not in param_slots:
            out.append(("slot", d.imm))
        else:
            out.append(None)
    return out


def recover_param_sequence(proc, gadget_fn: int, orig: BinaryImage, anchors: list[CodeAnchor],
                           session: Session | None = None, walk_mode: str = "decode") -> tuple[tuple[int, ...], int]:
    """(argument index -> register, randomized entry of ``gadget_fn``)."""
    s = session or Session(proc, AttackBudget(max_probes=10 ** 6))
    k = orig.functions[gadget_fn].param_count
    sites = [b.id for b in orig.blocks if b.kind == "call-direct" and b.callee == gadget_fn]
    if not sites:
        raise AttackFailure("no-call-site")
    traceable = {}
    for b in sites:
        src = _marshal_sources(orig, b, k)
        if src is not None and all(x is not None for x in src):
            traceable[b] = src
    if not traceable:
        raise AttackFailure("untraceable-argument")
    pg = path_graph(orig)
    w = Walker(s, orig, walk_mode)
    best = None
    for a in anchors:
        try:
            src = w.add_anchor(a)
        except AttackFailure:
            continue
        _, pred = pg.tree(src)
        for b in traceable:
            if pred[b] >= 0 or b == src:
                steps = pg.path_from_tree(pred, src, b)
                if best is None or len(steps) < len(best[2]):
                    best = (b, src, steps)
    if best is None:
        raise AttackFailure("no-path", "no call site reachable from the anchors")
    site, src, steps = best
    w.rediscover(src, steps)
    raw = w.block_bytes(site)
    start = w.known[site]
    decoded = isa.decode_all(raw)
    term = decoded[-1]
    if term.mnemonic != "CALL":
        raise AttackFailure("decode", "call site does not end in a direct call")
    entry = start + len(raw) + term.imm
    last: dict[int, isa.Instruction] = {}
    for i in decoded[:-1]:
        for r in i.def_set:
            last[r] = i
    regs = []
    for want in traceable[site]:
        hits = []
        for r, d in last.items():
            if r == isa.SP:
                continue
            if want[0] == "const" and d.mnemonic in ("MOVIS", "MOVI") and (d.imm & isa.MASK32) == want[1]:
                hits.append(r)
            elif want[0] == "slot" and d.mnemonic == "LOAD" and d.regs[1] == isa.SP and d.imm == want[1]:
                hits.append(r)
        if len(hits) != 1:
            raise AttackFailure("untraceable-argument", f"{len(hits)} candidates for {want}")
        regs.append(hits[0])
    if len(set(regs)) != len(regs):
        raise AttackFailure("untraceable-argument", "two arguments traced to one register")
    return tuple(regs), entry


def _attack2(s: Session, orig: BinaryImage, rng: np.random.Generator, rep: CampaignReport,
             walk_mode: str) -> list:
    anchors = harvest_pointers(s, orig)
    rep.anchors = len(anchors)
    payloads = [f.id for f in orig.functions if f.payload and f.param_count > 0]
    if not payloads:
        raise AttackFailure("no-call-site", "no function with a usable side effect")
    last = None
    for fid in rng.permutation(payloads).tolist():
        try:
            regs, entry = recover_param_sequence(s.proc, fid, orig, anchors, session=s, walk_mode=walk_mode)
        except BudgetExhausted:
            raise
        except AttackFailure as exc:
            last = exc
            continue
        rep.recovered_args[fid] = regs
        vals = [int(v) for v in rng.integers(1, 1 << 30, len(regs))]
        return [[("call", entry, dict(zip(regs, vals)))], vals, [(entry, 0)]]
    raise last or AttackFailure("no-call-site")


# ----------------------------------------------------------- orchestration

def run_attack(proc: SimProcess, orig: BinaryImage, mode: str = "attack1", budget: AttackBudget | None = None,
               rng: np.random.Generator | int | None = None, walk_mode: str | None = None) -> CampaignReport:
    if mode not in MODES:
        raise ValueError(f"unknown attack mode {mode!r}")
    budget = budget or AttackBudget()
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    walk_mode = walk_mode or ("block" if mode == "attack1" else "decode")
    s = Session(proc, budget)
    rep = CampaignReport(mode, "failure")
    try:
        if mode == "attack1":
            chain, expect, ranges = _attack1(s, orig, budget, rng, rep, walk_mode)
        else:
            chain, expect, ranges = _attack2(s, orig, rng, rep, walk_mode)
        out = proc.invoke_chain(chain, expect)
        if out.success:
            rep.outcome = "success"
        elif out.status == "crashed":
            rep.outcome, rep.reason = "crash", out.reason
        else:
            rep.outcome, rep.reason = "failure", "chain-" + out.status
    except CrashObserved as exc:
        rep.outcome, rep.reason = "crash", exc.reason
    except BudgetExhausted:
        rep.outcome, rep.reason = "budget-exhausted", "budget"
    except AttackFailure as exc:
        rep.outcome, rep.reason = "failure", exc.kind
    rep.probes_used = s.probes
    read = proc.read_mask
    rep.bytes_read = int(np.count_nonzero(np.frombuffer(bytes(read), dtype=np.uint8)))
    rep.garble_events = int(np.count_nonzero(np.frombuffer(bytes(proc.garbled_mask), dtype=np.uint8)))
    rd = np.frombuffer(bytes(read), dtype=np.uint8).astype(bool)
    ex = np.frombuffer(bytes(proc.exec_mask), dtype=np.uint8).astype(bool)
    rep.chain_bytes_read = int((rd & ex).sum())
    rep.disjoint = rep.chain_bytes_read == 0
    if rep.success and not rep.disjoint:
        rep.outcome, rep.reason = "failure", "chain-read"
    return rep
