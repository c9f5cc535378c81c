"""Synthetic MIN32 binaries with controllable statistics.

Generated code follows a fixed calling convention that the randomizer and
the attacker model rely on:

* arguments 0..3 arrive in r0..r3, the return value leaves in r0, r7 is the
  stack pointer and every other register is caller-saved;
* a framed function starts with ``SUBI r7, F`` followed by one
  ``STORE [r7+4i], ri`` per parameter and ends with ``ADDI r7, F; RET``;
* values never live in registers across block boundaries, they are kept in
  frame slots or data-section globals;
* a call block ends with one marshalling instruction per callee parameter
  immediately before the CALL/CALLR; a return site that keeps the result
  starts with ``STORE [r7+s], r0``.
"""

from __future__ import annotations

import math
import random
import struct
from bisect import bisect_right
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.stats import norm

from .. import isa
from .image import DATA_BASE, TEXT_BASE, BasicBlock, BinaryImage, Function, PointerTable

GLOBAL_WORDS = 65536
GLOBAL_FIELDS = 64


def _mk(mnemonic: str, *regs: int, imm: int = 0, count: int = 0, swapped: bool = False) -> isa.Instruction:
    return isa.make(mnemonic, *regs, imm=imm, count=count, swapped=swapped, check=False)
MAX_TABLE = 64


class InfeasibleSpec(ValueError):
    pass


@dataclass
class BlockSizeDist:
    """Mixture of a discretized log-normal and a uniform tail.

    The defaults put about 20 % of blocks at <= 5 bytes and about 50 % at
    <= 10 bytes while keeping enough mass in long blocks for realistic
    window-fit chances.
    """

    mu: float = 2.2495
    sigma: float = 0.7119
    uniform_weight: float = 0.1195
    uniform_max: int = 128
    max_size: int = 2048

    def pmf(self) -> np.ndarray:
        if self.sigma <= 0 or not 0 <= self.uniform_weight <= 1 or self.uniform_max < 1:
            raise InfeasibleSpec("malformed block size distribution")
        n = np.arange(self.max_size + 1, dtype=float)
        hi = norm.cdf((np.log(n + 0.5) - self.mu) / self.sigma)
        lo = norm.cdf((np.log(np.maximum(n - 0.5, 1e-300)) - self.mu) / self.sigma)
        lo[1] = 0.0
        p = (1 - self.uniform_weight) * (hi - lo)
        p[0] = 0.0
        top = min(self.uniform_max, self.max_size)
        p[1:top + 1] += self.uniform_weight / top
        return p / p.sum()

    def cdf(self, n: int) -> float:
        return float(self.pmf()[:n + 1].sum())

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        c = np.cumsum(self.pmf())
        return np.minimum(np.searchsorted(c, rng.random(count), side="right"), self.max_size).astype(np.int64)


GADGET_PATTERNS = {
    # class -> builder(rng) giving a 3-byte "X; RET" pattern
    "load-const": lambda r: bytes([isa.OPCODE["POP"], r.randrange(7) << 3, 0xC3]),
    "move": lambda r: _rr_pattern(r, "MOV"),
    "arith": lambda r: _rr_pattern(r, r.choice(("ADD", "SUB", "XOR"))),
    "call": lambda r: bytes([isa.OPCODE["SYS"], r.randrange(7) << 3, 0xC3]),
}


def _rr_pattern(r: random.Random, mn: str) -> bytes:
    a = r.randrange(7)
    b = r.choice([x for x in range(7) if x != a])
    return isa.encode(_mk(mn, a, b)) + b"\xc3"


@dataclass
class GeneratorSpec:
    block_count: int = 2000
    block_size: BlockSizeDist = field(default_factory=BlockSizeDist)
    function_blocks_mean: float = 8.0
    data_in_code_ratio: float = 0.0162
    pointer_table_count: int = 4
    pointer_table_size: int = 32
    exported_ratio: float = 0.01
    dead_function_ratio: float = 0.05
    frameless_ratio: float = 0.25
    kind_weights: dict = field(default_factory=lambda: {
        "cond": 0.40, "jump": 0.20, "call": 0.20, "callr": 0.03, "return": 0.04})
    gadget_plant_rate: float = 0.25
    gadget_class_weights: dict = field(default_factory=lambda: {
        "load-const": 0.35, "move": 0.2, "arith": 0.25, "call": 0.2})
    payload_functions: int = 8
    payload_callers: int = 6
    untraceable_ratio: float = 0.3
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InfeasibleSpec(f"unknown generator spec keys: {sorted(unknown)}")
        if "block_size" in d and isinstance(d["block_size"], dict):
            d["block_size"] = BlockSizeDist(**d["block_size"])
        return cls(**d)

    def check(self) -> None:
        if self.block_count < 1:
            raise InfeasibleSpec("block_count must be >= 1")
        if not 0 <= self.data_in_code_ratio < 1:
            raise InfeasibleSpec("data_in_code_ratio must be in [0, 1)")
        if self.data_in_code_ratio > 0.5:
            raise InfeasibleSpec("data_in_code_ratio above 0.5 cannot be realized with jump tables")
        if self.function_blocks_mean < 1:
            raise InfeasibleSpec("function_blocks_mean must be >= 1")
        if self.pointer_table_count < 0 or self.pointer_table_size < 1:
            raise InfeasibleSpec("bad pointer table shape")
        for k, v in self.kind_weights.items():
            if k not in ("cond", "jump", "call", "callr", "return") or v < 0:
                raise InfeasibleSpec(f"bad kind weight {k}")
        for k in self.gadget_class_weights:
            if k not in GADGET_PATTERNS:
                raise InfeasibleSpec(f"unknown planted gadget class {k}")
        self.block_size.pmf()


# ---------------------------------------------------------------- planning

class _Fn:
    __slots__ = ("id", "sizes", "params", "rv", "framed", "nlocals", "exported", "addr_taken",
                 "payload", "dead", "kinds", "targets", "callee", "ptr_slot", "store_ret",
                 "table_count", "cap", "jump_short")

    def __init__(self, fid: int):
        self.id = fid
        self.sizes: list[int] = []
        self.params = 0
        self.rv = False
        self.framed = True
        self.nlocals = 0
        self.exported = False
        self.addr_taken = False
        self.payload = False
        self.dead = False
        self.kinds: list[str] = []
        self.targets: list[list[int]] = []
        self.callee: list[int] = []
        self.ptr_slot: list = []
        self.store_ret: list[bool] = []
        self.table_count: list[int] = []
        self.cap: list[int] = []

    @property
    def abi(self) -> bool:
        return (self.exported or self.addr_taken) and not self.payload

    @property
    def frame_size(self) -> int:
        return 4 * (self.params + self.nlocals) if self.framed else 0

    def prologue_len(self) -> int:
        return 4 + 4 * self.params if self.framed else 0

    def ret_tail(self) -> int:
        if self.framed:
            return 4 + (4 if self.rv else 0) + 1
        return (2 if self.rv else 0) + 1

    def cond_def(self) -> int:
        # a frame slot is only guaranteed readable when parameters were spilled
        return 4 if self.framed and self.params else 10


class _Generator:
    def __init__(self, spec: GeneratorSpec):
        spec.check()
        self.spec = spec
        self.nrng = np.random.default_rng(spec.seed)
        self.rng = random.Random(spec.seed * 1000003 + 17)
        self.bumps = 0

    # -- structure ---------------------------------------------------------
    def partition(self, n: int) -> list[int]:
        out, total = [], 0
        p = 1.0 / self.spec.function_blocks_mean
        while total < n:
            ln = int(self.nrng.geometric(p))
            ln = min(ln, n - total)
            out.append(ln)
            total += ln
        return out

    def attributes(self, fns: list[_Fn]) -> None:
        s, r = self.spec, self.rng
        nf = len(fns)
        n_exp = max(1, round(nf * s.exported_ratio))
        for f in fns[:n_exp]:
            f.exported = True
        pool = [f.id for f in fns if not f.exported and f.id >= nf // 2]
        r.shuffle(pool)
        for fid in pool[:min(s.payload_functions, len(pool))]:
            fns[fid].payload = True
        need = s.pointer_table_count * s.pointer_table_size
        lo = max(n_exp, nf // 10)
        cand = [f.id for f in fns[lo:] if not f.payload]
        r.shuffle(cand)
        self.vtable_fns = sorted(cand[:need]) if need else []
        for fid in self.vtable_fns:
            fns[fid].addr_taken = True
        for f in fns:
            if f.exported or f.payload or f.addr_taken:
                continue
            f.dead = r.random() < s.dead_function_ratio
        for f in fns:
            if f.payload:
                f.params = r.randint(1, 3)
                f.rv = False
            elif f.addr_taken:
                f.params = 0 if r.random() < 0.4 else r.randint(1, 2)
                f.rv = r.random() < 0.5
            else:
                f.params = r.choices(range(5), weights=(0.3, 0.25, 0.2, 0.15, 0.1))[0]
                f.rv = r.random() < 0.6
            f.framed = f.params > 0 or f.payload or r.random() >= s.frameless_ratio
            f.nlocals = r.randint(2, 6) if f.framed else 0

    def fit_attributes(self, f: _Fn, pool: list[int]) -> None:
        """Shrink frame/parameter needs when the drawn sizes cannot host them."""
        if f.payload:
            return
        srt = sorted(pool, reverse=True)

        def ok() -> bool:
            if len(srt) == 1:
                return srt[0] >= f.prologue_len() + f.ret_tail()
            return srt[0] >= f.prologue_len() + 2 and srt[1] >= f.ret_tail()

        while not ok():
            if f.params > 0:
                f.params -= 1
            elif f.rv:
                f.rv = False
            elif f.framed:
                f.framed = False
                f.nlocals = 0
            else:
                break
        if 1 in pool and f.params == 0 and not f.exported and f.rv and self.rng.random() < 0.5:
            f.rv = False
        if 1 in pool and f.params == 0 and not f.rv and self.rng.random() < 0.5:
            f.framed = False
            f.nlocals = 0

    def assign_sizes(self, f: _Fn, pool: list[int]) -> None:
        r = self.rng
        n = len(pool)
        pool = list(pool)
        r.shuffle(pool)
        if n == 1:
            need = f.prologue_len() + f.ret_tail() + (6 * f.params if f.payload else 0)
            if pool[0] < need:
                self.bumps += 1
                pool[0] = need
            f.sizes = pool
            return
        entry_need = f.prologue_len() + (6 * f.params if f.payload else 0) + 2
        last_need = f.ret_tail()

        def take(minimum: int) -> int:
            ok = [i for i, v in enumerate(pool) if v >= minimum]
            if ok:
                return pool.pop(r.choice(ok))
            i = max(range(len(pool)), key=lambda k: pool[k])
            self.bumps += 1
            pool.pop(i)
            return minimum

        first = take(entry_need)
        if not f.framed and not f.rv and 1 in pool:
            pool.remove(1)
            last = 1
        else:
            last = take(last_need)
        f.sizes = [first] + pool + [last]

    def plan_kinds(self, fns: list[_Fn], live_after_zero) -> None:
        s, r = self.spec, self.rng
        w = s.kind_weights
        total_text = 0
        table_bytes = 0
        target_ratio = s.data_in_code_ratio / (1 - s.data_in_code_ratio) if s.data_in_code_ratio else 0.0
        ptr_by_id = self.ptr_slots_by_fn
        for f in fns:
            L = len(f.sizes)
            f.kinds = [""] * L
            f.targets = [[] for _ in range(L)]
            f.callee = [-1] * L
            f.ptr_slot = [None] * L
            f.store_ret = [False] * L
            f.table_count = [0] * L
            f.cap = [0] * L
            f.jump_short = [False] * L
            has_pred = [False] * L
            has_pred[0] = True
            can_call = live_after_zero(f.id)
            for pos in range(L):
                size = f.sizes[pos]
                total_text += size
                base = (f.prologue_len() + (6 * f.params if f.payload else 0) if pos == 0 else 0)
                base += 4 if f.store_ret[pos] else 0
                if pos == L - 1:
                    f.kinds[pos] = "return"
                    need = base + f.ret_tail()
                    if size < need:
                        self.bumps += 1
                        f.sizes[pos] = need
                    continue
                nxt_free = not has_pred[pos + 1]
                opts: dict[str, float] = {}
                avail = size - base
                if avail >= 2:
                    opts["jump"] = w.get("jump", 0)
                if not nxt_free and avail >= f.ret_tail():
                    opts["return"] = w.get("return", 0)
                if pos + 2 <= L - 1 and avail >= f.cond_def() + 6:
                    opts["cond"] = w.get("cond", 0)
                if nxt_free and not f.payload and can_call and avail >= 5:
                    opts["call"] = w.get("call", 0)
                if nxt_free and f.abi and avail >= 12:
                    cands = [x for x in ptr_by_id if x[0] > f.id and x[2] <= (avail - 12) // 4]
                    if cands:
                        opts["callr"] = w.get("callr", 0)
                jt_need = f.cond_def() + 5
                deficit = target_ratio * total_text - table_bytes
                if avail >= jt_need and deficit >= 8:
                    opts["jtab"] = 10.0 * sum(opts.values()) + 1.0
                if not opts or sum(opts.values()) <= 0:
                    # only possible for tiny blocks: widen to a two-byte jump
                    self.bumps += 1
                    f.sizes[pos] = base + 2
                    total_text += base + 2 - size
                    opts = {"jump": 1.0}
                kind = r.choices(list(opts), weights=list(opts.values()))[0]
                f.kinds[pos] = kind
                if kind == "jump":
                    if nxt_free or avail < 5 or pos + 2 > L - 1:
                        tgt = pos + 1
                    else:
                        tgt = min(L - 1, pos + 1 + int(self.nrng.geometric(0.3)))
                    f.targets[pos] = [tgt]
                    has_pred[tgt] = True
                elif kind == "cond":
                    tgt = min(L - 1, pos + 1 + int(self.nrng.geometric(0.35)))
                    f.targets[pos] = [pos + 1, tgt]
                    has_pred[pos + 1] = True
                    has_pred[tgt] = True
                elif kind in ("call", "callr"):
                    has_pred[pos + 1] = True
                    f.targets[pos] = [pos + 1]
                    if f.framed and pos + 1 < L and f.sizes[pos + 1] >= 4 + 9 and f.nlocals:
                        f.store_ret[pos + 1] = True
                    if kind == "call":
                        f.cap[pos] = min(4, (avail - 5) // 4)
                    else:
                        cap = (avail - 12) // 4
                        cands = [x for x in ptr_by_id if x[0] > f.id and x[2] <= cap]
                        fid, slot, _k = r.choice(cands)
                        f.callee[pos] = fid
                        f.ptr_slot[pos] = slot
                elif kind == "jtab":
                    cnt = int(min(MAX_TABLE, max(2, min(deficit // 4, r.randint(2, 24)))))
                    f.table_count[pos] = cnt
                    table_bytes += 4 * cnt
                    total_text += 4 * cnt
                    tg = []
                    for k in range(cnt):
                        if k == 0 and nxt_free:
                            t = pos + 1
                        else:
                            t = r.randint(pos + 1, min(L - 1, pos + 8))
                        tg.append(t)
                        has_pred[t] = True
                    f.targets[pos] = tg
                elif kind == "return":
                    pass

    def call_graph(self, fns: list[_Fn]) -> None:
        r = self.rng
        nf = len(fns)
        buckets: list[list[tuple[int, int]]] = [[] for _ in range(5)]
        added = 0

        def add_slots(i: int) -> None:
            f = fns[i]
            for pos, k in enumerate(f.kinds):
                if k == "call":
                    buckets[f.cap[pos]].append((i, pos))

        def pick(kmin: int):
            total = sum(len(buckets[c]) for c in range(kmin, 5))
            if total == 0:
                return None
            x = r.randrange(total)
            for c in range(kmin, 5):
                if x < len(buckets[c]):
                    b = buckets[c]
                    b[x], b[-1] = b[-1], b[x]
                    return b.pop()
                x -= len(buckets[c])
            return None

        for j in range(nf):
            while added < j:
                add_slots(added)
                added += 1
            f = fns[j]
            if f.exported or f.dead:
                continue
            copies = 1 + (self.spec.payload_callers - 1 if f.payload else 0)
            if f.addr_taken and r.random() < 0.5:
                copies = 0  # reached through pointer tables only
            got = 0
            for _ in range(copies):
                slot = pick(f.params)
                if slot is None:
                    break
                fns[slot[0]].callee[slot[1]] = j
                got += 1
            if got == 0 and not f.addr_taken:
                f.dead = True
        while added < nf:
            add_slots(added)
            added += 1
        live_by_params: list[list[int]] = [[] for _ in range(5)]
        for f in fns:
            if not f.dead and not f.exported:
                live_by_params[f.params].append(f.id)
        for c in range(5):
            for (i, pos) in buckets[c]:
                callee = -1
                for _ in range(30):
                    j = r.randrange(i + 1, nf) if i + 1 < nf else -1
                    if j >= 0 and not fns[j].dead and not fns[j].exported and fns[j].params <= c:
                        callee = j
                        break
                if callee < 0:
                    for k in range(c + 1):
                        lst = live_by_params[k]
                        p = bisect_right(lst, i)
                        if p < len(lst):
                            callee = lst[r.randrange(p, len(lst))]
                            break
                if callee < 0:
                    raise InfeasibleSpec("no callee available for a call site")
                fns[i].callee[pos] = callee

    # -- emission ------------------------------------------------------------
    def run(self) -> BinaryImage:
        s, r = self.spec, self.rng
        sizes = s.block_size.sample(self.nrng, s.block_count).tolist()
        lengths = self.partition(s.block_count)
        fns = [_Fn(i) for i in range(len(lengths))]
        self.attributes(fns)
        pos = 0
        self._entry_of = {}
        for f, ln in zip(fns, lengths):
            self.fit_attributes(f, sizes[pos:pos + ln])
            self.assign_sizes(f, sizes[pos:pos + ln])
            self._entry_of[f.id] = pos
            pos += ln
        self.tables: list[list[int]] = []
        vt = list(self.vtable_fns)
        for t in range(s.pointer_table_count):
            ent = vt[t * s.pointer_table_size:(t + 1) * s.pointer_table_size]
            while len(ent) < s.pointer_table_size and vt:
                ent.append(r.choice(vt))
            if ent:
                r.shuffle(ent)
                self.tables.append(ent)
        self.ptr_slots_by_fn = [(fid, (ti, ei), fns[fid].params)
                                for ti, ent in enumerate(self.tables) for ei, fid in enumerate(ent)]
        live_zero = sorted(f.id for f in fns if f.params == 0 and not f.exported and not f.dead)

        def live_after_zero(i: int) -> bool:
            return bisect_right(live_zero, i) < len(live_zero)

        self.plan_kinds(fns, live_after_zero)
        self.call_graph(fns)
        return self.emit(fns)

    def emit(self, fns: list[_Fn]) -> BinaryImage:
        s, r = self.spec, self.rng
        # layout
        block_ids: list[list[int]] = []
        starts: list[int] = []
        table_addr: dict[int, int] = {}
        addr = TEXT_BASE
        bid = 0
        for f in fns:
            ids = []
            for p, size in enumerate(f.sizes):
                ids.append(bid)
                starts.append(addr)
                addr += size
                if f.kinds[p] == "jtab":
                    table_addr[bid] = addr
                    addr += 4 * f.table_count[p]
                bid += 1
            block_ids.append(ids)
        text = bytearray(addr - TEXT_BASE)

        data = bytearray(4 * GLOBAL_WORDS)
        for g in range(GLOBAL_WORDS):
            struct.pack_into("<I", data, 4 * g, r.getrandbits(32) if g % 2 else r.randrange(1000))
        ptr_tables: list[PointerTable] = []
        entry_addr = [starts[block_ids[f.id][0]] for f in fns]
        for ent in self.tables:
            off = len(data)
            for fid in ent:
                data += struct.pack("<I", entry_addr[fid])
            ptr_tables.append(PointerTable(off, tuple(ent)))

        self.plant_weights = (list(s.gadget_class_weights), list(s.gadget_class_weights.values()))
        blocks: list[BasicBlock] = []
        functions: list[Function] = []
        embedded: list[tuple[int, int]] = []
        for f in fns:
            ids = block_ids[f.id]
            init_slots: set[int] = set(range(0, 4 * f.params, 4))
            for p, size in enumerate(f.sizes):
                b = ids[p]
                start = starts[b]
                kind = f.kinds[p]
                code, succs = self.emit_block(f, p, start, size, ids, starts, entry_addr, table_addr.get(b),
                                              init_slots, fns, ptr_tables)
                assert len(code) == size, (f.id, p, kind, len(code), size)
                text[start - TEXT_BASE:start - TEXT_BASE + size] = code
                tk = {"jump": "jump", "cond": "cond-branch", "call": "call-direct", "callr": "call-indirect",
                      "return": "return", "jtab": "table-jump"}[kind]
                bb = BasicBlock(b, start, size, f.id, tk, succs, callee=f.callee[p],
                                ptr_slot=f.ptr_slot[p])
                if kind == "jtab":
                    ta = table_addr[b]
                    cnt = f.table_count[p]
                    for k, t in enumerate(f.targets[p]):
                        struct.pack_into("<I", text, ta - TEXT_BASE + 4 * k, starts[ids[t]])
                    bb.table_addr = ta
                    bb.table_count = cnt
                    embedded.append((ta, 4 * cnt))
                blocks.append(bb)
            functions.append(Function(
                id=f.id, entry=ids[0], blocks=list(ids), param_count=f.params, exported=f.exported,
                returns_value=f.rv, frame_size=f.frame_size, address_taken=f.addr_taken, payload=f.payload))
        img = BinaryImage(bytes(text), bytes(data), blocks, functions, ptr_tables,
                          entry_points=[f.id for f in fns if f.exported], embedded=embedded,
                          meta={"generator": s.to_dict(), "size_bumps": self.bumps})
        return img

    # -- instruction selection --------------------------------------------
    def emit_block(self, f: _Fn, p: int, start: int, size: int, ids, starts, entry_addr, taddr,
                   init_slots: set[int], fns, ptr_tables) -> tuple[bytes, tuple]:
        r = self.rng
        kind = f.kinds[p]
        end = start + size
        local_slots = [4 * (f.params + i) for i in range(f.nlocals)]
        readable = set(init_slots)
        prefix: list[isa.Instruction] = []
        if p == 0 and f.framed:
            prefix.append(_mk("SUBI", 7, imm=f.frame_size))
            for i in range(f.params):
                prefix.append(_mk("STORE", 7, i, imm=4 * i))
            if f.payload:
                for i in range(f.params):
                    reg = r.randrange(7)
                    prefix.append(_mk("LOAD", reg, 7, imm=4 * i))
                    prefix.append(_mk("SYS", reg))
        if f.store_ret[p]:
            caller_callee = fns[f.callee[p - 1]] if f.callee[p - 1] >= 0 else None
            if caller_callee is not None and caller_callee.rv:
                s_ = r.choice(local_slots)
                prefix.append(_mk("STORE", 7, 0, imm=s_))
                readable.add(s_)

        succs: list[tuple[int, str, int]] = []
        suffix: list[isa.Instruction] = []
        term: isa.Instruction
        tg = f.targets[p]
        if kind == "return":
            if f.rv:
                if f.framed:
                    suffix.append(_mk("LOAD", 0, 7, imm=r.choice(sorted(readable))) if readable
                                  else _mk("XOR", 0, 0))
                else:
                    suffix.append(_mk("XOR", 0, 0))
            if f.framed:
                suffix.append(_mk("ADDI", 7, imm=f.frame_size))
            term = _mk("RET")
        elif kind == "jump":
            disp = starts[ids[tg[0]]] - end
            room = size - self._len(prefix)
            short = -128 <= disp <= 127 and (room < 5 or r.random() < 0.6)
            term = _mk("JMP8" if short else "JMP", imm=disp)
            succs.append((ids[tg[0]], "jump", 0))
        elif kind == "cond":
            rc = r.randrange(7)
            suffix += self._load_value(f, rc, readable)
            disp = starts[ids[tg[1]]] - end
            short = -128 <= disp <= 127 and r.random() < 0.7
            room = size - self._len(prefix) - self._len(suffix) - (3 if short else 6)
            if room >= 4 and r.random() < 0.6:
                suffix.append(_mk("ANDI", rc, imm=1 << r.randrange(12)))
                mn = r.choice(("JZ", "JNZ"))
            else:
                mn = r.choice(("JLTZ", "JGEZ", "JZ", "JNZ"))
            term = _mk(mn + "8" if short else mn, rc, imm=disp)
            succs += [(ids[tg[1]], "true", 0), (ids[tg[0]], "false", 0)]
        elif kind == "call":
            callee = fns[f.callee[p]]
            suffix += self._marshals(f, callee, readable)
            term = _mk("CALL", imm=entry_addr[callee.id] - end)
            succs = [(self._entry_block(callee.id), "call", 0), (ids[tg[0]], "fallthrough", 0)]
        elif kind == "callr":
            callee = fns[f.callee[p]]
            ti, ei = f.ptr_slot[p]
            rb, rf = r.sample((4, 5, 6), 2)
            suffix.append(_mk("MOVI", rb, imm=DATA_BASE + ptr_tables[ti].offset))
            suffix.append(_mk("LOAD", rf, rb, imm=4 * ei))
            suffix += self._marshals(f, callee, readable)
            term = _mk("CALLR", rf)
            succs.append((ids[tg[0]], "fallthrough", 0))
        elif kind == "jtab":
            ri = r.randrange(7)
            suffix += self._load_value(f, ri, readable)
            term = _mk("JTAB", ri, count=f.table_count[p], imm=taddr - end)
            succs += [(ids[t], "table", k) for k, t in enumerate(tg)]
        else:
            raise AssertionError(kind)

        body_len = size - self._len(prefix) - self._len(suffix) - term.length
        if body_len < 0:
            raise AssertionError(f"block too small: fn {f.id} pos {p} kind {kind} size {size}")
        filler = self._filler(f, body_len, readable, local_slots, p == 0)
        if p == 0:
            init_slots.update(readable)
        code = b"".join(isa.encode(i) for i in prefix + filler + suffix + [term])
        return code, tuple(succs)

    def _entry_block(self, fid: int) -> int:
        return self._entry_of[fid]

    @staticmethod
    def _len(seq) -> int:
        return sum(i.length for i in seq)

    def _load_value(self, f: _Fn, reg: int, readable: set[int]) -> list[isa.Instruction]:
        r = self.rng
        if f.framed and readable:
            return [_mk("LOAD", reg, 7, imm=r.choice(sorted(readable)))]
        rb = r.randrange(7)
        return self._global_access("LOAD", reg, rb)

    def _marshals(self, f: _Fn, callee: _Fn, readable: set[int]) -> list[isa.Instruction]:
        r = self.rng
        out = []
        params = sorted(x for x in readable if x < 4 * f.params)
        locals_ = sorted(x for x in readable if x >= 4 * f.params)
        for i in range(callee.params):
            roll = r.random()
            if callee.payload and params and roll < self.spec.untraceable_ratio:
                out.append(_mk("LOAD", i, 7, imm=r.choice(params)))
            elif (params or locals_) and roll < 0.5 and not callee.payload:
                out.append(_mk("LOAD", i, 7, imm=r.choice(params + locals_)))
            elif locals_ and roll < 0.6:
                out.append(_mk("LOAD", i, 7, imm=r.choice(locals_)))
            else:
                out.append(_mk("MOVIS", i, imm=r.randrange(-30000, 30000)))
        r.shuffle(out)
        return out

    def _filler(self, f: _Fn, n: int, readable: set[int], local_slots: list[int], is_entry: bool
                ) -> list[isa.Instruction]:
        r = self.rng
        out: list[isa.Instruction] = []
        defined: list[int] = []
        stored_locals = set()
        while n > 0:
            if n == 1:
                out.append(_mk("NOP"))
                break
            opts = []
            if n >= 4:
                opts += [("movis", 2)]
                if f.framed and readable:
                    opts += [("load_slot", 3)]
                if f.framed and defined and local_slots:
                    opts += [("store_slot", 4 if is_entry else 2)]
                if defined:
                    opts += [("ri16", 2)]
            if n >= 6 and n != 7:
                opts += [("movi", 2)]
            if n >= 10 and n != 11:
                opts += [("gload", 1)]
                if defined:
                    opts += [("gstore", 2)]
            if defined:
                opts += [("rr", 4), ("unary", 1)]
                if n >= 3:
                    opts += [("shi", 1)]
            opts += [("zero", 1)]
            names = [o for o, _ in opts]
            kind = r.choices(names, weights=[w for _, w in opts])[0]
            reg = r.randrange(7)
            if kind == "movis":
                ins = [_mk("MOVIS", reg, imm=r.randrange(-2000, 2000))]
            elif kind == "movi":
                ins = [_mk("MOVI", reg, imm=self._movi_imm())]
            elif kind == "load_slot":
                ins = [_mk("LOAD", reg, 7, imm=r.choice(sorted(readable)))]
            elif kind == "store_slot":
                slot = r.choice(local_slots)
                ins = [_mk("STORE", 7, r.choice(defined), imm=slot)]
                readable.add(slot)
                stored_locals.add(slot)
                reg = -1
            elif kind == "ri16":
                reg = r.choice(defined)
                mn = r.choice(("ADDI", "SUBI", "XORI", "ANDI", "ORI", "MULI"))
                ins = [_mk(mn, reg, imm=r.randrange(-8000, 8000))]
            elif kind == "gload":
                rb = r.randrange(7)
                ins = self._global_access("LOAD", reg, rb)
                defined.append(rb)
            elif kind == "gstore":
                src = r.choice(defined)
                rb = r.choice([x for x in range(7) if x != src])
                ins = self._global_access("STORE", rb, src)
                reg = rb
            elif kind == "rr":
                mn = r.choice(("ADD", "SUB", "XOR", "AND", "OR", "MUL", "SHL", "SHR", "SAR", "ROL",
                               "SLT", "MOV", "MOV", "XCHG"))
                src = r.choice(defined)
                dst = r.choice(defined) if mn != "MOV" else reg
                if mn == "XCHG" and dst == src:
                    mn = "ADD"
                ins = [_mk(mn, dst, src, swapped=r.random() < 0.3)]
                reg = dst
                if mn == "XCHG":
                    defined.append(src)
            elif kind == "unary":
                reg = r.choice(defined)
                ins = [_mk(r.choice(("NOT", "NEG")), reg)]
            elif kind == "shi":
                reg = r.choice(defined)
                ins = [_mk(r.choice(("SHLI", "SHRI")), reg, imm=r.randrange(1, 31))]
            else:
                ins = [_mk("XOR", reg, reg)]
            out += ins
            n -= self._len(ins)
            if reg >= 0 and reg not in defined:
                defined.append(reg)
        return out

    def _global_access(self, mn: str, a: int, b: int) -> list[isa.Instruction]:
        # base of a global record plus a field offset
        r = self.rng
        field = 4 * r.randrange(GLOBAL_FIELDS)
        base = DATA_BASE + 4 * r.randrange(GLOBAL_WORDS - GLOBAL_FIELDS)
        rb = b if mn == "LOAD" else a
        mem = _mk("LOAD", a, b, imm=field) if mn == "LOAD" else _mk("STORE", a, b, imm=field)
        return [_mk("MOVI", rb, imm=base), mem]

    def _movi_imm(self) -> int:
        r = self.rng
        if r.random() < self.spec.gadget_plant_rate and self.plant_weights[0]:
            cls = r.choices(self.plant_weights[0], weights=self.plant_weights[1])[0]
            pat = GADGET_PATTERNS[cls](r)
            if r.random() < 0.5:
                raw = pat + bytes([r.randrange(256)])
            else:
                raw = bytes([r.randrange(256)]) + pat
            return int.from_bytes(raw, "little")
        if r.random() < 0.2:
            return r.randrange(1 << 16)
        return r.getrandbits(32)


def generate(spec: GeneratorSpec) -> BinaryImage:
    """Build a synthetic image; deterministic for a given spec (including seed)."""
    return _Generator(spec).run()


class SpecSyntaxError(ValueError):
    """Malformed spec text; ``line`` is 1-based or None."""

    def __init__(self, msg: str, line: int | None = None):
        super().__init__(f"line {line}: {msg}" if line else msg)
        self.line = line


def parse_spec(text: str) -> GeneratorSpec:
    """Parse YAML spec text, reporting the offending line on errors."""
    import yaml

    try:
        node = yaml.compose(text)
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise SpecSyntaxError(exc.problem or str(exc), mark.line + 1 if mark else None) from None
    if raw is None:
        return GeneratorSpec()
    if not isinstance(raw, dict):
        raise SpecSyntaxError("spec must be a mapping", 1)
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            lines[k.value] = k.start_mark.line + 1
    known = {f.name for f in fields(GeneratorSpec)}
    for k in raw:
        if k not in known:
            raise SpecSyntaxError(f"unknown key {k!r}", lines.get(k))
    try:
        spec = GeneratorSpec.from_dict(raw)
    except TypeError as exc:
        raise SpecSyntaxError(str(exc), lines.get("block_size")) from None
    defaults = GeneratorSpec()
    for k, v in raw.items():
        ref = getattr(defaults, k)
        if isinstance(ref, (int, float)) and not isinstance(ref, bool):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise SpecSyntaxError(f"{k} must be a number, got {v!r}", lines.get(k))
    return spec


def bundled_spec(name: str) -> GeneratorSpec:
    """Load one of the generator specs shipped with the package."""
    from importlib import resources

    return parse_spec(resources.files("dcrlab").joinpath("data", f"{name}.spec").read_text())


def realized_size_cdf(img: BinaryImage, n: int) -> float:
    sizes = np.array([b.size for b in img.blocks])
    return float((sizes <= n).mean()) if len(sizes) else math.nan
