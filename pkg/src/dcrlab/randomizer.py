"""Load-time code randomization at two strengths.

tier1 moves every block to a random place and renames registers with one
permutation per function.  tier2 additionally inserts NOPs, applies
substitutions from the instruction catalog, reorders independent
neighbouring instructions and permutes the argument registers (and the
matching frame slots) of internal functions.

The engine works on the aligned instruction stream of the original image as
numpy arrays, so randomizing a large image costs a few hundred milliseconds.
Register roles that cross function boundaries are handled explicitly:

* spill of an incoming parameter in the prologue uses the function's own
  mapping of that parameter;
* argument marshalling before a call writes the register the callee expects;
* the store of a call's result at the return site reads the callee's
  return register.

Functions reachable from outside (exported or address-taken) keep r0..r3 in
place and never get a parameter permutation.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import isa
from .bitmaps import PermissionBitmaps
from .program.image import BasicBlock, BinaryImage, Function, PointerTable

TIERS = ("none", "tier1", "tier2")


class FixupOverflow(ValueError):
    """A relocated displacement no longer fits its encoding."""


@dataclass
class RandomizationSpec:
    tier: str = "tier1"
    seed: int = 0
    nop_insertion_max: int = 2
    substitution_probability: float = 0.5
    reorder_window: int = 4
    randomize_param_sequences: bool = True
    substitution_rules: tuple = isa.SUBSTITUTION_RULES
    gap_max: int = 4

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ValueError(f"unknown tier {self.tier!r}")
        if not 0 <= self.substitution_probability <= 1:
            raise ValueError("substitution_probability must be within [0, 1]")
        if self.nop_insertion_max < 0 or self.reorder_window < 1 or self.gap_max < 0:
            raise ValueError("negative randomization intensity")
        self.substitution_rules = tuple(self.substitution_rules)
        unknown = set(self.substitution_rules) - set(isa.SUBSTITUTION_RULES)
        if unknown:
            raise ValueError(f"unknown substitution rules {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["substitution_rules"] = list(self.substitution_rules)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RandomizationSpec":
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ValueError(f"unknown randomization keys {sorted(bad)}")
        return cls(**d)


@dataclass
class RandomizedImage:
    image: BinaryImage
    placement: np.ndarray  # original block id -> new start address
    register_perm: np.ndarray  # (functions, 8): register i of the original -> register_perm[f, i]
    param_perm: dict[int, tuple[int, ...]]  # argument i -> argument register param_perm[f][i]
    bitmap: PermissionBitmaps
    spec: RandomizationSpec = field(default_factory=RandomizationSpec)

    def argument_registers(self, fid: int) -> tuple[int, ...]:
        """Register that carries each argument of ``fid`` after randomization."""
        sig = self.register_perm[fid]
        return tuple(int(sig[p]) for p in self.param_perm[fid])

    def rand_section(self) -> bytes:
        head = json.dumps({"spec": self.spec.to_dict(), "blocks": len(self.placement),
                           "functions": len(self.register_perm)}, sort_keys=True).encode()
        pp = np.full((len(self.register_perm), 4), 255, dtype=np.uint8)
        for f, p in self.param_perm.items():
            pp[f, :len(p)] = p
        return (struct.pack("<I", len(head)) + head + self.placement.astype("<u4").tobytes()
                + self.register_perm.astype(np.uint8).tobytes() + pp.tobytes())

    @staticmethod
    def parse_rand_section(raw: bytes) -> tuple[RandomizationSpec, np.ndarray, np.ndarray, dict]:
        (hl,) = struct.unpack_from("<I", raw, 0)
        head = json.loads(raw[4:4 + hl])
        nb, nf = head["blocks"], head["functions"]
        pos = 4 + hl
        placement = np.frombuffer(raw, dtype="<u4", count=nb, offset=pos).astype(np.int64)
        pos += 4 * nb
        perm = np.frombuffer(raw, dtype=np.uint8, count=8 * nf, offset=pos).reshape(nf, 8).astype(np.int64)
        pos += 8 * nf
        pp = np.frombuffer(raw, dtype=np.uint8, count=4 * nf, offset=pos).reshape(nf, 4)
        param = {f: tuple(int(x) for x in pp[f] if x != 255) for f in range(nf)}
        return RandomizationSpec.from_dict(head["spec"]), placement, perm, param


# ------------------------------------------------------------------ tables

def _op_tables():
    t = {}
    n = 256
    t["nregs"] = isa.decode_tables()["nregs"]
    t["length"] = isa.decode_tables()["length"]
    swapped = np.zeros(n, dtype=bool)
    wf = np.zeros(n, dtype=bool)
    rf = np.zeros(n, dtype=bool)
    xchg = np.zeros(n, dtype=bool)
    spi = np.zeros(n, dtype=bool)
    memr = np.zeros(n, dtype=bool)
    memw = np.zeros(n, dtype=bool)
    sys_ = np.zeros(n, dtype=bool)
    for op, info in isa.OPINFO.items():
        nr = isa.FORMATS[info.fmt][1]
        probe = isa.Instruction(op, tuple(range(1, nr + 1)), 0, 1 if info.fmt == "JTAB" else 0)
        swapped[op] = info.swapped
        wf[op] = nr > 0 and 1 in probe.def_set
        rf[op] = nr > 0 and 1 in probe.use_set
        xchg[op] = info.mnemonic == "XCHG"
        spi[op] = info.mnemonic in ("PUSH", "POP", "PUSHI")
        memr[op] = probe.reads_memory
        memw[op] = probe.writes_memory
        sys_[op] = info.mnemonic == "SYS"
    t.update(swapped=swapped, wf=wf, rf=rf, xchg=xchg, spi=spi, memr=memr, memw=memw, sys=sys_)
    return t


_OPT = None


def op_tables() -> dict:
    global _OPT
    if _OPT is None:
        _OPT = _op_tables()
    return _OPT


OP = isa.OPCODE
_LONG_COND = {OP[s]: OP[l] for s, l in isa.BRANCH_LONG.items() if l != "JMP"}
_RR_CANON = {isa.OPCODE[m]: isa.SWAPPED_OPCODE[m] for m in isa.RR_MNEMONICS}
_RR_FLIP = np.arange(256)
for _c, _s in _RR_CANON.items():
    _RR_FLIP[_c], _RR_FLIP[_s] = _s, _c

ROLE_PLAIN, ROLE_SPILL, ROLE_MARSHAL, ROLE_RETREAD = 0, 1, 2, 3


@dataclass
class _Prep:
    off: np.ndarray  # instruction offsets (aligned stream, sorted)
    owner: np.ndarray
    fn: np.ndarray
    length: np.ndarray
    raw: np.ndarray  # (N, 6) bytes
    is_term: np.ndarray
    first: np.ndarray  # per block: index of first instruction
    term: np.ndarray  # per block: index of terminator
    role: np.ndarray
    role_arg: np.ndarray
    role_fn: np.ndarray
    sp_slot: np.ndarray  # LOAD/STORE addressing [r7+imm]
    succ_jump: np.ndarray
    succ_true: np.ndarray
    succ_fall: np.ndarray  # false or fallthrough successor
    callee_entry: np.ndarray
    tables: dict  # block id -> tuple of target blocks
    code_ok: np.ndarray  # per instruction: every byte has the code bit set ... computed per call
    abi: np.ndarray
    params: np.ndarray


def _prepare(img: BinaryImage) -> _Prep:
    cache = img.__dict__.setdefault("_cache", {})
    if "rand_prep" in cache:
        return cache["rand_prep"]
    t = op_tables()
    text = img.text_array
    off = img.insn_offsets
    owner = img.insn_owner
    n = len(off)
    pad = np.concatenate([text, np.zeros(6, dtype=np.uint8)])
    raw = pad[off[:, None] + np.arange(6)[None, :]] if n else np.zeros((0, 6), dtype=np.uint8)
    op = raw[:, 0].astype(np.int64)
    length = t["length"][op]
    raw = np.where(np.arange(6)[None, :] < length[:, None], raw, 0).astype(np.uint8)
    term_k = isa.decode_tables()["term"][op]
    is_term = term_k != isa.TERMINATOR_KINDS.index("none")
    nb = len(img.blocks)
    first = np.full(nb, -1, dtype=np.int64)
    term = np.full(nb, -1, dtype=np.int64)
    if n:
        chg = np.ones(n, dtype=bool)
        chg[1:] = owner[1:] != owner[:-1]
        first[owner[chg]] = np.nonzero(chg)[0]
        term[owner[is_term]] = np.nonzero(is_term)[0]
    bfn = np.array([b.function for b in img.blocks], dtype=np.int64)
    fn = bfn[owner] if n else np.zeros(0, dtype=np.int64)
    role = np.zeros(n, dtype=np.int8)
    role_arg = np.zeros(n, dtype=np.int64)
    role_fn = np.full(n, -1, dtype=np.int64)
    rb = raw[:, 1].astype(np.int64)
    imm16 = (raw[:, 2].astype(np.int64) | (raw[:, 3].astype(np.int64) << 8))
    imm16 = np.where(imm16 >= 0x8000, imm16 - 0x10000, imm16)
    sp_slot = ((op == OP["LOAD"]) & ((rb & 7) == isa.SP)) | ((op == OP["STORE"]) & ((rb >> 3) == isa.SP))
    params = np.array([f.param_count for f in img.functions], dtype=np.int64)
    rv = [f.returns_value for f in img.functions]
    abi = np.array([f.abi_fixed for f in img.functions], dtype=bool)
    # prologue spills
    for f in img.functions:
        if f.frame_size <= 0 or not f.param_count:
            continue
        i0 = first[f.entry]
        for i in range(f.param_count):
            k = i0 + 1 + i
            if k < term[f.entry] and op[k] == OP["STORE"] and rb[k] == (isa.SP << 3 | i) and imm16[k] == 4 * i:
                role[k] = ROLE_SPILL
                role_arg[k] = i
    succ_jump = np.full(nb, -1, dtype=np.int64)
    succ_true = np.full(nb, -1, dtype=np.int64)
    succ_fall = np.full(nb, -1, dtype=np.int64)
    callee_entry = np.full(nb, -1, dtype=np.int64)
    tables: dict[int, tuple] = {}
    for b in img.blocks:
        tab = []
        for d, lab, slot in b.succs:
            if lab == "jump":
                succ_jump[b.id] = d
            elif lab == "true":
                succ_true[b.id] = d
            elif lab in ("false", "fallthrough"):
                succ_fall[b.id] = d
            elif lab == "call":
                callee_entry[b.id] = d
            elif lab == "table":
                tab.append((slot, d))
        if tab:
            tables[b.id] = tuple(d for _, d in sorted(tab))
        if b.kind in ("call-direct", "call-indirect") and b.callee >= 0:
            c = b.callee
            if b.kind == "call-direct" and callee_entry[b.id] < 0:
                callee_entry[b.id] = img.functions[c].entry
            k = int(params[c])
            ti = term[b.id]
            for idx in range(ti - k, ti):
                if idx < first[b.id]:
                    continue
                if op[idx] in (OP["MOVIS"], OP["LOAD"], OP["MOVI"]) and (rb[idx] >> 3) < 4:
                    role[idx] = ROLE_MARSHAL
                    role_arg[idx] = rb[idx] >> 3
                    role_fn[idx] = c
            site = succ_fall[b.id]
            if rv[c] and site >= 0:
                k0 = first[site]
                if op[k0] == OP["STORE"] and rb[k0] == (isa.SP << 3):
                    role[k0] = ROLE_RETREAD
                    role_fn[k0] = c
    prep = _Prep(off, owner, fn, length, raw, is_term, first, term, role, role_arg, role_fn, sp_slot,
                 succ_jump, succ_true, succ_fall, callee_entry, tables, None, abi, params)
    cache["rand_prep"] = prep
    return prep


# ----------------------------------------------------------------- engine

def _draw_perms(rng: np.random.Generator, abi: np.ndarray, params: np.ndarray, tier2_params: bool):
    nf = len(abi)
    sig = np.tile(np.arange(8), (nf, 1))
    full = np.argsort(rng.random((nf, 7)), axis=1)
    high = 4 + np.argsort(rng.random((nf, 3)), axis=1)
    sig[~abi, :7] = full[~abi]
    sig[abi, 4:7] = high[abi]
    pi = np.tile(np.arange(4), (nf, 1))
    if tier2_params:
        r = rng.random((nf, 4))
        r = np.where(np.arange(4)[None, :] < params[:, None], r, 2.0 + np.arange(4)[None, :])
        p = np.argsort(r, axis=1)
        movable = ~abi & (params >= 2)
        pi[movable] = p[movable]
    return sig, pi


def _fields(raw_rb: np.ndarray):
    return (raw_rb >> 3) & 7, raw_rb & 7


def _remap_registers(prep: _Prep, sig: np.ndarray, pi: np.ndarray, slot_remap: bool) -> np.ndarray:
    t = op_tables()
    raw = prep.raw.copy()
    if not len(raw):
        return raw
    op = raw[:, 0].astype(np.int64)
    nr = t["nregs"][op]
    rb = raw[:, 1].astype(np.int64)
    a, b = _fields(rb)
    f = prep.fn
    na = np.where(nr >= 1, sig[f, a], a)
    nb = np.where(nr == 2, sig[f, b], b)
    role = prep.role
    c = np.maximum(prep.role_fn, 0)
    arg = prep.role_arg
    m = role == ROLE_SPILL
    nb = np.where(m, sig[f, pi[f, np.minimum(arg, 3)]], nb)
    m = role == ROLE_MARSHAL
    na = np.where(m, sig[c, pi[c, np.minimum(arg, 3)]], na)
    m = role == ROLE_RETREAD
    nb = np.where(m, sig[c, 0], nb)
    has = nr >= 1
    raw[has, 1] = ((na << 3) | nb)[has].astype(np.uint8)
    if slot_remap:
        imm = raw[:, 2].astype(np.int64) | (raw[:, 3].astype(np.int64) << 8)
        imm = np.where(imm >= 0x8000, imm - 0x10000, imm)
        k = prep.params[f]
        sel = prep.sp_slot & (imm >= 0) & (imm < 4 * k) & (imm % 4 == 0)
        new = 4 * pi[f, np.clip(imm // 4, 0, 3)]
        imm = np.where(sel, new, imm) & 0xFFFF
        raw[sel, 2] = (imm[sel] & 0xFF).astype(np.uint8)
        raw[sel, 3] = (imm[sel] >> 8).astype(np.uint8)
    return raw


def _dep_masks(raw: np.ndarray):
    t = op_tables()
    op = raw[:, 0].astype(np.int64)
    nr = t["nregs"][op]
    a, b = _fields(raw[:, 1].astype(np.int64))
    sw = t["swapped"][op]
    r0 = np.where(sw & (nr == 2), b, a)
    r1 = np.where(sw & (nr == 2), a, b)
    one = np.int64(1)
    d = np.where(t["wf"][op], one << r0, 0) | np.where(t["xchg"][op], one << r1, 0) | \
        np.where(t["spi"][op], one << isa.SP, 0)
    u = np.where(t["rf"][op], one << r0, 0) | np.where(nr == 2, one << r1, 0) | \
        np.where(t["spi"][op], one << isa.SP, 0)
    return d, u, t["memr"][op], t["memw"][op], t["sys"][op]


def _substitute(raw: np.ndarray, origin: np.ndarray, blk: np.ndarray, key: np.ndarray, term: np.ndarray,
                rng: np.random.Generator, prob: float, rules: tuple):
    """Vectorised counterpart of isa.substitute applied with probability ``prob``."""
    op = raw[:, 0].astype(np.int64)
    a, b = _fields(raw[:, 1].astype(np.int64))
    imm16 = raw[:, 2].astype(np.int64) | (raw[:, 3].astype(np.int64) << 8)
    imm16 = np.where(imm16 >= 0x8000, imm16 - 0x10000, imm16)
    imm32 = (raw[:, 2].astype(np.int64) | (raw[:, 3].astype(np.int64) << 8) |
             (raw[:, 4].astype(np.int64) << 16) | (raw[:, 5].astype(np.int64) << 24))
    is_rr = np.isin(op, list(_RR_CANON) + list(_RR_CANON.values()))
    movs = (op == OP["MOV"]) | (op == isa.SWAPPED_OPCODE["MOV"])
    xors = (op == OP["XOR"]) | (op == isa.SWAPPED_OPCODE["XOR"])
    subs = (op == OP["SUB"]) | (op == isa.SWAPPED_OPCODE["SUB"])
    cand = {
        "nop-identity": op == OP["NOP"],
        "addi-subi": ((op == OP["ADDI"]) | (op == OP["SUBI"])) & (imm16 != -0x8000),
        "mov-xor-add": movs & (a != b),
        "zero-idiom": (xors | subs) & (a == b),
        "movi-width": ((op == OP["MOVI"]) & ((imm32 < 0x8000) | (imm32 >= 0xFFFF8000))) | (op == OP["MOVIS"]),
        "direction-bit": is_rr,
    }
    names = [r for r in isa.SUBSTITUTION_RULES if r in rules]
    if not names:
        return raw, origin, blk, key
    C = np.stack([cand[r] for r in names], axis=1) & ~term[:, None]
    cnt = C.sum(axis=1)
    go = (cnt > 0) & (rng.random(len(raw)) < prob)
    pick = np.minimum((rng.random(len(raw)) * np.maximum(cnt, 1)).astype(np.int64), np.maximum(cnt - 1, 0))
    # index of the pick-th true column
    csum = np.cumsum(C, axis=1)
    col = np.argmax(csum > pick[:, None], axis=1)
    rule = np.where(go, col, -1)
    out = raw.copy()
    rid = {r: i for i, r in enumerate(names)}

    def sel(name):
        return rule == rid[name] if name in rid else np.zeros(len(raw), dtype=bool)

    m = sel("addi-subi")
    out[m, 0] = np.where(op[m] == OP["ADDI"], OP["SUBI"], OP["ADDI"])
    neg = (-imm16[m]) & 0xFFFF
    out[m, 2] = neg & 0xFF
    out[m, 3] = neg >> 8
    m = sel("zero-idiom")
    out[m, 0] = np.where(xors[m], OP["SUB"], OP["XOR"])
    out[m, 1] = (a[m] << 3) | a[m]
    m = sel("direction-bit")
    out[m, 0] = _RR_FLIP[op[m]]
    out[m, 1] = (b[m] << 3) | a[m]
    m = sel("movi-width")
    mi = m & (op == OP["MOVI"])
    out[mi, 0] = OP["MOVIS"]
    out[mi, 4:] = 0
    ms = m & (op == OP["MOVIS"])
    out[ms, 0] = OP["MOVI"]
    ext = np.where(imm16[ms] < 0, 0xFF, 0)
    out[ms, 4] = ext
    out[ms, 5] = ext
    # MOV d, s -> XOR d, d ; ADD d, s
    m = sel("mov-xor-add")
    if m.any():
        d = np.where(op == OP["MOV"], a, b)
        s = np.where(op == OP["MOV"], b, a)
        out[m, 0] = OP["XOR"]
        out[m, 1] = (d[m] << 3) | d[m]
        extra = np.zeros((int(m.sum()), 6), dtype=np.uint8)
        extra[:, 0] = OP["ADD"]
        extra[:, 1] = (d[m] << 3) | s[m]
        out = np.concatenate([out, extra])
        origin = np.concatenate([origin, origin[m]])
        blk = np.concatenate([blk, blk[m]])
        key = np.concatenate([key, key[m] + 0.5])
    return out, origin, blk, key


def _sort_records(raw, origin, blk, key):
    order = np.lexsort((key, blk))
    raw, origin, blk, key = raw[order], origin[order], blk[order], key[order]
    n = len(blk)
    pos = np.arange(n)
    chg = np.ones(n, dtype=bool)
    chg[1:] = blk[1:] != blk[:-1]
    start = np.maximum.accumulate(np.where(chg, pos, 0))
    return raw, origin, blk, (pos - start).astype(float)


def _reorder(raw, origin, blk, key, window: int, rng: np.random.Generator):
    for p in range(max(0, window - 1)):
        n = len(raw)
        if n < 2:
            break
        op = raw[:, 0].astype(np.int64)
        term = isa.decode_tables()["term"][op] != isa.TERMINATOR_KINDS.index("none")
        d, u, mr, mw, sy = _dep_masks(raw)
        i = np.arange(n - 1)
        j = i + 1
        ok = (blk[i] == blk[j]) & ~term[i] & ~term[j] & ((key[i].astype(np.int64) % 2) == (p % 2))
        ok &= ((d[i] & (d[j] | u[j])) == 0) & ((d[j] & u[i]) == 0)
        ok &= ~((mw[i] & (mr[j] | mw[j])) | (mw[j] & mr[i]))
        ok &= ~(sy[i] & sy[j])
        ok &= rng.random(n - 1) < 0.5
        sw = np.nonzero(ok)[0]
        key = key.copy()
        key[sw], key[sw + 1] = key[sw + 1], key[sw]
        raw, origin, blk, key = _sort_records(raw, origin, blk, key)
    return raw, origin, blk, key


def _insert_nops(raw, origin, blk, key, prep: _Prep, nb: int, maxn: int, rng: np.random.Generator):
    cnt = rng.integers(0, maxn + 1, nb)
    total = int(cnt.sum())
    if not total:
        return raw, origin, blk, key
    nbk = np.repeat(np.arange(nb), cnt)
    prefix_n = np.bincount(blk, minlength=nb) - 1  # records before the terminator
    where = np.floor(rng.random(total) * (prefix_n[nbk] + 1)) - 0.5 + rng.random(total) * 1e-3
    extra = np.zeros((total, 6), dtype=np.uint8)
    extra[:, 0] = OP["NOP"]
    raw = np.concatenate([raw, extra])
    origin = np.concatenate([origin, prep.first[nbk]])
    blk = np.concatenate([blk, nbk])
    key = np.concatenate([key, where])
    return _sort_records(raw, origin, blk, key)


def _instruction_bits(bitmaps: PermissionBitmaps, prep: _Prep) -> tuple[np.ndarray, np.ndarray]:
    """Per original instruction: all of its bytes are code / all are data."""
    n = len(prep.off)
    if not n:
        return np.zeros(0, bool), np.zeros(0, bool)
    c = np.concatenate([[0], np.cumsum(bitmaps.code)])
    d = np.concatenate([[0], np.cumsum(bitmaps.data)])
    e = prep.off + prep.length
    code = (c[e] - c[prep.off]) == prep.length
    data = (d[e] - d[prep.off]) == prep.length
    return code, data


def randomize(img: BinaryImage, bitmaps: PermissionBitmaps | None, spec: RandomizationSpec) -> RandomizedImage:
    """Produce a randomized copy of ``img``; deterministic for a given spec."""
    n_text = len(img.text)
    bm = bitmaps if bitmaps is not None else PermissionBitmaps.empty(n_text)
    if len(bm) != n_text:
        raise ValueError("bitmaps are not dimensioned to the text section")
    nb, nf = len(img.blocks), len(img.functions)
    if spec.tier == "none":
        return RandomizedImage(img, np.array([b.start for b in img.blocks], dtype=np.int64),
                               np.tile(np.arange(8), (nf, 1)),
                               {f.id: tuple(range(f.param_count)) for f in img.functions}, bm.copy(), spec)
    rng = np.random.default_rng(spec.seed)
    prep = _prepare(img)
    tier2 = spec.tier == "tier2"
    sig, pi = _draw_perms(rng, prep.abi, prep.params, tier2 and spec.randomize_param_sequences)
    raw = _remap_registers(prep, sig, pi, tier2 and spec.randomize_param_sequences)
    n = len(raw)
    origin = np.arange(n)
    blk = prep.owner.copy()
    key = (np.arange(n) - prep.first[blk]).astype(float) if n else np.zeros(0)
    if tier2:
        raw, origin, blk, key = _substitute(raw, origin, blk, key, prep.is_term[origin], rng,
                                            spec.substitution_probability, spec.substitution_rules)
        raw, origin, blk, key = _sort_records(raw, origin, blk, key)
        raw, origin, blk, key = _reorder(raw, origin, blk, key, spec.reorder_window, rng)
        raw, origin, blk, key = _insert_nops(raw, origin, blk, key, prep, nb, spec.nop_insertion_max, rng)
    return _layout(img, bm, prep, spec, rng, sig, pi, raw, origin, blk)


def _layout(img, bm, prep: _Prep, spec, rng, sig, pi, raw, origin, blk) -> RandomizedImage:
    t = op_tables()
    nb = len(img.blocks)
    op = raw[:, 0].astype(np.int64)
    length = t["length"][op]
    term = isa.decode_tables()["term"][op] != isa.TERMINATOR_KINDS.index("none")
    # terminator long forms
    top = op.copy()
    for s_op, l_op in _LONG_COND.items():
        top[op == s_op] = l_op
    top[op == OP["JMP8"]] = OP["JMP"]
    tlen = np.where(term, t["length"][top], length)
    tramp = prep.succ_fall >= 0
    table_bytes = np.array([4 * b.table_count for b in img.blocks], dtype=np.int64)
    bsize = np.bincount(blk, weights=tlen, minlength=nb).astype(np.int64)
    unit = bsize + table_bytes + 5 * tramp
    order = rng.permutation(nb)
    gaps = rng.integers(0, spec.gap_max + 1, nb) if spec.gap_max else np.zeros(nb, dtype=np.int64)
    sizes = unit[order] + gaps
    starts_ord = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    total = int(sizes.sum())
    if total >= 1 << 31:
        raise FixupOverflow("text section too large for rel32 displacements")
    base = img.text_base
    new_start = np.empty(nb, dtype=np.int64)
    new_start[order] = base + starts_ord
    text = np.full(total, isa.GARBLE_BYTE, dtype=np.uint8)
    # record addresses
    csum = np.cumsum(tlen) - tlen
    chg = np.ones(len(blk), dtype=bool)
    chg[1:] = blk[1:] != blk[:-1]
    bfirst = np.maximum.accumulate(np.where(chg, np.arange(len(blk)), 0))
    addr = new_start[blk] + csum - csum[bfirst]
    # non-terminators: copy bytes
    nt = ~term
    cols = np.arange(6)[None, :]
    m = (cols < length[:, None]) & nt[:, None]
    pos = (addr - base)[:, None] + cols
    text[pos[m]] = raw[m]
    # terminators
    ti = np.nonzero(term)[0]
    tb = blk[ti]
    ta = addr[ti]
    tl = tlen[ti]
    nxt = ta + tl
    tfmt_op = top[ti]
    text[ta - base] = tfmt_op.astype(np.uint8)
    nregs = t["nregs"][tfmt_op]
    has_r = nregs > 0
    text[(ta - base)[has_r] + 1] = raw[ti[has_r], 1]
    target = np.full(len(ti), -1, dtype=np.int64)
    kj = prep.succ_jump[tb] >= 0
    target[kj] = prep.succ_jump[tb][kj]
    kt = prep.succ_true[tb] >= 0
    target[kt] = prep.succ_true[tb][kt]
    kc = prep.callee_entry[tb] >= 0
    kc &= tfmt_op == OP["CALL"]
    target[kc] = prep.callee_entry[tb][kc]
    rel32 = np.isin(tfmt_op, [OP["JMP"], OP["CALL"]] + list(_LONG_COND.values()))
    if (rel32 & (target < 0)).any():
        bad = tb[rel32 & (target < 0)][0]
        raise FixupOverflow(f"block {bad} has a relative branch without a known target")
    disp = new_start[np.maximum(target, 0)] - nxt
    dpos = ta - base + np.where(tfmt_op == OP["JMP"], 1, np.where(tfmt_op == OP["CALL"], 1, 2))
    for k in range(4):
        text[dpos[rel32] + k] = ((disp[rel32] >> (8 * k)) & 0xFF).astype(np.uint8)
    jt = tfmt_op == OP["JTAB"]
    text[(ta - base)[jt] + 2] = raw[ti[jt], 2]
    text[(ta - base)[jt] + 3] = 0
    text[(ta - base)[jt] + 4] = 0
    # tables and trampolines
    block_end = new_start + bsize
    embedded = []
    for b, tgts in prep.tables.items():
        e = int(block_end[b])
        words = new_start[list(tgts)].astype("<u4").tobytes()
        text[e - base:e - base + len(words)] = np.frombuffer(words, dtype=np.uint8)
        embedded.append((e, 4 * len(tgts)))
    tr = np.nonzero(tramp)[0]
    tr_addr = block_end[tr] + table_bytes[tr]
    text[tr_addr - base] = OP["JMP"]
    tdisp = new_start[prep.succ_fall[tr]] - (tr_addr + 5)
    for k in range(4):
        text[tr_addr - base + 1 + k] = ((tdisp >> (8 * k)) & 0xFF).astype(np.uint8)
    # bitmaps
    ccode, cdata = _instruction_bits(bm, prep)
    code = np.zeros(total, dtype=bool)
    data = np.zeros(total, dtype=bool)
    rc = ccode[origin]
    rd = cdata[origin]
    rmask = cols < tlen[:, None]
    rpos = (addr - base)[:, None] + cols
    code[rpos[rmask & rc[:, None]]] = True
    data[rpos[rmask & rd[:, None]]] = True
    term_of_block = np.full(nb, -1, dtype=np.int64)
    term_of_block[tb] = ti
    tc = rc[term_of_block[tr]]
    for k in range(5):
        code[(tr_addr - base + k)[tc]] = True
    for (e, ln), b in zip(embedded, prep.tables):
        o = img.blocks[b].table_addr - img.text_base
        code[e - base:e - base + ln] = bm.code[o:o + ln]
        data[e - base:e - base + ln] = bm.data[o:o + ln]
    # image objects
    data_sec = bytearray(img.data)
    entry_addr = [int(new_start[f.entry]) for f in img.functions]
    for ptab in img.pointer_tables:
        for k, fid in enumerate(ptab.entries):
            struct.pack_into("<I", data_sec, ptab.offset + 4 * k, entry_addr[fid])
    blocks: list[BasicBlock] = []
    for b in img.blocks:
        ta_ = int(block_end[b.id]) if b.table_count else -1
        blocks.append(BasicBlock(b.id, int(new_start[b.id]), int(bsize[b.id]), b.function, b.kind, b.succs,
                                 b.callee, b.ptr_slot, ta_, b.table_count))
    fblocks = [list(f.blocks) for f in img.functions]
    for k, b in enumerate(tr.tolist()):
        tid = nb + k
        blocks.append(BasicBlock(tid, int(tr_addr[k]), 5, img.blocks[b].function, "jump",
                                 ((int(prep.succ_fall[b]), "jump", 0),)))
        fblocks[img.blocks[b].function].append(tid)
    tier2p = spec.tier == "tier2" and spec.randomize_param_sequences
    param_perm = {f.id: tuple(int(x) for x in pi[f.id, :f.param_count]) if tier2p else tuple(range(f.param_count))
                  for f in img.functions}
    functions = [Function(f.id, f.entry, fblocks[f.id], f.param_count, f.exported, param_perm[f.id],
                          f.returns_value, f.frame_size, f.address_taken, f.payload) for f in img.functions]
    meta = {"randomized": spec.to_dict(), "tiled": False, "trampolines": len(tr)}
    out = BinaryImage(text.tobytes(), bytes(data_sec), blocks, functions,
                      [PointerTable(p.offset, p.entries) for p in img.pointer_tables], list(img.entry_points),
                      sorted(embedded), img.text_base, img.data_base, meta)
    return RandomizedImage(out, new_start, sig, param_perm, PermissionBitmaps(code, data), spec)


# ------------------------------------------------------ gadget survival

def _window_hashes(text: np.ndarray, length: int) -> np.ndarray:
    n = len(text) - length + 1
    if n <= 0:
        return np.zeros(0, dtype=np.uint64)
    h = np.zeros(n, dtype=np.uint64)
    with np.errstate(over="ignore"):
        for k in range(length):
            h = h * np.uint64(0x100000001B3) + text[k:k + n].astype(np.uint64) + np.uint64(1)
    return h


def _pattern_presence(orig_text: np.ndarray, starts: np.ndarray, lengths: np.ndarray,
                      new_text: np.ndarray) -> np.ndarray:
    out = np.zeros(len(starts), dtype=bool)
    for ln in np.unique(lengths):
        sel = np.nonzero(lengths == ln)[0]
        hs = _window_hashes(orig_text, int(ln))[starts[sel]]
        hn = np.unique(_window_hashes(new_text, int(ln)))
        out[sel] = np.isin(hs, hn)
    return out


def surviving_gadget_ratio(orig: BinaryImage, rand: RandomizedImage, max_instructions: int = 6,
                           sample: int | None = None, seed: int = 0) -> dict[str, float]:
    """Fraction of each class's gadget byte patterns present anywhere in the randomized text."""
    from .program.gadgets import GADGET_CLASSES, gadget_table

    gt = gadget_table(orig, max_instructions)
    idx = np.arange(len(gt))
    if sample is not None and sample < len(idx):
        idx = np.sort(np.random.default_rng(seed).choice(idx, sample, replace=False))
    present = _pattern_presence(orig.text_array, gt.start[idx], gt.length[idx], rand.image.text_array)
    out = {}
    for ci, name in enumerate(GADGET_CLASSES):
        m = gt.cls[idx] == ci
        out[name] = float(present[m].mean()) if m.any() else math.nan
    return out


def expected_gadget_survival(orig: BinaryImage, max_instructions: int = 6) -> dict[str, float]:
    """Closed-form tier1 survival per class.

    A gadget whose only unstable bits are register fields survives exactly
    when the function's permutation fixes each distinct register it names:
    probability (s - j)! / s! for j distinct registers out of s permutable
    ones.  Gadgets touching relocated bytes are counted as lost and gapless
    ones as kept.  Chance re-occurrences elsewhere are ignored, so measured
    ratios sit at or slightly above these values.
    """
    from .program.gadgets import GADGET_CLASSES, gadget_table

    gt = gadget_table(orig, max_instructions)
    text = orig.text_array
    gap = orig.gap_bits
    rel = orig.unstable_bits & ~gap
    rel_prefix = np.concatenate([[0], np.cumsum(rel != 0)])
    abi = np.array([f.abi_fixed for f in orig.functions])
    owner_blk = orig.blocks_at(gt.start + orig.text_base)
    p = np.zeros(len(gt))
    for i in range(len(gt)):
        s, ln = int(gt.start[i]), int(gt.length[i])
        if gt.gapless[i]:
            p[i] = 1.0
            continue
        if rel_prefix[s + ln] - rel_prefix[s] or owner_blk[i] < 0:
            continue
        regs = set()
        for k in range(s, s + ln):
            g = int(gap[k])
            if g & isa.FIELD_A:
                regs.add((text[k] >> 3) & 7)
            if g & isa.FIELD_B:
                regs.add(text[k] & 7)
        regs.discard(isa.SP)
        fn = orig.blocks[owner_blk[i]].function
        if abi[fn]:
            movable = {r for r in regs if r >= 4}
            sz = 3
        else:
            movable = regs
            sz = 7
        j = len(movable)
        p[i] = math.factorial(sz - j) / math.factorial(sz) if j <= sz else 0.0
    out = {}
    for ci, name in enumerate(GADGET_CLASSES):
        m = gt.cls == ci
        out[name] = float(p[m].mean()) if m.any() else math.nan
    return out
