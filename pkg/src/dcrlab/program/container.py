"""Binary container for images (see docs/FORMATS.md for the byte layout)."""

from __future__ import annotations

import json
import struct

import numpy as np

from ..bitmaps import PermissionBitmaps
from .image import EDGE_LABELS, BasicBlock, BinaryImage, Function, PointerTable

MAGIC = b"DCRIMG"
VERSION = 1

KINDS = ("jump", "cond-branch", "call-direct", "call-indirect", "return", "table-jump", "none")

BLOCK_DT = np.dtype([("id", "<u4"), ("start", "<u4"), ("size", "<u4"), ("function", "<u4"),
                     ("kind", "u1"), ("pad", "u1"), ("nsucc", "<u2"), ("callee", "<i4"),
                     ("ptr_table", "<i4"), ("ptr_entry", "<i4"), ("table_addr", "<i8"),
                     ("table_count", "<u4")])
EDGE_DT = np.dtype([("src", "<u4"), ("dst", "<u4"), ("label", "u1"), ("pad", "u1"), ("slot", "<u2")])
FUNC_DT = np.dtype([("id", "<u4"), ("entry", "<u4"), ("param_count", "u1"), ("flags", "u1"),
                    ("param_order", "u1", (4,)), ("frame_size", "<u4")])

F_EXPORTED, F_RV, F_ADDR, F_PAYLOAD = 1, 2, 4, 8


class ContainerError(ValueError):
    pass


def _section(tag: bytes, payload: bytes) -> bytes:
    assert len(tag) == 4
    return tag + struct.pack("<IQ", 0, len(payload)) + payload


def image_sections(img: BinaryImage) -> list[tuple[bytes, bytes]]:
    meta = {"text_base": img.text_base, "data_base": img.data_base, "meta": img.meta}
    out = [(b"META", json.dumps(meta, sort_keys=True, separators=(",", ":")).encode())]
    out.append((b"TEXT", bytes(img.text)))
    out.append((b"DATA", bytes(img.data)))
    blk = np.zeros(len(img.blocks), dtype=BLOCK_DT)
    edges = []
    for i, b in enumerate(img.blocks):
        pt = b.ptr_slot or (-1, -1)
        blk[i] = (b.id, b.start, b.size, b.function, KINDS.index(b.kind), 0, len(b.succs), b.callee,
                  pt[0], pt[1], b.table_addr, b.table_count)
        for d, lab, slot in b.succs:
            edges.append((b.id, d, EDGE_LABELS.index(lab), 0, slot))
    out.append((b"BLKS", blk.tobytes()))
    out.append((b"EDGE", np.array(edges, dtype=EDGE_DT).tobytes() if edges else b""))
    fn = np.zeros(len(img.functions), dtype=FUNC_DT)
    for i, f in enumerate(img.functions):
        flags = (F_EXPORTED * f.exported) | (F_RV * f.returns_value) | (F_ADDR * f.address_taken) | \
            (F_PAYLOAD * f.payload)
        po = list(f.param_order) + [255] * (4 - len(f.param_order))
        fn[i] = (f.id, f.entry, f.param_count, flags, po, f.frame_size)
    out.append((b"FUNC", fn.tobytes()))
    pt = bytearray()
    for t in img.pointer_tables:
        pt += struct.pack("<II", t.offset, len(t.entries))
        pt += struct.pack(f"<{len(t.entries)}I", *t.entries)
    out.append((b"PTRT", bytes(pt)))
    out.append((b"ENTR", struct.pack(f"<I{len(img.entry_points)}I", len(img.entry_points), *img.entry_points)))
    emb = bytearray()
    for a, ln in img.embedded:
        emb += struct.pack("<II", a, ln)
    out.append((b"EMBD", bytes(emb)))
    return out


def pack(sections: list[tuple[bytes, bytes]]) -> bytes:
    head = MAGIC + struct.pack("<HII", VERSION, len(sections), 0)
    return head + b"".join(_section(t, p) for t, p in sections)


def unpack(raw: bytes) -> dict[bytes, bytes]:
    if len(raw) < 16 or raw[:6] != MAGIC:
        raise ContainerError("not an image container")
    version, count, _ = struct.unpack_from("<HII", raw, 6)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = 16
    out: dict[bytes, bytes] = {}
    for _ in range(count):
        if pos + 16 > len(raw):
            raise ContainerError("truncated section header")
        tag = raw[pos:pos + 4]
        _flags, ln = struct.unpack_from("<IQ", raw, pos + 4)
        pos += 16
        if pos + ln > len(raw):
            raise ContainerError(f"truncated section {tag!r}")
        out[tag] = raw[pos:pos + ln]
        pos += ln
    if pos != len(raw):
        raise ContainerError("trailing bytes after last section")
    return out


def image_from_sections(sec: dict[bytes, bytes]) -> BinaryImage:
    for tag in (b"META", b"TEXT", b"DATA", b"BLKS", b"EDGE", b"FUNC", b"PTRT", b"ENTR", b"EMBD"):
        if tag not in sec:
            raise ContainerError(f"missing section {tag!r}")
    try:
        meta = json.loads(sec[b"META"].decode())
        blk = np.frombuffer(sec[b"BLKS"], dtype=BLOCK_DT)
        edges = np.frombuffer(sec[b"EDGE"], dtype=EDGE_DT)
        fn = np.frombuffer(sec[b"FUNC"], dtype=FUNC_DT)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ContainerError(str(exc)) from exc
    succ: dict[int, list] = {}
    for e in edges:
        succ.setdefault(int(e["src"]), []).append((int(e["dst"]), EDGE_LABELS[e["label"]], int(e["slot"])))
    blocks = []
    for r in blk:
        bid = int(r["id"])
        ps = None if r["ptr_table"] < 0 else (int(r["ptr_table"]), int(r["ptr_entry"]))
        blocks.append(BasicBlock(bid, int(r["start"]), int(r["size"]), int(r["function"]), KINDS[r["kind"]],
                                 tuple(succ.get(bid, ())), int(r["callee"]), ps, int(r["table_addr"]),
                                 int(r["table_count"])))
    fblocks: dict[int, list[int]] = {}
    for b in blocks:
        fblocks.setdefault(b.function, []).append(b.id)
    functions = []
    for r in fn:
        pc = int(r["param_count"])
        flags = int(r["flags"])
        functions.append(Function(int(r["id"]), int(r["entry"]), fblocks.get(int(r["id"]), []), pc,
                                  bool(flags & F_EXPORTED), tuple(int(x) for x in r["param_order"][:pc]),
                                  bool(flags & F_RV), int(r["frame_size"]), bool(flags & F_ADDR),
                                  bool(flags & F_PAYLOAD)))
    tables = []
    raw = sec[b"PTRT"]
    pos = 0
    while pos < len(raw):
        off, cnt = struct.unpack_from("<II", raw, pos)
        pos += 8
        tables.append(PointerTable(off, tuple(struct.unpack_from(f"<{cnt}I", raw, pos))))
        pos += 4 * cnt
    (ne,) = struct.unpack_from("<I", sec[b"ENTR"], 0)
    entries = list(struct.unpack_from(f"<{ne}I", sec[b"ENTR"], 4))
    emb = [struct.unpack_from("<II", sec[b"EMBD"], i) for i in range(0, len(sec[b"EMBD"]), 8)]
    return BinaryImage(sec[b"TEXT"], sec[b"DATA"], blocks, functions, tables, entries,
                       [(int(a), int(b)) for a, b in emb], meta["text_base"], meta["data_base"], meta["meta"])


def dumps(img: BinaryImage, bitmaps: PermissionBitmaps | None = None,
          extra: list[tuple[bytes, bytes]] | None = None) -> bytes:
    secs = image_sections(img)
    if bitmaps is not None:
        secs.append((b"BMAP", bitmaps.to_bytes()))
    secs += extra or []
    return pack(secs)


def loads(raw: bytes) -> tuple[BinaryImage, PermissionBitmaps | None, dict[bytes, bytes]]:
    sec = unpack(raw)
    img = image_from_sections(sec)
    bm = PermissionBitmaps.from_bytes(sec[b"BMAP"]) if b"BMAP" in sec else None
    return img, bm, sec


def save(path, img: BinaryImage, bitmaps: PermissionBitmaps | None = None, extra=None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(img, bitmaps, extra))


def load(path) -> tuple[BinaryImage, PermissionBitmaps | None, dict[bytes, bytes]]:
    with open(path, "rb") as fh:
        return loads(fh.read())
