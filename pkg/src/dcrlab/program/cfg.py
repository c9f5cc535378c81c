"""Shortest labelled paths over the control-flow graph.

Traversable edges are the intra-procedural ones (jump, true, false, table),
direct call edges into a callee's entry, and the call-to-return-site edge
(``fallthrough`` after a call), which stands in for a matched return.
Bare return edges and indirect calls are never followed.
"""

from __future__ import annotations

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import breadth_first_order

from .image import BinaryImage

TRAVERSABLE = ("jump", "true", "false", "table", "call", "fallthrough")


class NoPath(LookupError):
    pass


def label_str(label: str, slot: int) -> str:
    return f"table:{slot}" if label == "table" else label


class PathGraph:
    def __init__(self, img: BinaryImage):
        self.img = img
        n = len(img.blocks)
        src, dst = [], []
        self.label: dict[tuple[int, int], str] = {}
        for b in img.blocks:
            for d, lab, slot in b.succs:
                if lab not in TRAVERSABLE:
                    continue
                key = (b.id, d)
                if key in self.label:
                    continue
                self.label[key] = label_str(lab, slot)
                src.append(b.id)
                dst.append(d)
        self.n = n
        self.src = np.array(src, dtype=np.int64)
        self.dst = np.array(dst, dtype=np.int64)
        self.adj = csr_matrix((np.ones(len(src), dtype=np.int8), (self.src, self.dst)), shape=(n, n))

    def without(self, excluded: np.ndarray | set[int]) -> csr_matrix:
        ex = np.zeros(self.n, dtype=bool)
        ex[list(excluded) if isinstance(excluded, set) else excluded] = True
        keep = ~(ex[self.src] | ex[self.dst])
        return csr_matrix((np.ones(int(keep.sum()), dtype=np.int8), (self.src[keep], self.dst[keep])),
                          shape=(self.n, self.n))

    def tree(self, source: int, adj: csr_matrix | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(reached block ids in BFS order, predecessor array)."""
        order, pred = breadth_first_order(self.adj if adj is None else adj, source, directed=True,
                                          return_predecessors=True)
        return order, pred

    def path_from_tree(self, pred: np.ndarray, source: int, target: int) -> list[tuple[str, int]]:
        if source == target:
            return []
        if pred[target] < 0:
            raise NoPath(f"block {target} unreachable from {source}")
        out = []
        cur = target
        while cur != source:
            p = int(pred[cur])
            out.append((self.label[(p, cur)], cur))
            cur = p
        out.reverse()
        return out

    def path(self, source: int, target: int, adj: csr_matrix | None = None) -> list[tuple[str, int]]:
        """Shortest path as (label, block reached) steps."""
        if source == target:
            return []
        _, pred = self.tree(source, adj)
        return self.path_from_tree(pred, source, target)


def path_graph(img: BinaryImage) -> PathGraph:
    cache = img.__dict__.setdefault("_cache", {})
    if "pathgraph" not in cache:
        cache["pathgraph"] = PathGraph(img)
    return cache["pathgraph"]


def find_path(img: BinaryImage, src_addr: int, dst_addr: int) -> list[str]:
    """Edge labels of a shortest path between the blocks holding the two addresses."""
    a, b = img.block_at(src_addr), img.block_at(dst_addr)
    if a < 0 or b < 0:
        raise NoPath("address outside any block")
    return [lab for lab, _ in path_graph(img).path(a, b)]


def replay(img: BinaryImage, start_block: int, labels: list[str]) -> int:
    """Follow labels from a block using only the image's own edge lists."""
    cur = start_block
    for lab in labels:
        blk = img.blocks[cur]
        if lab.startswith("table:"):
            nxt = blk.succ("table", int(lab.split(":")[1]))
        else:
            nxt = blk.succ(lab)
        if nxt < 0:
            raise NoPath(f"block {cur} has no {lab} edge")
        cur = nxt
    return cur
