"""Gap-aware byte templates over an original text section."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image import BinaryImage

_H1 = np.uint64(0x9E3779B97F4A7C15)
_H2 = np.uint64(0xC2B2AE3D27D4EB4F)


@dataclass(frozen=True)
class Template:
    address_orig: int
    bytes: bytes
    gap_mask: bytes  # set bits may differ in a randomized copy

    def matches(self, leaked: bytes) -> bool:
        return all(((a ^ b) & ~g & 0xFF) == 0 for a, b, g in zip(self.bytes, leaked, self.gap_mask))


def _pack(windows: np.ndarray) -> np.ndarray:
    m = windows.shape[1]
    out = np.zeros(windows.shape[0], dtype=np.uint64)
    for k in range(m):
        out |= windows[:, k].astype(np.uint64) << np.uint64(8 * k)
    return out


def _mix(x: np.ndarray) -> np.ndarray:
    x = x ^ (x >> np.uint64(30))
    x = x * _H1
    x ^= x >> np.uint64(27)
    x = x * _H2
    return x ^ (x >> np.uint64(31))


def _hash(mask: np.ndarray, value: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return _mix(_mix(mask) ^ value)


class TemplateIndex:
    """One template per window of ``length`` bytes, indexed for gap-aware lookup.

    With ``fits`` given, only windows lying inside a single block are
    templates; the others mix bytes of neighbouring blocks, which are
    separated after relocation, and are never reported as matches.

    A window at offset i matches leaked bytes L iff every stable bit agrees:
    ``(text[i+k] ^ L[k]) & ~unstable[i+k] == 0`` for all k.  Windows are
    grouped by their stable-bit mask so a lookup is one hash probe per
    distinct mask.
    """

    def __init__(self, text: np.ndarray, unstable: np.ndarray, length: int, base: int = 0,
                 fits: np.ndarray | None = None):
        if not 1 <= length <= 16:
            raise ValueError("template length must be 1..16")
        self.text = np.asarray(text, dtype=np.uint8)
        self.unstable = np.asarray(unstable, dtype=np.uint8)
        self.length = length
        self.base = base
        self.count = max(0, len(self.text) - length + 1)
        self.fits = fits  # optional: window lies inside one block
        self._packed = length <= 8
        if self._packed and self.count:
            wt = sliding_window_view(self.text, length)
            wm = sliding_window_view((~self.unstable).astype(np.uint8), length)
            self.key = _pack(wt)
            self.stable = _pack(wm)
            self.value = self.key & self.stable
            self.masks, inv = np.unique(self.stable, return_inverse=True)
            h = _hash(self.stable, self.value)
            self.order = np.argsort(h, kind="stable")
            if fits is not None:
                self.order = self.order[np.asarray(fits, dtype=bool)[self.order]]
            self.sorted_h = h[self.order]

    def __len__(self) -> int:
        return self.count

    def template(self, i: int) -> Template:
        m = self.length
        return Template(self.base + i, bytes(self.text[i:i + m]), bytes(self.unstable[i:i + m]))

    def lookup(self, leaked: bytes) -> np.ndarray:
        """Offsets of all windows whose stable bits equal those of ``leaked``."""
        if len(leaked) != self.length:
            raise ValueError("leaked length differs from template length")
        if not self.count:
            return np.zeros(0, dtype=np.int64)
        if not self._packed:
            lk = np.frombuffer(bytes(leaked), dtype=np.uint8)
            good = np.ones(self.count, dtype=bool)
            for k in range(self.length):
                seg = slice(k, k + self.count)
                good &= ((self.text[seg] ^ lk[k]) & ~self.unstable[seg]) == 0
            if self.fits is not None:
                good &= self.fits
            return np.nonzero(good)[0]
        q = np.uint64(int.from_bytes(bytes(leaked), "little"))
        qv = self.masks & q
        hq = _hash(self.masks, qv)
        lo = np.searchsorted(self.sorted_h, hq, side="left")
        hi = np.searchsorted(self.sorted_h, hq, side="right")
        sel = lo < hi
        if not sel.any():
            return np.zeros(0, dtype=np.int64)
        cand = np.concatenate([self.order[a:b] for a, b in zip(lo[sel], hi[sel])])
        good = (self.stable[cand] & q) == self.value[cand]
        return np.unique(cand[good])

    def match_counts(self, offsets: np.ndarray) -> np.ndarray:
        """For each window offset, how many windows match its own original bytes."""
        offsets = np.asarray(offsets, dtype=np.int64)
        if not self._packed:
            return np.array([len(self.lookup(bytes(self.text[o:o + self.length]))) for o in offsets])
        out = np.zeros(len(offsets), dtype=np.int64)
        q = self.key[offsets]
        chunk = max(1, 4_000_000 // max(1, len(self.masks)))
        for a in range(0, len(q), chunk):
            qq = q[a:a + chunk]
            qv = qq[:, None] & self.masks[None, :]
            hq = np.sort(_hash(np.broadcast_to(self.masks, qv.shape), qv), axis=1)
            lo = np.searchsorted(self.sorted_h, hq.ravel(), side="left")
            hi = np.searchsorted(self.sorted_h, hq.ravel(), side="right")
            # hash collisions are rare with 64-bit hashes; verify the hits and
            # visit each bucket once per query anyway
            n_hits = (hi - lo).reshape(qv.shape)
            n_hits[:, 1:][hq[:, 1:] == hq[:, :-1]] = 0
            rows, cols = np.nonzero(n_hits)
            for r_, c_ in zip(rows, cols):
                idx = self.order[lo[r_ * len(self.masks) + c_]:hi[r_ * len(self.masks) + c_]]
                out[a + r_] += int(((self.stable[idx] & qq[r_]) == self.value[idx]).sum())
        return out


def window_fits(img: BinaryImage, length: int) -> np.ndarray:
    """Boolean per offset: the window starting there lies inside a single block."""
    n = len(img.text)
    end_of = np.full(n, -1, dtype=np.int64)
    for b in img.blocks:
        o = b.start - img.text_base
        end_of[o:o + b.size] = o + b.size
    cnt = max(0, n - length + 1)
    idx = np.arange(cnt)
    return (end_of[:cnt] >= 0) & (end_of[:cnt] >= idx + length)


def templates_at(img: BinaryImage, length: int) -> TemplateIndex:
    if not 3 <= length <= 16:
        raise ValueError("template length must be within 3..16")
    cache = img.__dict__.setdefault("_cache", {})
    key = ("templates", length)
    if key not in cache:
        cache[key] = TemplateIndex(img.text_array, img.unstable_bits, length, img.text_base,
                                   window_fits(img, length))
    return cache[key]
