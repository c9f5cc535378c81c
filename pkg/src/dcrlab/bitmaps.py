"""Per-byte code/data permission bits and their file format.

Each text byte carries two bits.  (code=1, data=0) is execute-only,
(0, 1) read-only data, (0, 0) uncertain and protected by destructive
reads, (1, 1) is never produced by the profiler but still means "both
views allowed" to the enforcer.

File layout (little-endian)::

    0  4  magic  b"DCRB"
    4  2  version (1)
    6  2  reserved (0)
    8  4  section length in bytes (n)
    12    code bitset, ceil(n/8) bytes, bit j of byte i covers offset 8*i+j
    ..    data bitset, same packing
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"DCRB"
VERSION = 1


class BitmapFormatError(ValueError):
    pass


@dataclass
class PermissionBitmaps:
    code: np.ndarray  # bool per byte
    data: np.ndarray

    def __post_init__(self):
        self.code = np.asarray(self.code, dtype=bool)
        self.data = np.asarray(self.data, dtype=bool)
        if self.code.shape != self.data.shape:
            raise ValueError("code and data bitmaps differ in length")

    @classmethod
    def empty(cls, n: int) -> "PermissionBitmaps":
        return cls(np.zeros(n, dtype=bool), np.zeros(n, dtype=bool))

    def __len__(self) -> int:
        return len(self.code)

    @property
    def xom(self) -> np.ndarray:
        return self.code & ~self.data

    @property
    def ro(self) -> np.ndarray:
        return self.data & ~self.code

    @property
    def uncertain(self) -> np.ndarray:
        return ~self.code & ~self.data

    def fractions(self) -> dict[str, float]:
        n = max(1, len(self))
        return {"xom": float(self.xom.sum()) / n, "ro": float(self.ro.sum()) / n,
                "uncertain": float(self.uncertain.sum()) / n,
                "both": float((self.code & self.data).sum()) / n}

    def copy(self) -> "PermissionBitmaps":
        return PermissionBitmaps(self.code.copy(), self.data.copy())

    def __eq__(self, other) -> bool:
        return (isinstance(other, PermissionBitmaps) and np.array_equal(self.code, other.code)
                and np.array_equal(self.data, other.data))

    def to_bytes(self) -> bytes:
        n = len(self)
        head = MAGIC + struct.pack("<HHI", VERSION, 0, n)
        return head + np.packbits(self.code, bitorder="little").tobytes() + \
            np.packbits(self.data, bitorder="little").tobytes()

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PermissionBitmaps":
        if len(raw) < 12 or raw[:4] != MAGIC:
            raise BitmapFormatError("not a bitmap file")
        version, _res, n = struct.unpack_from("<HHI", raw, 4)
        if version != VERSION:
            raise BitmapFormatError(f"unsupported bitmap version {version}")
        nb = (n + 7) // 8
        if len(raw) != 12 + 2 * nb:
            raise BitmapFormatError("bitmap length does not match header")
        code = np.unpackbits(np.frombuffer(raw, np.uint8, nb, 12), bitorder="little")[:n]
        data = np.unpackbits(np.frombuffer(raw, np.uint8, nb, 12 + nb), bitorder="little")[:n]
        return cls(code.astype(bool), data.astype(bool))

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PermissionBitmaps":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
