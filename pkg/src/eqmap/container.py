"""Minimal named-tensor file format.

Layout: magic "EQMP", version u16, entry count u32, then per entry a
length-prefixed UTF-8 name (u16), a dtype code u8 (0 float32, 1 uint8,
2 int32), rank u8, one u32 per dimension, and the raw little-endian
row-major payload. Entries are written sorted by name so identical
dicts produce identical bytes.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import DataFormatError

__all__ = ["write_container", "read_container", "MAGIC", "VERSION"]

MAGIC = b"EQMP"
VERSION = 1

_DECODE = {0: np.dtype("<f4"), 1: np.dtype("|u1"), 2: np.dtype("<i4")}
_ENCODE = {np.dtype(np.float32): 0, np.dtype(np.uint8): 1, np.dtype(np.int32): 2}


def write_container(path, entries: dict) -> None:
    blobs = []
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name])
        code = _ENCODE.get(arr.dtype)
        if code is None:
            raise DataFormatError(
                f"entry {name!r} has dtype {arr.dtype}; "
                "only float32, uint8, int32 are storable")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise DataFormatError(f"entry name too long: {name[:40]!r}...")
        if arr.ndim > 0xFF:
            raise DataFormatError(f"entry {name!r} rank too large")
        head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim)
        head += b"".join(struct.pack("<I", d) for d in arr.shape)
        blobs.append(head + arr.astype(_DECODE[code], copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", VERSION, len(blobs)))
        for blob in blobs:
            fh.write(blob)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataFormatError(f"{self.path}: truncated container")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise DataFormatError(f"{path}: not a tensor container (bad magic)")
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise DataFormatError(f"{path}: unsupported container version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataFormatError(f"{path}: undecodable entry name") from exc
        code, rank = r.unpack("<BB")
        if code not in _DECODE:
            raise DataFormatError(f"{path}: entry {name!r} has dtype code {code}")
        dims = tuple(r.unpack("<" + "I" * rank)) if rank else ()
        if name in out:
            raise DataFormatError(f"{path}: duplicate entry {name!r}")
        dtype = _DECODE[code]
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = r.take(size * dtype.itemsize)
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if r.pos != len(data):
        raise DataFormatError(f"{path}: trailing bytes after last entry")
    return out