"""Little-endian binary container used for weights, trajectories and KV caches.

Layout::

    magic        4 bytes  (kind tag, e.g. b"RFTJ")
    version      u16
    meta_len     u32
    meta         JSON, UTF-8, sorted keys
    n_arrays     u32
    repeated n_arrays times:
        name_len u16, name UTF-8, ndim u8, dims u64[ndim], data f64[prod(dims)]

Output is a pure function of (meta, arrays), so identical inputs give
identical bytes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError

VERSION = 1


def dumps(magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    meta_b = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    parts = [magic, struct.pack("<HI", VERSION, len(meta_b)), meta_b, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError(
                f"truncated container reading {what} at byte offset {self.pos}: "
                f"need {n} bytes, have {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    got = r.take(4, "magic")
    if got != magic:
        raise ParseError(f"bad magic at byte offset 0: expected {magic!r}, got {got!r}")
    version, meta_len = r.unpack("<HI", "header")
    if version != VERSION:
        raise ParseError(f"unsupported container version {version} at byte offset 4")
    start = r.pos
    try:
        meta = json.loads(r.take(meta_len, "metadata").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"malformed metadata at byte offset {start}: {exc}") from None
    (n_arrays,) = r.unpack("<I", "array count")
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = r.unpack("<H", "name length")
        name = r.take(name_len, "array name").decode()
        (ndim,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{ndim}Q", f"dims of {name}") if ndim else ()
        count = int(np.prod(dims)) if ndim else 1
        data = r.take(8 * count, f"data of {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(dims)
    if r.pos != len(buf):
        raise ParseError(f"trailing bytes after container end at byte offset {r.pos}")
    return meta, arrays


def save(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(magic, meta, arrays))


def load(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes(), magic)
