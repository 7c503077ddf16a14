"""Binary portable pixmaps: P6 (RGB) and P5 (grayscale), 8-bit.

Values are scaled to [0, 1] on read and rounded to the nearest level on write.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DimensionError, ParseError

_WS = b" \t\r\n"


def _header(buf: bytes):
    """Parse magic, width, height, maxval; return them with the payload offset."""
    if buf[:2] not in (b"P5", b"P6"):
        raise ParseError(f"bad magic {buf[:2]!r} at byte offset 0 (expected P5 or P6)")
    pos, fields = 2, []
    while len(fields) < 3:
        while pos < len(buf) and (buf[pos] in _WS or buf[pos] == ord("#")):
            if buf[pos] == ord("#"):
                while pos < len(buf) and buf[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < len(buf) and buf[pos] not in _WS and buf[pos] != ord("#"):
            pos += 1
        tok = buf[start:pos]
        if not tok:
            raise ParseError(f"unexpected end of header at byte offset {pos}")
        if not tok.isdigit():
            raise ParseError(f"non-numeric header field {tok!r} at byte offset {start}")
        fields.append(int(tok))
    if pos >= len(buf) or buf[pos] not in _WS:
        raise ParseError(f"missing whitespace after maxval at byte offset {pos}")
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ParseError(f"non-positive size {width}x{height} in header")
    if not 0 < maxval < 256:
        raise ParseError(f"unsupported maxval {maxval} (8-bit only)")
    return buf[:2].decode(), width, height, maxval, pos + 1


def decode(buf: bytes) -> np.ndarray:
    """P6 -> (3, H, W); P5 -> (H, W)."""
    magic, width, height, maxval, off = _header(buf)
    chans = 3 if magic == "P6" else 1
    need = width * height * chans
    have = len(buf) - off
    if have < need:
        raise ParseError(f"truncated payload at byte offset {off}: expected {need} bytes, got {have}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).astype(np.float64) / maxval
    if chans == 3:
        return np.ascontiguousarray(data.reshape(height, width, 3).transpose(2, 0, 1))
    return data.reshape(height, width)


def _to_bytes(x) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(image: np.ndarray) -> bytes:
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"P6 needs a (3, H, W) image, got {image.shape}")
    _, h, w = image.shape
    return f"P6\n{w} {h}\n255\n".encode() + _to_bytes(image.transpose(1, 2, 0)).tobytes()


def encode_pgm(gray: np.ndarray) -> bytes:
    if gray.ndim != 2:
        raise DimensionError(f"P5 needs an (H, W) array, got {gray.shape}")
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode() + _to_bytes(gray).tobytes()


def read_image(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def read_ppm(path) -> np.ndarray:
    out = read_image(path)
    if out.ndim != 3:
        raise ParseError(f"{path}: expected a P6 colour image")
    return out


def read_pgm(path) -> np.ndarray:
    out = read_image(path)
    if out.ndim != 2:
        raise ParseError(f"{path}: expected a P5 grayscale image")
    return out


def write_ppm(path, image) -> None:
    Path(path).write_bytes(encode_ppm(np.asarray(image)))


def write_pgm(path, gray) -> None:
    Path(path).write_bytes(encode_pgm(np.asarray(gray)))
