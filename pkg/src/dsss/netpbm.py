"""Binary netpbm images: P6 pixmaps (8-bit RGB) and P5 graymaps (8- or 16-bit)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


def _encode(magic: bytes, pixels: np.ndarray, maxval: int) -> bytes:
    h, w = pixels.shape[:2]
    header = magic + b"\n%d %d\n%d\n" % (w, h, maxval)
    if maxval > 255:
        body = pixels.astype(">u2").tobytes()
    else:
        body = pixels.astype(np.uint8).tobytes()
    return header + body


def encode_pgm(gray: np.ndarray, maxval: int = 255) -> bytes:
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise ValueError(f"graymap needs a 2-D array, got shape {gray.shape}")
    if gray.min(initial=0) < 0 or gray.max(initial=0) > maxval:
        raise ValueError(f"graymap values must lie in [0, {maxval}]")
    return _encode(b"P5", gray, maxval)


def encode_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"pixmap needs an [H,W,3] array, got shape {rgb.shape}")
    if rgb.min(initial=0) < 0 or rgb.max(initial=0) > 255:
        raise ValueError("pixmap values must lie in [0, 255]")
    return _encode(b"P6", rgb, 255)


def _header_tokens(buf: bytes, count: int) -> tuple[list[int], int]:
    """Read ``count`` integers after the magic number; returns them and the payload offset."""
    pos = 2
    tokens: list[int] = []
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed header", start)
        tokens.append(int(buf[start:pos]))
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after header", pos)
    return tokens, pos + 1


def decode(buf: bytes, expect: bytes) -> np.ndarray:
    """Decode a P5/P6 payload; returns ``[H,W]`` or ``[H,W,3]`` integers."""
    if len(buf) < 2 or buf[:2] != expect:
        raise FormatError(f"expected magic {expect.decode()}, found {buf[:2]!r}", 0)
    (w, h, maxval), off = _header_tokens(buf, 3)
    if not 0 < maxval < 65536:
        raise FormatError(f"maxval {maxval} out of range", off - 1)
    channels = 3 if expect == b"P6" else 1
    width = 2 if maxval > 255 else 1
    need = w * h * channels * width
    have = len(buf) - off
    if have < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {have}", len(buf))
    dtype = ">u2" if width == 2 else np.uint8
    arr = np.frombuffer(buf, dtype=dtype, count=w * h * channels, offset=off).astype(np.int64)
    if arr.max(initial=0) > maxval:
        raise FormatError("sample exceeds maxval", off)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))


def write_pgm(path: str | Path, gray: np.ndarray, maxval: int = 255) -> None:
    Path(path).write_bytes(encode_pgm(gray, maxval))


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(rgb))


def read_pgm(path: str | Path) -> np.ndarray:
    return decode(Path(path).read_bytes(), b"P5")


def read_ppm(path: str | Path) -> np.ndarray:
    return decode(Path(path).read_bytes(), b"P6")


def read_pgm_maxval(path: str | Path) -> tuple[np.ndarray, int]:
    buf = Path(path).read_bytes()
    arr = decode(buf, b"P5")
    (_, _, maxval), _ = _header_tokens(buf, 3)
    return arr, maxval
