"""Binary Netpbm (P5) reading and writing.

PGM is the package's only image format: trivially parseable, no codec
dependencies, bit-exact across platforms. Images use maxval 255, binary
masks maxval 1. Heatmap export min-max normalizes each map and records the
original range in the header comment.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError


def write_pgm(path, values: np.ndarray, maxval: int = 255, comment: str | None = None) -> None:
    """Write a 2-D integer array as binary PGM; values must lie in [0, maxval]."""
    if values.ndim != 2:
        raise FormatError(f"PGM data must be 2-D, got shape {values.shape}")
    if maxval < 1 or maxval > 255:
        raise FormatError(f"maxval must lie in [1, 255], got {maxval}")
    data = np.asarray(values)
    if data.min() < 0 or data.max() > maxval:
        raise FormatError(f"pixel values [{data.min()}, {data.max()}] exceed maxval {maxval}")
    h, w = data.shape
    header = ["P5"]
    if comment:
        header.extend(f"# {line}" for line in comment.splitlines())
    header.append(f"{w} {h}")
    header.append(str(maxval))
    payload = "\n".join(header).encode("ascii") + b"\n" + data.astype(np.uint8).tobytes()
    Path(path).write_bytes(payload)


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Read a binary PGM; returns (2-D uint8 array, maxval)."""
    raw = Path(path).read_bytes()
    pos = 0
    tokens: list[bytes] = []
    while len(tokens) < 4:
        if pos >= len(raw):
            raise FormatError(f"truncated PGM header in {path}", offset=pos)
        ch = raw[pos:pos + 1]
        if ch == b"#":
            nl = raw.find(b"\n", pos)
            if nl < 0:
                raise FormatError(f"unterminated comment in {path}", offset=pos)
            pos = nl + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(raw) and not raw[end:end + 1].isspace():
                end += 1
            tokens.append(raw[pos:end])
            pos = end
    if tokens[0] != b"P5":
        raise FormatError(f"not a binary PGM (magic {tokens[0]!r})", offset=0)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise FormatError(f"bad PGM header in {path}: {exc}", offset=pos) from exc
    if maxval < 1 or maxval > 255:
        raise FormatError(f"unsupported maxval {maxval}", offset=pos)
    pos += 1  # single whitespace byte after maxval
    expected = w * h
    data = raw[pos:pos + expected]
    if len(data) != expected:
        raise FormatError(f"truncated PGM payload: wanted {expected} bytes, got {len(data)}",
                          offset=pos + len(data))
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy(), maxval


def write_heatmap(path, values: np.ndarray, comment_prefix: str = "") -> tuple[float, float]:
    """Min-max normalize a float map into [0, 255] and write it as PGM.

    The source range is recorded in the header comment; returns (lo, hi) so
    callers can also log it to a sidecar file. Constant maps render mid-gray.
    """
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        scaled = np.round((values - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        scaled = np.full(values.shape, 128, dtype=np.uint8)
    comment = f"{comment_prefix}min-max normalized from [{lo!r}, {hi!r}]"
    write_pgm(path, scaled, maxval=255, comment=comment)
    return lo, hi
