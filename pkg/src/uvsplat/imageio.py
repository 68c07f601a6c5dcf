"""Binary PPM (P6) / PGM (P5) reading and writing.

Linear RGB images are stored gamma-encoded with a fixed exponent of 1/2.2:
``code = round(maxval * clip(x, 0, 1) ** (1 / 2.2))`` and decoded as
``(code / maxval) ** 2.2``.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

GAMMA = 2.2


def encode_gamma(x: np.ndarray, maxval: int = 255) -> np.ndarray:
    dtype = np.uint8 if maxval < 256 else np.uint16
    return np.round(maxval * np.clip(x, 0.0, 1.0) ** (1.0 / GAMMA)).astype(dtype)


def decode_gamma(code: np.ndarray, maxval: int = 255) -> np.ndarray:
    return (np.asarray(code, dtype=np.float64) / maxval) ** GAMMA


def write_pnm(path: str | os.PathLike, codes: np.ndarray, maxval: int = 255) -> None:
    """Write integer codes; (H, W) gives P5, (H, W, 3) gives P6."""
    codes = np.asarray(codes)
    if codes.ndim == 2:
        magic = b"P5"
    elif codes.ndim == 3 and codes.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"unsupported image shape {codes.shape}")
    if codes.min(initial=0) < 0 or codes.max(initial=0) > maxval:
        raise ValueError("codes outside [0, maxval]")
    h, w = codes.shape[:2]
    dtype = ">u1" if maxval < 256 else ">u2"
    header = magic + f"\n{w} {h}\n{maxval}\n".encode()
    Path(path).write_bytes(header + np.ascontiguousarray(codes, dtype=dtype).tobytes())


def read_pnm(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Return ``(codes, maxval)`` for a binary P5/P6 file."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PPM/PGM file")
    channels = 3 if magic == b"P6" else 1
    dtype = ">u1" if maxval < 256 else ">u2"
    count = w * h * channels
    codes = np.frombuffer(data, dtype=dtype, count=count, offset=pos).astype(np.int64)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return codes.reshape(shape), maxval


def write_image(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write a linear-RGB float image as an 8-bit gamma-encoded PPM."""
    write_pnm(path, encode_gamma(image, 255), 255)


def read_image(path: str | os.PathLike) -> np.ndarray:
    codes, maxval = read_pnm(path)
    return decode_gamma(codes, maxval)
