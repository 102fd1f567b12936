"""On-disk formats: named-tensor binaries, PGM masks and CSV masks.

Tensor file layout (all little-endian)::

    b"JOEMTNSR"                 magic, 8 bytes
    uint32  version             currently 1
    uint32  count
    count x {
        uint16  name length, then UTF-8 name
        uint8   rank
        uint64  dims[rank]
        float64 values[prod(dims)], row-major
    }
"""

from __future__ import annotations

import os
import struct
from contextlib import contextmanager

import numpy as np

from joem.errors import InvalidInput

MAGIC = b"JOEMTNSR"
VERSION = 1


@contextmanager
def atomic_write(path, mode="wb"):
    """Write to ``path + '.tmp'`` and rename on success; no partial files on failure."""
    tmp = f"{path}.tmp"
    try:
        with open(tmp, mode) as fh:
            yield fh
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise InvalidInput(f"tensor {name!r} cannot be encoded")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def decode_tensors(data: bytes) -> dict[str, np.ndarray]:
    if data[:8] != MAGIC:
        raise InvalidInput("not a joem tensor file (bad magic)")
    version, count = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise InvalidInput(f"unsupported tensor file version {version}")
    pos = 16
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * size > len(data):
                raise InvalidInput(f"tensor {name!r} is truncated")
            out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos) \
                .reshape(dims).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise InvalidInput(f"corrupt tensor file: {exc}") from None
    if pos != len(data):
        raise InvalidInput("trailing bytes after the last tensor")
    return out


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with atomic_write(path) as fh:
        fh.write(encode_tensors(tensors))


def load_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode_tensors(fh.read())


def encode_pgm(mask: np.ndarray) -> bytes:
    """Binary (P5) graymap holding one class id per pixel."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.size == 0:
        raise InvalidInput(f"mask must be a non-empty 2-D array, got {mask.shape}")
    if mask.min() < 0 or mask.max() > 65535:
        raise InvalidInput("class ids must lie in [0, 65535] for PGM export")
    maxval = 255 if mask.max() <= 255 else 65535
    dtype = np.uint8 if maxval == 255 else ">u2"
    header = f"P5\n{mask.shape[1]} {mask.shape[0]}\n{maxval}\n".encode("ascii")
    return header + mask.astype(dtype).tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise InvalidInput("only binary (P5) graymaps are supported")
    width, height, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = np.uint8 if maxval < 256 else ">u2"
    pixels = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos)
    return pixels.reshape(height, width).astype(np.int64)


def save_pgm(path, mask) -> None:
    with atomic_write(path) as fh:
        fh.write(encode_pgm(mask))


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pgm(fh.read())


def save_mask_csv(path, mask) -> None:
    mask = np.asarray(mask)
    text = "\n".join(",".join(str(int(x)) for x in row) for row in mask) + "\n"
    with atomic_write(path, "w") as fh:
        fh.write(text)


def load_mask_csv(path) -> np.ndarray:
    with open(path) as fh:
        return np.array([[int(x) for x in line.split(",")] for line in fh if line.strip()])
