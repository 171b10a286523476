"""Binary checkpoint files: named array blobs with a trailing CRC32.

Layout (little-endian)::

    b"CGCKPT1" | version u32 | iteration u64 | blobCount u32
    per blob: nameLen u16 | name utf-8 | dtype u8 | rank u8 | extents u64[rank] | raw values
    CRC32 u32 of every preceding byte
"""
from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"CGCKPT1"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1"),
          4: np.dtype("<i4")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


def encode(iteration: int, blobs: dict[str, np.ndarray], version: int = VERSION) -> bytes:
    parts = [MAGIC, struct.pack("<IQI", version, iteration, len(blobs))]
    for name, arr in blobs.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in DTYPE_CODES:
            raise CheckpointError(f"blob {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(buf: bytes) -> tuple[int, dict[str, np.ndarray]]:
    """Parse a checkpoint; every failure names the byte offset where parsing stopped."""
    if len(buf) < len(MAGIC) + 16 + 4:
        raise CheckpointError(f"checkpoint truncated: {len(buf)} bytes, header needs "
                              f"{len(MAGIC) + 20} (offset {len(buf)})")
    if buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:len(MAGIC)]!r} at offset 0")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError(f"CRC mismatch: stored {crc:#010x}, computed "
                              f"{zlib.crc32(buf[:-4]):#010x} over bytes [0, {len(buf) - 4})")
    pos = len(MAGIC)
    version, iteration, count = struct.unpack_from("<IQI", buf, pos)
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, this build reads {VERSION}")
    pos += 16
    end = len(buf) - 4
    blobs: dict[str, np.ndarray] = {}

    def need(n: int, what: str):
        if pos + n > end:
            raise CheckpointError(f"truncated {what} at offset {pos} (need {n} bytes, {end - pos} left)")

    for _ in range(count):
        need(2, "blob name length")
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 2, "blob name")
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, rank = struct.unpack_from("<BB", buf, pos)
        if code not in DTYPES:
            raise CheckpointError(f"blob {name!r}: unknown dtype code {code} at offset {pos}")
        pos += 2
        need(8 * rank, f"extents of {name!r}")
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        dt = DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        need(nbytes, f"values of {name!r}")
        blobs[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize,
                                    offset=pos).reshape(shape).copy()
        pos += nbytes
    if pos != end:
        raise CheckpointError(f"{end - pos} unexpected trailing bytes at offset {pos}")
    return iteration, blobs


def save(path: str | os.PathLike, iteration: int, blobs: dict[str, np.ndarray]) -> None:
    """Atomic write: a crash never leaves a half-written checkpoint under ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(iteration, blobs))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> tuple[int, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())
