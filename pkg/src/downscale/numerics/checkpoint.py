"""ORBW parameter checkpoints.

Layout (little-endian): magic ``ORBW``, u32 version, u32 parameter count, then
per parameter a u16-length-prefixed UTF-8 name, u8 rank, u32 extents and a
float32 payload. A CRC-32 of everything before it closes the file.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

MAGIC = b"ORBW"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, value in params.items():
        arr = np.asarray(getattr(value, "data", value), dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes) -> dict:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError("not an ORBW checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint CRC mismatch")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off, out = 12, {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
    if off != len(body):
        raise CheckpointError("trailing bytes after last parameter")
    return out


def save_checkpoint(params: dict, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(params))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
