"""FVCK checkpoint files.

Layout (little-endian): ``b"FVCK"`` | version u16 | descriptor (u32 length +
UTF-8) | per tensor: name (u32 length + UTF-8), rank u8, dims u32 each,
float64 values | crc32 u32 of everything before it.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .contrastive import EncoderConfig, EncoderState

MAGIC = b"FVCK"
VERSION = 1


class CheckpointError(Exception):
    pass


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode(config: EncoderConfig, state: EncoderState) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION), _str(config.descriptor())]
    tensors = [(f"q.{k}", v) for k, v in sorted(state.theta_q.items())]
    tensors += [(f"k.{k}", v) for k, v in sorted(state.theta_k.items())]
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(_str(name))
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(data: bytes) -> tuple[EncoderConfig, EncoderState]:
    if len(data) < 10 or data[:4] != MAGIC:
        raise CheckpointError("not an FVCK checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("checkpoint checksum mismatch")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 6

    def read_str():
        nonlocal pos
        (n,) = struct.unpack_from("<I", body, pos)
        pos += 4
        s = body[pos:pos + n].decode("utf-8")
        pos += n
        return s

    config = EncoderConfig.from_descriptor(read_str())
    q, k = {}, {}
    while pos < len(body):
        name = read_str()
        (rank,) = struct.unpack_from("<B", body, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * count
        side, _, key = name.partition(".")
        (q if side == "q" else k)[key] = arr
    return config, EncoderState(q, k)


def save(path, config: EncoderConfig, state: EncoderState) -> None:
    Path(path).write_bytes(encode(config, state))


def load(path) -> tuple[EncoderConfig, EncoderState]:
    return decode(Path(path).read_bytes())
