"""Binary frame shards and their text manifest.

Shard layout, all integers little-endian::

    b"FVSS" | version u16
    repeated:
        video_id u64 | frame_index u32 | timestamp_ms u32 |
        gaze_x u16 | gaze_y u16 | gaze_origin u8 | n u16 | payload_len u32 |
        payload (n*n*3 bytes, RGB8 row-major) | crc32 u32

The crc covers every preceding byte of the record. The manifest has one
``path<TAB>record_count`` line per shard and ends with ``skipped<TAB>count``.
A run that aborted writes ``partial<TAB>1`` before the footer.
"""

from __future__ import annotations

import enum
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"FVSS"
VERSION = 1
_FILE_HEADER = struct.Struct("<4sH")
_RECORD_HEADER = struct.Struct("<QIIHHBHI")
_CRC = struct.Struct("<I")


class ShardError(Exception):
    pass


class GazeOrigin(enum.IntEnum):
    GROUND_TRUTH = 0
    PREDICTED = 1


@dataclass
class FrameRecord:
    video_id: int
    frame_index: int
    timestamp_ms: int
    gaze_x: int
    gaze_y: int
    gaze_origin: GazeOrigin
    pixels: np.ndarray  # uint8, (n, n, 3)

    @property
    def n(self) -> int:
        return self.pixels.shape[0]

    def to_bytes(self) -> bytes:
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if px.ndim != 3 or px.shape[0] != px.shape[1] or px.shape[2] != 3:
            raise ShardError(f"pixels must be (n, n, 3) uint8, got {px.shape}")
        payload = px.tobytes()
        head = _RECORD_HEADER.pack(
            self.video_id, self.frame_index, self.timestamp_ms,
            self.gaze_x, self.gaze_y, int(self.gaze_origin), px.shape[0],
            len(payload))
        body = head + payload
        return body + _CRC.pack(zlib.crc32(body))

    def same_as(self, other: "FrameRecord") -> bool:
        return self.to_bytes() == other.to_bytes()


class ShardWriter:
    """Single-owner append-only writer for one shard file."""

    def __init__(self, path):
        self.path = Path(path)
        self.count = 0
        self._fh = open(self.path, "wb")
        self._fh.write(_FILE_HEADER.pack(MAGIC, VERSION))

    def write(self, record: FrameRecord) -> None:
        self._fh.write(record.to_bytes())
        self.count += 1

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class ReadStats:
    records: int = 0
    crc_mismatches: int = 0
    truncated: int = 0


def iter_shard(path, stats: ReadStats | None = None) -> Iterator[FrameRecord]:
    """Yield valid records from one shard in written order.

    Records failing their checksum are dropped and counted. A truncated
    trailing record is counted and ends the shard.
    """
    stats = stats if stats is not None else ReadStats()
    data = Path(path).read_bytes()
    if len(data) < _FILE_HEADER.size:
        raise ShardError(f"{path}: missing shard header")
    magic, version = _FILE_HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ShardError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ShardError(f"{path}: unsupported version {version}")
    pos = _FILE_HEADER.size
    end = len(data)
    while pos < end:
        if pos + _RECORD_HEADER.size > end:
            stats.truncated += 1
            log.warning("%s: truncated record header at byte %d", path, pos)
            return
        (video_id, frame_index, ts, gx, gy, origin, n,
         plen) = _RECORD_HEADER.unpack_from(data, pos)
        rec_end = pos + _RECORD_HEADER.size + plen
        if rec_end + _CRC.size > end:
            stats.truncated += 1
            log.warning("%s: truncated record at byte %d", path, pos)
            return
        (crc,) = _CRC.unpack_from(data, rec_end)
        body = data[pos:rec_end]
        pos = rec_end + _CRC.size
        if zlib.crc32(body) != crc or plen != n * n * 3 or origin > 1:
            stats.crc_mismatches += 1
            continue
        start = rec_end - plen
        pixels = np.frombuffer(data, dtype=np.uint8, count=plen,
                               offset=start).reshape(n, n, 3).copy()
        stats.records += 1
        yield FrameRecord(video_id, frame_index, ts, gx, gy,
                          GazeOrigin(origin), pixels)


@dataclass
class ShardManifest:
    shards: list[tuple[str, int]] = field(default_factory=list)
    skipped: int = 0
    partial: bool = False
    root: Path | None = None

    @property
    def total_records(self) -> int:
        return sum(c for _, c in self.shards)

    def paths(self) -> list[Path]:
        base = self.root or Path(".")
        return [base / p for p, _ in self.shards]

    def write(self, path) -> None:
        lines = [f"{p}\t{c}" for p, c in self.shards]
        if self.partial:
            lines.append("partial\t1")
        lines.append(f"skipped\t{self.skipped}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def read(cls, path) -> "ShardManifest":
        path = Path(path)
        man = cls(root=path.parent)
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            key, _, value = line.partition("\t")
            if key == "skipped":
                man.skipped = int(value)
            elif key == "partial":
                man.partial = True
            else:
                man.shards.append((key, int(value)))
        return man


def read_shards(manifest: ShardManifest,
                stats: ReadStats | None = None) -> Iterator[FrameRecord]:
    stats = stats if stats is not None else ReadStats()
    for path in manifest.paths():
        yield from iter_shard(path, stats)


def write_records(records: Iterable[FrameRecord], out_dir, records_per_shard: int = 4096,
                  prefix: str = "shard") -> ShardManifest:
    """Write records into numbered shards and return the manifest (not saved)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    man = ShardManifest(root=out_dir)
    writer = None
    for rec in records:
        if writer is None or writer.count >= records_per_shard:
            if writer is not None:
                writer.close()
                man.shards.append((writer.path.name, writer.count))
            writer = ShardWriter(out_dir / f"{prefix}-{len(man.shards):05d}.fvss")
        writer.write(rec)
    if writer is not None:
        writer.close()
        man.shards.append((writer.path.name, writer.count))
    return man
