"""Video ingest: clip segmentation, gaze resolution and gaze-centred cropping.

Frames arrive at the extraction rate (5 fps). They are grouped into clips of
25 consecutive frames; the first 24 frames of each clip form three 8-frame
sequences, which is the unit a gaze predictor consumes. Every kept frame is
cropped around its (clamped) gaze and written to shards.
"""

from __future__ import annotations

import csv
import enum
import logging
import zlib
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy import ndimage

from .geometry import CropSpec, GazePoint, correct_gaze, crop_window
from .shards import FrameRecord, GazeOrigin, ShardManifest, ShardWriter

log = logging.getLogger(__name__)

FPS = 5
CLIP_LEN = 25
SEQ_LEN = 8
SEQS_PER_CLIP = 3
FRAME_MS = 1000 // FPS


class IngestError(Exception):
    pass


class ShortClipError(IngestError):
    pass


@dataclass
class Frame:
    """A full-resolution frame before cropping."""
    video_id: int
    frame_index: int
    pixels: np.ndarray  # uint8 (R, R, 3)
    gaze: GazePoint | None = None

    @property
    def timestamp_ms(self) -> int:
        return self.frame_index * FRAME_MS


@dataclass
class Video:
    video_id: int
    frames: Iterable[np.ndarray | None]  # None marks a frame that failed to decode
    gazes: Sequence[GazePoint | None] | None = None


def segment_clip(frames: Sequence[Frame]) -> list[list[Frame]]:
    """Split a 25-frame clip into three contiguous 8-frame sequences.

    The last frame of the clip is not used.
    """
    if len(frames) != CLIP_LEN:
        raise ShortClipError(f"clip has {len(frames)} frames, need {CLIP_LEN}")
    vids = {f.video_id for f in frames}
    if len(vids) != 1:
        raise IngestError(f"clip spans videos {sorted(vids)}")
    idx = [f.frame_index for f in frames]
    if any(b - a != 1 for a, b in zip(idx, idx[1:])):
        raise IngestError("clip frame indices are not contiguous")
    return [list(frames[i * SEQ_LEN:(i + 1) * SEQ_LEN]) for i in range(SEQS_PER_CLIP)]


# -- gaze sources -------------------------------------------------------------

class GazeMode(enum.Enum):
    GROUND_TRUTH = "ground_truth"
    PREDICTOR = "predictor"
    CENTER = "center"


Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass
class GazeSource:
    """Where gaze locations come from.

    ``predictor`` maps a stacked sequence ``(8, R, R, 3)`` to nonnegative
    saliency maps ``(8, R, R)``. ``CENTER`` ignores content and fixes the
    gaze at the frame centre (the gaze-agnostic baseline).
    """
    mode: GazeMode = GazeMode.GROUND_TRUTH
    predictor: Predictor | None = None

    @property
    def origin(self) -> GazeOrigin:
        if self.mode is GazeMode.GROUND_TRUTH:
            return GazeOrigin.GROUND_TRUTH
        return GazeOrigin.PREDICTED


class MissingGazeError(IngestError):
    pass


def saliency_argmax(saliency: np.ndarray) -> GazePoint:
    """Most salient pixel; ties go to the first pixel in row-major order."""
    flat = int(np.argmax(saliency))
    y, x = divmod(flat, saliency.shape[1])
    return GazePoint(x, y)


def resolve_gaze(seq: Sequence[Frame], src: GazeSource) -> list[GazePoint]:
    if src.mode is GazeMode.GROUND_TRUTH:
        missing = [f.frame_index for f in seq if f.gaze is None]
        if missing:
            raise MissingGazeError(f"frames {missing} lack ground-truth gaze")
        return [f.gaze for f in seq]
    if src.mode is GazeMode.CENTER:
        r = seq[0].pixels.shape[0]
        return [GazePoint(r // 2, r // 2) for _ in seq]
    if src.predictor is None:
        raise IngestError("predictor mode needs a predictor")
    stack = np.stack([f.pixels for f in seq])
    maps = np.asarray(src.predictor(stack))
    if maps.shape != stack.shape[:3]:
        raise IngestError(f"saliency maps {maps.shape} do not match frames {stack.shape[:3]}")
    if np.any(maps < 0):
        raise IngestError("saliency maps must be nonnegative")
    return [saliency_argmax(m) for m in maps]


@dataclass
class StubSaliency:
    """Deterministic stand-in for a learned gaze predictor.

    Saliency is a frame-difference motion term, gated by the current
    frame's brightness so that only where something *arrives* lights up,
    plus a Gaussian centre-bias prior. From the second frame on, the map is
    zeroed outside a disc of ``radius`` pixels around the previous argmax,
    which bounds the frame-to-frame gaze displacement.
    """
    radius: float = 40.0
    center_weight: float = 0.05
    center_sigma_frac: float = 0.25
    smooth_sigma: float = 1.0

    def __call__(self, seq: np.ndarray) -> np.ndarray:
        frames = np.asarray(seq, dtype=np.float64) / 255.0
        t, h, w, _ = frames.shape
        lum = frames.mean(axis=3)
        diff = np.abs(np.diff(frames, axis=0)).sum(axis=3)
        motion = np.empty((t, h, w))
        motion[0] = diff[0] * lum[0] if t > 1 else 0.0
        motion[1:] = diff * lum[1:]
        if self.smooth_sigma > 0:
            motion = ndimage.gaussian_filter(motion, sigma=(0, self.smooth_sigma, self.smooth_sigma))
        yy, xx = np.mgrid[0:h, 0:w]
        sigma = self.center_sigma_frac * max(h, w)
        prior = np.exp(-((xx - w // 2) ** 2 + (yy - h // 2) ** 2) / (2 * sigma ** 2))
        maps = motion + self.center_weight * prior
        out = np.empty_like(maps)
        prev = None
        for i in range(t):
            m = maps[i]
            if prev is not None:
                inside = (xx - prev.x) ** 2 + (yy - prev.y) ** 2 <= self.radius ** 2
                # the floor keeps inside pixels strictly above the zeroed outside
                m = np.where(inside, m + 1e-9, 0.0)
            out[i] = m
            prev = saliency_argmax(m)
        return out


def stub_saliency(seq: np.ndarray, radius: float = 40.0) -> np.ndarray:
    return StubSaliency(radius=radius)(seq)


# -- video sources ------------------------------------------------------------

def _to_square(img: np.ndarray, resolution: int) -> np.ndarray:
    from PIL import Image

    h, w = img.shape[:2]
    s = min(h, w)
    r0, c0 = (h - s) // 2, (w - s) // 2
    img = img[r0:r0 + s, c0:c0 + s]
    if s != resolution:
        img = np.asarray(Image.fromarray(img).resize((resolution, resolution), Image.BILINEAR))
    return img


def _stable_id(name: str) -> int:
    return int(name) if name.isdigit() else zlib.crc32(name.encode())


def load_gaze_csv(path) -> dict[int, GazePoint]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out[int(row["frame_index"])] = GazePoint(int(row["gaze_x"]), int(row["gaze_y"]))
    return out


class FrameDirectorySource:
    """Videos stored as one directory of image frames each.

    Frames are read in filename order and centre-squared then resized to
    ``resolution``. An optional ``gaze.csv`` (``frame_index,gaze_x,gaze_y``)
    supplies ground-truth gaze.
    """

    suffixes = (".png", ".jpg", ".jpeg", ".bmp")

    def __init__(self, root, resolution: int):
        self.root = Path(root)
        self.resolution = resolution

    def _frames(self, files):
        from PIL import Image

        for p in files:
            try:
                with Image.open(p) as im:
                    yield _to_square(np.asarray(im.convert("RGB")), self.resolution)
            except (OSError, ValueError) as exc:
                log.warning("failed to decode %s: %s", p, exc)
                yield None

    def __iter__(self) -> Iterator[Video]:
        if not self.root.is_dir():
            raise IngestError(f"{self.root} is not a directory")
        for d in sorted(p for p in self.root.iterdir() if p.is_dir()):
            files = sorted(p for p in d.iterdir() if p.suffix.lower() in self.suffixes)
            gazes = None
            gfile = d / "gaze.csv"
            if gfile.exists():
                table = load_gaze_csv(gfile)
                gazes = [table.get(i) for i in range(len(files))]
            yield Video(_stable_id(d.name), self._frames(files), gazes)


class VideoFileSource:
    """Decode video files with OpenCV, sampling frames at ``fps``."""

    def __init__(self, paths: Sequence, resolution: int, fps: float = FPS):
        self.paths = [Path(p) for p in paths]
        self.resolution = resolution
        self.fps = fps

    def _frames(self, path):
        import cv2

        cap = cv2.VideoCapture(str(path))
        if not cap.isOpened():
            raise IngestError(f"cannot open {path}")
        native = cap.get(cv2.CAP_PROP_FPS) or self.fps
        step = native / self.fps
        next_t, i = 0.0, 0
        try:
            while True:
                ok, bgr = cap.read()
                if not ok:
                    break
                if i >= next_t - 1e-9:
                    next_t += step
                    yield _to_square(bgr[:, :, ::-1].copy(), self.resolution)
                i += 1
        finally:
            cap.release()

    def __iter__(self) -> Iterator[Video]:
        for p in self.paths:
            yield Video(_stable_id(p.stem), self._frames(p))


# -- shard building -------------------------------------------------------------

@dataclass
class IngestStats:
    clips: int = 0
    records: int = 0
    decode_failures: int = 0
    short_clip_frames: int = 0
    missing_gaze_frames: int = 0

    @property
    def skipped(self) -> int:
        return self.decode_failures + self.short_clip_frames + self.missing_gaze_frames


def iter_clips(video: Video, stats: IngestStats) -> Iterator[list[Frame]]:
    """Group decoded frames into runs of 25 consecutive frames.

    A decode failure breaks the run; the frames collected so far form a
    short clip and are skipped.
    """
    buf: list[Frame] = []
    for i, px in enumerate(video.frames):
        if px is None:
            stats.decode_failures += 1
            stats.short_clip_frames += len(buf)
            if buf:
                log.info("video %d: short clip of %d frames skipped", video.video_id, len(buf))
            buf = []
            continue
        gaze = video.gazes[i] if video.gazes is not None and i < len(video.gazes) else None
        buf.append(Frame(video.video_id, i, px, gaze))
        if len(buf) == CLIP_LEN:
            yield buf
            buf = []
    if buf:
        log.info("video %d: trailing short clip of %d frames skipped", video.video_id, len(buf))
        stats.short_clip_frames += len(buf)


def process_clip(clip: Sequence[Frame], src: GazeSource, spec: CropSpec) -> list[FrameRecord]:
    out = []
    for seq in segment_clip(clip):
        gazes = resolve_gaze(seq, src)
        for f, g in zip(seq, gazes):
            cg = correct_gaze(g, spec)
            px = np.ascontiguousarray(crop_window(f.pixels, cg, spec), dtype=np.uint8)
            out.append(FrameRecord(f.video_id, f.frame_index, f.timestamp_ms,
                                   cg.x_cor, cg.y_cor, src.origin, px))
    return out


@dataclass
class IngestResult:
    manifest: ShardManifest
    stats: IngestStats = field(default_factory=IngestStats)


def build_shards(videos: Iterable[Video], gaze_source: GazeSource, spec: CropSpec,
                 out_dir, records_per_shard: int = 4096, workers: int = 1,
                 manifest_name: str = "manifest.tsv") -> IngestResult:
    """Run the ingest pipeline and write shards plus a manifest.

    Clip processing may fan out over ``workers`` threads; the single writer
    consumes results in clip order so output is independent of scheduling.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = IngestStats()
    man = ShardManifest(root=out_dir)
    writer: ShardWriter | None = None

    def clips():
        for video in videos:
            yield from iter_clips(video, stats)

    def work(clip):
        try:
            return process_clip(clip, gaze_source, spec)
        except MissingGazeError as exc:
            log.info("clip skipped: %s", exc)
            return len(clip)

    def emit(result):
        nonlocal writer
        if isinstance(result, int):
            stats.missing_gaze_frames += result
            return
        stats.clips += 1
        for rec in result:
            if writer is None or writer.count >= records_per_shard:
                if writer is not None:
                    writer.close()
                    man.shards.append((writer.path.name, writer.count))
                    writer = None
                writer = ShardWriter(out_dir / f"shard-{len(man.shards):05d}.fvss")
            writer.write(rec)
            stats.records += 1

    try:
        if workers <= 1:
            for clip in clips():
                emit(work(clip))
        else:
            with ThreadPoolExecutor(workers) as pool:
                pending: deque = deque()
                for clip in clips():
                    pending.append(pool.submit(work, clip))
                    if len(pending) >= 2 * workers:
                        emit(pending.popleft().result())
                while pending:
                    emit(pending.popleft().result())
        if writer is not None:
            writer.close()
            man.shards.append((writer.path.name, writer.count))
            writer = None
    except OSError as exc:
        if writer is not None:
            writer.close()
            man.shards.append((writer.path.name, writer.count))
        man.partial = True
        man.skipped = stats.skipped
        try:
            man.write(out_dir / manifest_name)
        except OSError:
            pass
        raise IngestError(f"I/O failure during ingest: {exc}") from exc
    man.skipped = stats.skipped
    man.write(out_dir / manifest_name)
    return IngestResult(man, stats)
