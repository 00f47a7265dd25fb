"""Central-vision crop geometry.

Pixel coordinates are integers with the origin at the top-left corner and
``x`` indexing columns. A crop of side ``n`` centred on ``(x, y)`` covers
columns ``[x - n // 2, x - n // 2 + n)`` and the same range of rows.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

PAPER_RESOLUTION = 540


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class GazePoint:
    x: int
    y: int


@dataclass(frozen=True)
class CropSpec:
    n: int
    resolution: int = PAPER_RESOLUTION

    def __post_init__(self):
        if self.resolution <= 0:
            raise GeometryError(f"resolution must be positive, got {self.resolution}")
        if not 0 < self.n <= self.resolution:
            raise GeometryError(
                f"crop side {self.n} must lie in (0, {self.resolution}]")

    @property
    def lower(self) -> int:
        return self.n // 2

    @property
    def upper(self) -> int:
        return self.resolution - (self.n - self.n // 2)


@dataclass(frozen=True)
class CorrectedGaze:
    x_cor: int
    y_cor: int


def _check_inside(x, y, resolution):
    x = np.asarray(x)
    y = np.asarray(y)
    if np.any((x < 0) | (x >= resolution) | (y < 0) | (y >= resolution)):
        raise GeometryError(f"gaze outside the {resolution}x{resolution} frame")


def correct_gaze_xy(x, y, spec: CropSpec):
    """Vectorised clamp of gaze coordinates so the crop stays in frame.

    Accepts scalars or integer arrays and returns arrays of the same shape.
    """
    _check_inside(x, y, spec.resolution)
    lo, hi = spec.lower, spec.upper
    return np.clip(x, lo, hi), np.clip(y, lo, hi)


def correct_gaze(g: GazePoint, spec: CropSpec) -> CorrectedGaze:
    """Shift the gaze by the minimum amount that keeps the crop in frame.

    Per axis this is ``x - max(0, x + n/2 - R) - min(0, x - n/2)``, i.e. a
    clamp to ``[n // 2, R - ceil(n / 2)]``.
    """
    x, y = correct_gaze_xy(g.x, g.y, spec)
    return CorrectedGaze(int(x), int(y))


def window_bounds(cg: CorrectedGaze, spec: CropSpec) -> tuple[int, int, int, int]:
    """Return ``(row0, row1, col0, col1)`` of the crop, half-open."""
    lo, hi = spec.lower, spec.upper
    if not (lo <= cg.x_cor <= hi and lo <= cg.y_cor <= hi):
        raise GeometryError(
            f"corrected gaze ({cg.x_cor}, {cg.y_cor}) outside [{lo}, {hi}]; "
            "was correct_gaze skipped?")
    c0 = cg.x_cor - spec.n // 2
    r0 = cg.y_cor - spec.n // 2
    return r0, r0 + spec.n, c0, c0 + spec.n


def crop_window(frame: np.ndarray, cg: CorrectedGaze, spec: CropSpec) -> np.ndarray:
    if frame.shape[0] != spec.resolution or frame.shape[1] != spec.resolution:
        raise GeometryError(
            f"frame shape {frame.shape[:2]} does not match resolution {spec.resolution}")
    r0, r1, c0, c1 = window_bounds(cg, spec)
    return frame[r0:r1, c0:c1]


def gaze_crop(frame: np.ndarray, g: GazePoint, spec: CropSpec) -> tuple[np.ndarray, CorrectedGaze]:
    cg = correct_gaze(g, spec)
    return crop_window(frame, cg, spec), cg


@dataclass
class GazeHistogram:
    counts: np.ndarray  # indexed [bin_y, bin_x]
    bin_size: int
    resolution: int
    total: int = 0
    mean: tuple[float, float] | None = None
    center: tuple[float, float] = field(default=(0.0, 0.0))

    @property
    def empty(self) -> bool:
        return self.total == 0

    @property
    def offset(self) -> tuple[float, float] | None:
        """Mean gaze minus frame centre, or None for an empty histogram."""
        if self.mean is None:
            return None
        return self.mean[0] - self.center[0], self.mean[1] - self.center[1]

    def nonzero_rows(self):
        ys, xs = np.nonzero(self.counts)
        for by, bx in zip(ys, xs):
            yield int(bx), int(by), int(self.counts[by, bx])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_x", "bin_y", "count"])
            for row in self.nonzero_rows():
                writer.writerow(row)


def gaze_histogram(gazes: Iterable[GazePoint], bin_size: int,
                   resolution: int = PAPER_RESOLUTION) -> GazeHistogram:
    """Bin gaze locations on a square grid; a partial last bin is kept."""
    if bin_size <= 0:
        raise GeometryError("bin_size must be positive")
    nb = math.ceil(resolution / bin_size)
    counts = np.zeros((nb, nb), dtype=np.int64)
    sx = sy = 0
    total = 0
    for g in gazes:
        _check_inside(g.x, g.y, resolution)
        counts[g.y // bin_size, g.x // bin_size] += 1
        sx += g.x
        sy += g.y
        total += 1
    mean = (sx / total, sy / total) if total else None
    center = (resolution / 2, resolution / 2)
    return GazeHistogram(counts, bin_size, resolution, total, mean, center)


def read_histogram_csv(path, bin_size: int, resolution: int) -> GazeHistogram:
    nb = math.ceil(resolution / bin_size)
    counts = np.zeros((nb, nb), dtype=np.int64)
    with open(Path(path), newline="") as fh:
        for row in csv.DictReader(fh):
            counts[int(row["bin_y"]), int(row["bin_x"])] = int(row["count"])
    total = int(counts.sum())
    return GazeHistogram(counts, bin_size, resolution, total, None,
                         (resolution / 2, resolution / 2))
