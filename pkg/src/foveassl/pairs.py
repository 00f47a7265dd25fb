"""Temporal positive pairs and the two-view augmentation pipeline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .geometry import CropSpec, GazePoint, correct_gaze, crop_window
from .ingest import FPS
from .shards import FrameRecord


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class TemporalWindow:
    delta_t_seconds: float
    fps: int = FPS

    def __post_init__(self):
        if self.delta_t_seconds < 0:
            raise ValueError("delta_t_seconds must be nonnegative")

    @property
    def max_offset_frames(self) -> int:
        # round half up
        return int(math.floor(self.delta_t_seconds * self.fps + 0.5))


@dataclass(frozen=True)
class IndexPair:
    anchor: int
    neighbor: int

    @property
    def offset_frames(self) -> int:
        return self.neighbor - self.anchor


@dataclass
class TemporalPair:
    anchor: FrameRecord
    neighbor: FrameRecord

    @property
    def offset_frames(self) -> int:
        return self.neighbor.frame_index - self.anchor.frame_index


def sample_offsets(anchors, lo, hi, k: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorised neighbour draw, uniform over ``[max(lo, t-k), min(hi, t+k)] \\ {t}``.

    Bounds are inclusive. Where the admissible set is empty the anchor is
    returned unchanged.
    """
    t = np.asarray(anchors, dtype=np.int64)
    lo = np.broadcast_to(np.asarray(lo, dtype=np.int64), t.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=np.int64), t.shape)
    if np.any((t < lo) | (t > hi)):
        raise ValueError("anchor outside video bounds")
    left = t - np.maximum(lo, t - k)
    right = np.minimum(hi, t + k) - t
    count = left + right
    j = rng.integers(0, np.maximum(count, 1))
    neighbor = np.where(j < left, t - left + j, t + 1 + (j - left))
    return np.where(count == 0, t, neighbor)


def sample_pair(anchor_index: int, video_bounds: tuple[int, int], window: TemporalWindow,
                rng: np.random.Generator) -> IndexPair:
    lo, hi = video_bounds
    n = sample_offsets(np.array([anchor_index]), lo, hi, window.max_offset_frames, rng)
    return IndexPair(anchor_index, int(n[0]))


def sample_present(anchor: int, present: np.ndarray, window: TemporalWindow,
                   rng: np.random.Generator) -> int:
    """Neighbour draw restricted to frame indices actually present.

    Used when ingest has dropped frames (one per 25-frame clip); the window
    is still measured in frame indices.
    """
    k = window.max_offset_frames
    cand = present[(np.abs(present - anchor) <= k) & (present != anchor)]
    if cand.size == 0:
        return int(anchor)
    return int(cand[rng.integers(0, cand.size)])


# -- augmentation --------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    scale: tuple[float, float] = (0.2, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    out_size: int = 224
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    gray_p: float = 0.2
    blur_p: tuple[float, float] = (0.5, 0.1)
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    max_tries: int = 10

    def __post_init__(self):
        for name in ("flip_p", "jitter_p", "gray_p"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise AugmentError(f"{name}={p} not a probability")
        if not all(0.0 <= p <= 1.0 for p in self.blur_p):
            raise AugmentError(f"blur_p={self.blur_p} not probabilities")
        if not 0 < self.scale[0] <= self.scale[1] <= 1.0:
            raise AugmentError(f"bad scale range {self.scale}")
        if self.out_size <= 0:
            raise AugmentError("out_size must be positive")

    @classmethod
    def identity(cls, out_size: int) -> "AugmentPolicy":
        return cls(scale=(1.0, 1.0), ratio=(1.0, 1.0), out_size=out_size, flip_p=0.0,
                   jitter_p=0.0, gray_p=0.0, blur_p=(0.0, 0.0))

    @classmethod
    def desk(cls, out_size: int = 32) -> "AugmentPolicy":
        """Default recipe with blur strength scaled to a small output."""
        return cls(out_size=out_size, blur_sigma=(0.1, 2.0 * out_size / 224))


def resized_crop(img: np.ndarray, top: int, left: int, h: int, w: int, out: int) -> np.ndarray:
    """Bilinear resample of ``img[top:top+h, left:left+w]`` to ``out x out``.

    Half-pixel centres, edge samples clamped to the crop box.
    """
    ys = top + (np.arange(out) + 0.5) * (h / out) - 0.5
    xs = left + (np.arange(out) + 0.5) * (w / out) - 0.5
    ys = np.clip(ys, top, top + h - 1)
    xs = np.clip(xs, left, left + w - 1)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, top + h - 1)
    x1 = np.minimum(x0 + 1, left + w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    a = img[y0][:, x0]
    b = img[y0][:, x1]
    c = img[y1][:, x0]
    d = img[y1][:, x1]
    return (a * (1 - wx) + b * wx) * (1 - wy) + (c * (1 - wx) + d * wx) * wy


def resize(img: np.ndarray, out: int) -> np.ndarray:
    img = as_float(img)
    return resized_crop(img, 0, 0, img.shape[0], img.shape[1], out)


def as_float(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return np.asarray(img, dtype=np.float64)


def crop_params(h: int, w: int, policy: AugmentPolicy, rng) -> tuple[int, int, int, int]:
    area = h * w
    log_r = (math.log(policy.ratio[0]), math.log(policy.ratio[1]))
    for _ in range(policy.max_tries):
        target = area * rng.uniform(*policy.scale)
        aspect = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    in_ratio = w / h
    if in_ratio < policy.ratio[0]:
        cw, ch = w, int(round(w / policy.ratio[0]))
    elif in_ratio > policy.ratio[1]:
        ch, cw = h, int(round(h * policy.ratio[1]))
    else:
        cw, ch = w, h
    return (h - ch) // 2, (w - cw) // 2, ch, cw


_GRAY = np.array([0.299, 0.587, 0.114])


def grayscale(img: np.ndarray) -> np.ndarray:
    return np.repeat((img @ _GRAY)[..., None], 3, axis=-1)


def _blend(a, b, factor):
    return np.clip(factor * a + (1 - factor) * b, 0.0, 1.0)


def color_jitter(img: np.ndarray, policy: AugmentPolicy, rng) -> np.ndarray:
    for op in rng.permutation(4):
        if op == 0 and policy.brightness > 0:
            f = rng.uniform(max(0.0, 1 - policy.brightness), 1 + policy.brightness)
            img = np.clip(img * f, 0.0, 1.0)
        elif op == 1 and policy.contrast > 0:
            f = rng.uniform(max(0.0, 1 - policy.contrast), 1 + policy.contrast)
            img = _blend(img, (img @ _GRAY).mean(), f)
        elif op == 2 and policy.saturation > 0:
            f = rng.uniform(max(0.0, 1 - policy.saturation), 1 + policy.saturation)
            img = _blend(img, grayscale(img), f)
        elif op == 3 and policy.hue > 0:
            shift = rng.uniform(-policy.hue, policy.hue)
            hsv = rgb_to_hsv(img)
            hsv[..., 0] = (hsv[..., 0] + shift) % 1.0
            img = hsv_to_rgb(hsv)
    return img


def augment(view: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator,
            view_index: int = 0) -> np.ndarray:
    """One augmented view as float64 in ``[0, 1]`` of shape ``(s, s, 3)``."""
    img = as_float(view)
    h, w = img.shape[:2]
    if policy.out_size > min(h, w):
        raise AugmentError(f"output side {policy.out_size} exceeds input {h}x{w}")
    top, left, ch, cw = crop_params(h, w, policy, rng)
    out = resized_crop(img, top, left, ch, cw, policy.out_size)
    if rng.random() < policy.flip_p:
        out = out[:, ::-1]
    if rng.random() < policy.jitter_p:
        out = color_jitter(out, policy, rng)
    if rng.random() < policy.gray_p:
        out = grayscale(out)
    if rng.random() < policy.blur_p[view_index]:
        sigma = rng.uniform(*policy.blur_sigma)
        out = ndimage.gaussian_filter(out, sigma=(sigma, sigma, 0), mode="reflect")
    return np.ascontiguousarray(out)


def record_view(record: FrameRecord, spec: CropSpec) -> np.ndarray:
    """Pixels of the gaze crop for ``spec``, cropping here if the record is full-frame."""
    if record.n == spec.n:
        return record.pixels
    if record.n == spec.resolution:
        cg = correct_gaze(GazePoint(record.gaze_x, record.gaze_y), spec)
        return crop_window(record.pixels, cg, spec)
    raise AugmentError(f"record side {record.n} matches neither crop {spec.n} "
                       f"nor resolution {spec.resolution}")


def make_training_pair(pair: TemporalPair, spec: CropSpec, policy: AugmentPolicy,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    view_q = augment(record_view(pair.anchor, spec), policy, rng, view_index=0)
    view_k = augment(record_view(pair.neighbor, spec), policy, rng, view_index=1)
    return view_q, view_k
