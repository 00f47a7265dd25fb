"""Seeded synthetic egocentric scenes and object-centred probe datasets.

Videos show a panning view over a textured background with a few moving,
rotating objects. A simulated observer fixates one object at a time (gaze
= object centroid plus bounded jitter) and occasionally saccades to another
object. Head turns cut the view to another background while the objects
stay put, so the background changes under a steady fixation. Probe datasets render the same objects centred and enlarged, the way
object-recognition benchmarks frame them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import GazePoint
from .ingest import Video

SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond", "tee", "bar", "ell", "hourglass")


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    r2 = u * u + v * v
    if shape == "disk":
        return r2 <= 1.0
    if shape == "square":
        return np.maximum(au, av) <= 0.8
    if shape == "triangle":
        return (v <= 0.8) & (v >= 1.6 * au - 0.9)
    if shape == "cross":
        return ((au <= 0.3) & (av <= 0.95)) | ((av <= 0.3) & (au <= 0.95))
    if shape == "ring":
        return (r2 <= 1.0) & (r2 >= 0.3)
    if shape == "diamond":
        return au + av <= 1.0
    if shape == "tee":
        return ((au <= 0.9) & (v >= -0.9) & (v <= -0.45)) | ((au <= 0.25) & (av <= 0.9))
    if shape == "bar":
        return (u * u) / 0.95 + (v * v) / 0.2 <= 1.0
    if shape == "ell":
        return ((u >= -0.8) & (u <= -0.3) & (av <= 0.9)) | ((u >= -0.8) & (u <= 0.8) & (v >= 0.4) & (v <= 0.9))
    if shape == "hourglass":
        return (av <= 0.9) & (au <= np.abs(v) * 0.9 + 0.15)
    raise ValueError(shape)


@dataclass(frozen=True)
class ObjectClass:
    shape: str
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    stripe_freq: float
    stripe_angle: float


@dataclass
class SyntheticSceneSpec:
    n_classes: int = 16
    n_backgrounds: int = 12
    frame_size: int = 64
    n_videos: int = 96
    video_frames: int = 50
    objects_per_video: int = 3
    object_radius: tuple[float, float] = (7.0, 10.0)
    object_speed: float = 1.2
    spin: float = 0.08
    camera_speed: float = 0.8
    gaze_jitter: float = 3.0
    saccade_rate: float = 0.02
    palette_size: int = 4
    background_switch_rate: float = 0.1
    canvas_factor: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2 or self.n_backgrounds < 1:
            raise ValueError("need at least two object classes and one background")
        if self.palette_size < 1:
            raise ValueError("palette_size must be positive")
        if not 0.0 <= self.background_switch_rate <= 1.0:
            raise ValueError("background_switch_rate must be in [0, 1]")
        if self.objects_per_video > self.n_classes:
            raise ValueError("objects_per_video exceeds the number of classes")


class World:
    """Object classes and background textures shared by videos and probe sets."""

    def __init__(self, spec: SyntheticSceneSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.seed, 1])
        self.classes = [self._make_class(i, spec.palette_size, rng) for i in range(spec.n_classes)]
        size = spec.frame_size * spec.canvas_factor
        self.backgrounds = [self._make_background(size, rng) for _ in range(spec.n_backgrounds)]

    @staticmethod
    def _make_class(i, palette_size, rng) -> ObjectClass:
        # classes share a small palette so colour alone does not identify them
        shape = SHAPES[i % len(SHAPES)]
        # (shape, colour) stays unique for up to len(SHAPES) * palette_size classes
        hue = (((i + i // len(SHAPES)) % palette_size) * 0.61803) % 1.0
        a = _hsv(hue, 0.85, 0.95)
        b = _hsv((hue + 0.5) % 1.0, 0.6, 0.35)
        return ObjectClass(shape, a, b, float(rng.uniform(2.0, 5.0)), float(rng.uniform(0, np.pi)))

    @staticmethod
    def _make_background(size, rng) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size] / size
        base = np.array(_hsv(rng.uniform(), rng.uniform(0.2, 0.6), rng.uniform(0.35, 0.75)))
        alt = np.array(_hsv(rng.uniform(), rng.uniform(0.2, 0.6), rng.uniform(0.35, 0.75)))
        field_ = np.zeros((size, size))
        for _ in range(3):
            ang = rng.uniform(0, np.pi)
            freq = rng.uniform(3, 12)
            field_ += np.sin(2 * np.pi * freq * (xx * np.cos(ang) + yy * np.sin(ang)) + rng.uniform(0, 6.3))
        blobs = ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 16, mode="wrap")
        field_ = field_ / 3 + 4 * blobs / (np.abs(blobs).max() + 1e-9)
        t = 1 / (1 + np.exp(-2 * field_))
        img = base * (1 - t[..., None]) + alt * t[..., None]
        img += 0.04 * rng.standard_normal((size, size, 3))
        return np.clip(img, 0, 1)

    def render_object(self, canvas: np.ndarray, cls: int, cx: float, cy: float, radius: float,
                      angle: float, color_scale: float = 1.0, stripe_scale: float = 1.0) -> np.ndarray:
        """Paint an object onto ``canvas`` in place; return its full mask."""
        h, w = canvas.shape[:2]
        oc = self.classes[cls]
        yy, xx = np.mgrid[0:h, 0:w]
        dx = (xx + 0.5 - cx) / radius
        dy = (yy + 0.5 - cy) / radius
        c, s = np.cos(angle), np.sin(angle)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        mask = _shape_mask(oc.shape, u, v)
        proj = u * np.cos(oc.stripe_angle) + v * np.sin(oc.stripe_angle)
        stripe = np.sin(np.pi * oc.stripe_freq * stripe_scale * proj) > 0
        col = np.where(stripe[..., None], np.array(oc.color_a), np.array(oc.color_b)) * color_scale
        canvas[mask] = np.clip(col[mask], 0, 1)
        return mask

    # -- videos --------------------------------------------------------------

    def video(self, index: int) -> "SyntheticVideo":
        return generate_video(self, index)

    def videos(self):
        for i in range(self.spec.n_videos):
            yield self.video(i)


def _hsv(h, s, v):
    from colorsys import hsv_to_rgb
    return tuple(float(x) for x in hsv_to_rgb(h, s, v))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


@dataclass
class FrameTruth:
    class_id: int
    background_id: int
    gaze: GazePoint
    centroid: tuple[float, float]
    saccade: bool


@dataclass
class SyntheticVideo:
    video_id: int
    background_id: int  # background of the first frame
    frames: np.ndarray  # uint8 (T, R, R, 3)
    masks: np.ndarray  # bool (T, R, R), attended object's full footprint
    truth: list[FrameTruth] = field(default_factory=list)

    @property
    def gazes(self) -> list[GazePoint]:
        return [t.gaze for t in self.truth]

    def as_video(self, with_gaze: bool = True) -> Video:
        return Video(self.video_id, list(self.frames), self.gazes if with_gaze else None)


def generate_video(world: World, index: int) -> SyntheticVideo:
    spec = world.spec
    rng = np.random.default_rng([spec.seed, 2, index])
    R = spec.frame_size
    bg_id = first_bg = int(rng.integers(spec.n_backgrounds))
    canvas = world.backgrounds[bg_id]
    span = canvas.shape[0] - R
    cam = rng.uniform(0, span, size=2)
    cam_v = rng.normal(0, spec.camera_speed, size=2)
    k = spec.objects_per_video
    classes = rng.choice(spec.n_classes, size=k, replace=False)
    radius = rng.uniform(*spec.object_radius, size=k)
    pos = np.stack([rng.uniform(radius, R - radius), rng.uniform(radius, R - radius)], axis=1)
    vel = rng.normal(0, spec.object_speed, size=(k, 2))
    angle = rng.uniform(0, 2 * np.pi, size=k)
    omega = rng.normal(0, spec.spin, size=k)
    attended = int(rng.integers(k))
    frames = np.empty((spec.video_frames, R, R, 3), dtype=np.uint8)
    masks = np.empty((spec.video_frames, R, R), dtype=bool)
    truth = []
    for t in range(spec.video_frames):
        saccade = False
        # a head turn: the camera cuts to another surface, gaze stays on the object
        if t > 0 and spec.background_switch_rate > 0 and spec.n_backgrounds > 1 \
                and rng.random() < spec.background_switch_rate:
            bg_id = int((bg_id + 1 + rng.integers(spec.n_backgrounds - 1)) % spec.n_backgrounds)
            canvas = world.backgrounds[bg_id]
            cam = rng.uniform(0, span, size=2)
        if t > 0 and rng.random() < spec.saccade_rate:
            attended = int((attended + 1 + rng.integers(k - 1)) % k) if k > 1 else attended
            saccade = True
        cx0, cy0 = int(cam[0]), int(cam[1])
        img = canvas[cy0:cy0 + R, cx0:cx0 + R].copy()
        att_mask = None
        for j in range(k):
            m = world.render_object(img, int(classes[j]), pos[j, 0], pos[j, 1], radius[j], angle[j])
            if j == attended:
                att_mask = m
        ys, xs = np.nonzero(att_mask)
        cen = (float(xs.mean()), float(ys.mean()))
        # uniform jitter inside a disc
        r = spec.gaze_jitter * np.sqrt(rng.random())
        phi = rng.uniform(0, 2 * np.pi)
        gx = int(np.clip(round(cen[0] + r * np.cos(phi)), 0, R - 1))
        gy = int(np.clip(round(cen[1] + r * np.sin(phi)), 0, R - 1))
        frames[t] = to_uint8(img)
        masks[t] = att_mask
        truth.append(FrameTruth(int(classes[attended]), bg_id, GazePoint(gx, gy), cen, saccade))
        # dynamics
        vel = 0.9 * vel + rng.normal(0, spec.object_speed * 0.45, size=(k, 2))
        pos += vel
        for d in range(2):
            lo, hi = radius, R - radius
            below, above = pos[:, d] < lo, pos[:, d] > hi
            pos[below, d] = 2 * lo[below] - pos[below, d]
            pos[above, d] = 2 * hi[above] - pos[above, d]
            vel[below | above, d] *= -1
        angle += omega
        cam_v = 0.95 * cam_v + rng.normal(0, spec.camera_speed * 0.3, size=2)
        cam = cam + cam_v
        for d in range(2):
            if cam[d] < 0 or cam[d] > span:
                cam[d] = np.clip(cam[d], 0, span)
                cam_v[d] *= -1
    return SyntheticVideo(index, first_bg, frames, masks, truth)


def write_video_dir(video: SyntheticVideo, out_dir) -> Path:
    """Frames as PNG plus ``gaze.csv``, ``meta.csv`` and ``masks.npz``."""
    from PIL import Image

    d = Path(out_dir) / f"{video.video_id:06d}"
    d.mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(video.frames):
        Image.fromarray(fr).save(d / f"frame_{i:05d}.png")
    with open(d / "gaze.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "gaze_x", "gaze_y"])
        for i, t in enumerate(video.truth):
            w.writerow([i, t.gaze.x, t.gaze.y])
    with open(d / "meta.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_index", "class_id", "background_id", "centroid_x", "centroid_y", "saccade"])
        for i, t in enumerate(video.truth):
            w.writerow([i, t.class_id, t.background_id, f"{t.centroid[0]:.3f}",
                        f"{t.centroid[1]:.3f}", int(t.saccade)])
    np.savez_compressed(d / "masks.npz", masks=video.masks)
    return d


def write_world(spec: SyntheticSceneSpec, out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "scene.json").write_text(json.dumps(asdict(spec), indent=2))
    world = World(spec)
    return [write_video_dir(v, out_dir) for v in world.videos()]


# -- probe datasets -------------------------------------------------------------

@dataclass
class ProbeData:
    """Labelled images with the metadata the split rules need."""
    name: str
    images: np.ndarray  # uint8 (N, E, E, 3)
    labels: np.ndarray
    backgrounds: np.ndarray | None = None
    split: np.ndarray | None = None  # provided split: True for train
    object_masks: np.ndarray | None = None
    variants: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)


def _patch(world: World, bg: int, size: int, rng, zoom: float = 1.0) -> np.ndarray:
    canvas = world.backgrounds[bg]
    side = int(round(size * zoom))
    y, x = rng.integers(0, canvas.shape[0] - side + 1, size=2)
    patch = canvas[y:y + side, x:x + side]
    if side != size:
        from .pairs import resize
        patch = resize(patch, size)
    return patch.copy()


def object_image(world: World, cls: int, bg: int | None, size: int, rng,
                 scale=(0.28, 0.36), offset: float = 0.08, **render) -> tuple[np.ndarray, np.ndarray]:
    img = _patch(world, bg, size, rng) if bg is not None else np.zeros((size, size, 3))
    r = size * rng.uniform(*scale)
    cx = size / 2 + rng.uniform(-offset, offset) * size
    cy = size / 2 + rng.uniform(-offset, offset) * size
    mask = world.render_object(img, cls, cx, cy, r, rng.uniform(0, 2 * np.pi), **render)
    return img, mask


def core50_like(world: World, size: int = 36, per_pair: int = 4, seed: int = 0) -> ProbeData:
    """Every class in front of every background; split by background later."""
    rng = np.random.default_rng([seed, 11])
    imgs, labels, bgs = [], [], []
    for c in range(world.spec.n_classes):
        for b in range(world.spec.n_backgrounds):
            for _ in range(per_pair):
                img, _ = object_image(world, c, b, size, rng)
                imgs.append(to_uint8(img))
                labels.append(c)
                bgs.append(b)
    return ProbeData("synth-core50", np.stack(imgs), np.array(labels), np.array(bgs))


def coil_like(world: World, size: int = 36, views: int = 24, seed: int = 0) -> ProbeData:
    """Objects on black, rotated through ``views`` poses."""
    rng = np.random.default_rng([seed, 12])
    imgs, labels = [], []
    for c in range(world.spec.n_classes):
        for k in range(views):
            img = np.zeros((size, size, 3))
            world.render_object(img, c, size / 2, size / 2, size * 0.34, 2 * np.pi * k / views)
            imgs.append(to_uint8(img))
            labels.append(c)
    perm = rng.permutation(len(labels))
    return ProbeData("synth-coil", np.stack(imgs)[perm], np.array(labels)[perm])


def toybox_like(world: World, size: int = 36, per_class: int = 40, seed: int = 0) -> ProbeData:
    """Objects at varied scale and position; a provided 70/30 split."""
    rng = np.random.default_rng([seed, 13])
    imgs, labels = [], []
    for c in range(world.spec.n_classes):
        for _ in range(per_class):
            img, _ = object_image(world, c, int(rng.integers(world.spec.n_backgrounds)), size, rng,
                                  scale=(0.22, 0.4), offset=0.15)
            imgs.append(to_uint8(img))
            labels.append(c)
    split = rng.random(len(labels)) < 0.7
    return ProbeData("synth-toybox", np.stack(imgs), np.array(labels), split=split)


def category_like(world: World, size: int = 36, per_class: int = 40, seed: int = 0) -> ProbeData:
    """Category recognition: object colours perturbed, only shape and stripes are stable."""
    rng = np.random.default_rng([seed, 14])
    imgs, labels = [], []
    for c in range(world.spec.n_classes):
        for _ in range(per_class):
            img, _ = object_image(world, c, int(rng.integers(world.spec.n_backgrounds)), size, rng,
                                  scale=(0.22, 0.4), offset=0.15,
                                  color_scale=float(rng.uniform(0.6, 1.2)))
            imgs.append(to_uint8(img))
            labels.append(c)
    split = rng.random(len(labels)) < 0.7
    return ProbeData("synth-category", np.stack(imgs), np.array(labels), split=split)


def easy_like(world: World, size: int = 32, per_class: int = 30, seed: int = 0) -> ProbeData:
    rng = np.random.default_rng([seed, 15])
    n = min(4, world.spec.n_classes)
    imgs, labels = [], []
    for c in range(n):
        for _ in range(per_class):
            img, _ = object_image(world, c, int(rng.integers(world.spec.n_backgrounds)), size, rng,
                                  scale=(0.3, 0.42), offset=0.05)
            imgs.append(to_uint8(img))
            labels.append(c)
    split = rng.random(len(labels)) < 0.7
    return ProbeData("synth-easy", np.stack(imgs), np.array(labels), split=split)


def fine_like(world: World, size: int = 36, per_label: int = 20, seed: int = 0) -> ProbeData:
    """Two stripe-frequency variants per class; label is (class, variant)."""
    rng = np.random.default_rng([seed, 16])
    imgs, labels = [], []
    for c in range(world.spec.n_classes):
        for var, sc in enumerate((1.0, 1.6)):
            for _ in range(per_label):
                img, _ = object_image(world, c, int(rng.integers(world.spec.n_backgrounds)), size,
                                      rng, stripe_scale=sc)
                imgs.append(to_uint8(img))
                labels.append(2 * c + var)
    split = rng.random(len(labels)) < 0.7
    return ProbeData("synth-fine", np.stack(imgs), np.array(labels), split=split)


def scene_like(world: World, size: int = 36, per_label: int = 24, seed: int = 0) -> ProbeData:
    """Scene label is the background texture; objects are distractors."""
    rng = np.random.default_rng([seed, 17])
    imgs, labels = [], []
    for b in range(world.spec.n_backgrounds):
        for _ in range(per_label):
            img = _patch(world, b, size, rng, zoom=float(rng.uniform(1.0, 2.0)))
            for _ in range(int(rng.integers(1, 3))):
                world.render_object(img, int(rng.integers(world.spec.n_classes)),
                                    rng.uniform(0, size), rng.uniform(0, size),
                                    size * rng.uniform(0.12, 0.2), rng.uniform(0, 2 * np.pi))
            imgs.append(to_uint8(img))
            labels.append(b)
    split = rng.random(len(labels)) < 0.7
    return ProbeData("synth-scene", np.stack(imgs), np.array(labels), split=split)


def sensitivity_like(world: World, size: int = 36, per_class: int = 40, bias: float = 0.8,
                     seed: int = 0) -> ProbeData:
    """Category data whose backgrounds correlate with the class, plus removal variants.

    Variants share labels with the normal images: ``only_fg`` (background
    blacked out), ``no_fg`` (object silhouette blacked out), ``only_bg_b``
    (object bounding box blacked out) and ``only_bg_t`` (object absent).
    """
    rng = np.random.default_rng([seed, 18])
    nb = world.spec.n_backgrounds
    imgs, labels, bgs, masks = [], [], [], []
    for c in range(world.spec.n_classes):
        for _ in range(per_class):
            b = c % nb if rng.random() < bias else int(rng.integers(nb))
            img, mask = object_image(world, c, b, size, rng, scale=(0.26, 0.36))
            imgs.append(img)
            masks.append(mask)
            labels.append(c)
            bgs.append(b)
    imgs = np.stack(imgs)
    masks = np.stack(masks)
    bg_t = _fill_from_surroundings(imgs, masks)
    only_fg = np.where(masks[..., None], imgs, 0.0)
    no_fg = np.where(masks[..., None], 0.0, imgs)
    box = np.zeros_like(masks)
    for i, m in enumerate(masks):
        ys, xs = np.nonzero(m)
        box[i, ys.min():ys.max() + 1, xs.min():xs.max() + 1] = True
    only_bg_b = np.where(box[..., None], 0.0, imgs)
    split = rng.random(len(labels)) < 0.7
    variants = {"only_fg": to_uint8(only_fg), "no_fg": to_uint8(no_fg),
                "only_bg_b": to_uint8(only_bg_b), "only_bg_t": to_uint8(bg_t)}
    return ProbeData("synth-in9", to_uint8(imgs), np.array(labels), np.array(bgs), split,
                     masks, variants)


def _fill_from_surroundings(imgs: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Replace object pixels by the nearest background pixel (tiled-looking fill)."""
    out = imgs.copy()
    for i, m in enumerate(masks):
        _, (iy, ix) = ndimage.distance_transform_edt(m, return_indices=True)
        out[i] = imgs[i][iy, ix]
    return out
