import json

import numpy as np
import pytest

from foveassl.synth import (
    SyntheticSceneSpec, World, category_like, coil_like, core50_like, easy_like, fine_like,
    scene_like, sensitivity_like, toybox_like, write_world,
)


@pytest.fixture(scope="module")
def world():
    return World(SyntheticSceneSpec(n_videos=3, video_frames=40))


def test_videos_are_deterministic(world):
    a = world.video(1)
    b = World(SyntheticSceneSpec(n_videos=3, video_frames=40)).video(1)
    assert a.frames.tobytes() == b.frames.tobytes() and a.gazes == b.gazes
    assert a.frames.tobytes() != world.video(2).frames.tobytes()


def test_masks_nonempty_and_gaze_near_centroid(world):
    jitter = world.spec.gaze_jitter
    for v in world.videos():
        assert v.frames.shape == (40, 64, 64, 3) and v.frames.dtype == np.uint8
        assert v.masks.reshape(40, -1).any(axis=1).all()
        for t in v.truth:
            cx, cy = t.centroid
            # rounding moves the gaze by at most half a pixel per axis
            assert np.hypot(t.gaze.x - cx, t.gaze.y - cy) <= jitter + np.sqrt(0.5) + 1e-9


def test_classes_share_a_palette():
    world = World(SyntheticSceneSpec(n_classes=8, palette_size=4))
    colors = {c.color_a for c in world.classes}
    shapes = {c.shape for c in world.classes}
    assert len(colors) == 4 and len(shapes) == 8


def test_background_switches_keep_the_objects():
    still = World(SyntheticSceneSpec(n_videos=1, video_frames=60, background_switch_rate=0)).video(0)
    assert len({t.background_id for t in still.truth}) == 1
    moving = World(SyntheticSceneSpec(n_videos=1, video_frames=60, background_switch_rate=0.2)).video(0)
    bgs = [t.background_id for t in moving.truth]
    assert len(set(bgs)) > 1 and moving.background_id == bgs[0]
    switch = next(i for i in range(1, 60) if bgs[i] != bgs[i - 1])
    # the attended object does not jump with the camera cut
    a, b = moving.truth[switch - 1].centroid, moving.truth[switch].centroid
    assert np.hypot(a[0] - b[0], a[1] - b[1]) < 6


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSceneSpec(n_classes=1)
    with pytest.raises(ValueError):
        SyntheticSceneSpec(n_classes=2, objects_per_video=3)
    with pytest.raises(ValueError):
        SyntheticSceneSpec(background_switch_rate=1.5)


def test_write_world(tmp_path):
    spec = SyntheticSceneSpec(n_videos=1, video_frames=5)
    (d,) = write_world(spec, tmp_path)
    assert json.loads((tmp_path / "scene.json").read_text())["n_videos"] == 1
    assert len(list(d.glob("frame_*.png"))) == 5
    assert (d / "gaze.csv").read_text().splitlines()[0] == "frame_index,gaze_x,gaze_y"
    assert np.load(d / "masks.npz")["masks"].shape == (5, 64, 64)


def test_probe_sets_shapes(world):
    n = world.spec.n_classes
    assert len(core50_like(world, size=16, per_pair=1)) == n * world.spec.n_backgrounds
    assert len(coil_like(world, size=16, views=3)) == 3 * n
    for build in (toybox_like, category_like, easy_like, fine_like, scene_like):
        data = build(world, size=16, seed=1)
        assert data.images.shape[1:] == (16, 16, 3) and data.split is not None
        assert len(np.unique(data.labels)) >= 2
    assert len(np.unique(fine_like(world, size=16).labels)) == 2 * n


def test_sensitivity_variants(world):
    data = sensitivity_like(world, size=20, per_class=3)
    m = data.object_masks
    assert set(data.variants) == {"only_fg", "no_fg", "only_bg_b", "only_bg_t"}
    assert (data.variants["only_fg"][~m] == 0).all()
    assert (data.variants["no_fg"][m] == 0).all()
    assert np.array_equal(data.variants["no_fg"][~m], data.images[~m])
    assert (data.variants["only_bg_b"][m] == 0).all()
    assert np.array_equal(data.variants["only_bg_t"][~m], data.images[~m])
