import numpy as np
import pytest
from hypothesis import given, strategies as st

from foveassl.geometry import (
    CorrectedGaze, CropSpec, GazePoint, GeometryError, correct_gaze, correct_gaze_xy,
    crop_window, gaze_crop, gaze_histogram, read_histogram_csv, window_bounds,
)


def shift_formula(x, n, R):
    # minimal shift, written independently of the clamp
    return x - max(0, x + n // 2 - R + (n % 2)) - min(0, x - n // 2)


@pytest.mark.parametrize("g, n, R, want", [
    ((270, 270), 224, 540, (270, 270)),
    ((0, 0), 224, 540, (112, 112)),
    ((539, 500), 336, 540, (372, 372)),
])
def test_correct_gaze_examples(g, n, R, want):
    cg = correct_gaze(GazePoint(*g), CropSpec(n, R))
    assert (cg.x_cor, cg.y_cor) == want


def test_rejects_bad_specs_and_gazes():
    with pytest.raises(GeometryError):
        CropSpec(541, 540)
    with pytest.raises(GeometryError):
        CropSpec(0, 540)
    with pytest.raises(GeometryError):
        correct_gaze(GazePoint(540, 0), CropSpec(224))
    with pytest.raises(GeometryError):
        correct_gaze(GazePoint(-1, 3), CropSpec(224))


@pytest.mark.parametrize("n", [112, 224, 336, 540, 113, 1])
def test_coarse_grid_windows_inside(n):
    R = 540
    spec = CropSpec(n, R)
    xs = np.arange(0, R, 7)
    gx, gy = np.meshgrid(xs, xs)
    cx, cy = correct_gaze_xy(gx, gy, spec)
    for c in (cx, cy):
        assert np.all(c - n // 2 >= 0)
        assert np.all(c - n // 2 + n <= R)
    want = np.vectorize(lambda v: shift_formula(v, n, R))(xs)
    assert np.array_equal(correct_gaze_xy(xs, xs, spec)[0], want)


@given(st.integers(0, 539), st.integers(0, 539), st.integers(1, 540))
def test_idempotent_and_identity_inside(x, y, n):
    spec = CropSpec(n, 540)
    cg = correct_gaze(GazePoint(x, y), spec)
    again = correct_gaze(GazePoint(cg.x_cor, cg.y_cor), spec)
    assert again == cg
    if spec.lower <= x <= spec.upper:
        assert cg.x_cor == x
    if spec.lower <= y <= spec.upper:
        assert cg.y_cor == y


def test_full_frame_crop_is_identity():
    rng = np.random.default_rng(0)
    frame = rng.integers(0, 256, (40, 40, 3), dtype=np.uint8)
    spec = CropSpec(40, 40)
    for g in [GazePoint(0, 0), GazePoint(39, 12), GazePoint(20, 20)]:
        out, _ = gaze_crop(frame, g, spec)
        assert np.array_equal(out, frame)


def test_boundary_window():
    assert window_bounds(CorrectedGaze(112, 112), CropSpec(224)) == (0, 224, 0, 224)


def test_crop_center_pixel_matches_source():
    rng = np.random.default_rng(1)
    R = 96
    frame = rng.integers(0, 256, (R, R, 3), dtype=np.uint8)
    for n in (16, 17, 32):
        spec = CropSpec(n, R)
        for _ in range(50):
            x, y = rng.integers(spec.lower, spec.upper + 1, size=2)
            out = crop_window(frame, CorrectedGaze(int(x), int(y)), spec)
            assert out.shape == (n, n, 3)
            assert np.array_equal(out[n // 2, n // 2], frame[y, x])
            # every pixel comes from the matching source location
            assert np.array_equal(out, frame[y - n // 2:y - n // 2 + n, x - n // 2:x - n // 2 + n])


def test_crop_rejects_uncorrected_gaze():
    frame = np.zeros((540, 540, 3), np.uint8)
    with pytest.raises(GeometryError):
        crop_window(frame, CorrectedGaze(10, 300), CropSpec(224))
    with pytest.raises(GeometryError):
        crop_window(np.zeros((100, 100, 3)), CorrectedGaze(270, 270), CropSpec(224))


def test_histogram_single_point_and_mean():
    h = gaze_histogram([GazePoint(270, 270)] * 5, bin_size=54)
    assert h.total == 5 and h.counts.sum() == 5
    assert np.count_nonzero(h.counts) == 1
    assert h.mean == h.center == (270.0, 270.0)
    h2 = gaze_histogram([GazePoint(0, 0), GazePoint(539, 539)], bin_size=60)
    assert h2.mean == (269.5, 269.5)


def test_histogram_empty_and_truncated_bin():
    h = gaze_histogram([], bin_size=50)
    assert h.empty and h.mean is None and h.offset is None
    h = gaze_histogram([GazePoint(539, 0)], bin_size=50)
    assert h.counts.shape == (11, 11)
    assert h.counts[0, 10] == 1


def test_histogram_uniform_within_multinomial_bounds():
    rng = np.random.default_rng(2)
    R, b, N = 540, 54, 100_000
    pts = rng.integers(0, R, size=(N, 2))
    h = gaze_histogram((GazePoint(int(x), int(y)) for x, y in pts), b, R)
    p = (b / R) ** 2
    sigma = np.sqrt(N * p * (1 - p))
    assert h.total == N
    assert np.all(np.abs(h.counts - N * p) < 5 * sigma)


def test_histogram_csv_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    pts = [GazePoint(int(x), int(y)) for x, y in rng.integers(0, 100, (300, 2))]
    h = gaze_histogram(pts, 16, 100)
    h.to_csv(tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().splitlines()[0] == "bin_x,bin_y,count"
    back = read_histogram_csv(tmp_path / "h.csv", 16, 100)
    assert np.array_equal(back.counts, h.counts)
