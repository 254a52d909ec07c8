import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepregionlets.geometry import (
    Z_EPSILON,
    AffineTransform,
    ProjectiveTransform,
    RegionOfInterest,
    apply_transform,
    cell_init_transforms,
    denormalize,
    generate_grid,
    make_target_grid,
)
from oracles import projective_point

THETA0 = [1 / 3, 0, -2 / 3, 0, 1 / 3, 2 / 3, 0, 0, 1]
unit = st.floats(-1.0, 1.0, allow_nan=False)


def test_identity_point():
    s = apply_transform(ProjectiveTransform.identity(), 0.5, -0.25)
    assert (float(s.xs), float(s.ys), float(s.z)) == (0.5, -0.25, 1.0)


def test_theta7_divisor():
    t = ProjectiveTransform([1, 0, 0, 0, 1, 0, 1, 0, 1])
    s = apply_transform(t, 0.5, 0.5)
    assert float(s.z) == 1.5
    assert float(s.xs) == pytest.approx(1 / 3, abs=1e-15)
    assert float(s.ys) == pytest.approx(1 / 3, abs=1e-15)


def test_theta0_maps_centre_to_top_left_cell_centre():
    s = apply_transform(ProjectiveTransform(THETA0), 0.0, 0.0)
    assert (float(s.xs), float(s.ys), float(s.z)) == (-2 / 3, 2 / 3, 1.0)


def test_theta9_is_pinned():
    t = ProjectiveTransform([1, 0, 0, 0, 1, 0, 0, 0, 5])
    assert t.theta[8] == 1.0
    with pytest.raises(ValueError):
        ProjectiveTransform([np.nan] + [0] * 8)
    with pytest.raises(ValueError):
        ProjectiveTransform([1, 2, 3])


def test_z_clamp_preserves_sign_and_flags():
    t = ProjectiveTransform([1, 0, 0, 0, 1, 0, -1, 0, 1])
    s = apply_transform(t, np.array([1.0, 1.0 - 1e-8, 0.5]), np.zeros(3))
    assert s.z[0] == Z_EPSILON
    assert s.z[1] == Z_EPSILON
    assert s.clamped.tolist() == [True, True, False]
    t = ProjectiveTransform([1, 0, 0, 0, 1, 0, -1, 0, 1])
    s = apply_transform(t, 1.0 + 1e-8, 0.0)
    assert float(s.z) == -Z_EPSILON
    assert np.isfinite(s.xs)


def test_target_grid_corners():
    g = make_target_grid(2, 2)
    assert list(zip(g.xt, g.yt)) == [(-1, 1), (1, 1), (-1, -1), (1, -1)]


def test_target_grid_centre_and_degenerate():
    g = make_target_grid(3, 3)
    assert (g.xt[4], g.yt[4]) == (0.0, 0.0)
    g = make_target_grid(1, 3)
    assert g.yt.tolist() == [0.0, 0.0, 0.0]
    assert g.xt.tolist() == [-1.0, 0.0, 1.0]
    with pytest.raises(ValueError):
        make_target_grid(0, 3)


def test_identity_grid_reproduces_target():
    s = generate_grid(ProjectiveTransform.identity(), 2, 2)
    g = make_target_grid(2, 2)
    assert np.array_equal(s.xs, g.xt) and np.array_equal(s.ys, g.yt)


def test_top_left_cell_grid_stays_in_top_left_ninth():
    # brute force: evaluate every corner independently and check the interval
    t = cell_init_transforms(3, 3)[0]
    s = generate_grid(t, 2, 2)
    for xt, yt, xs, ys in zip(*make_target_grid(2, 2), s.xs, s.ys):
        ox, oy, _ = projective_point(t.theta, xt, yt)
        assert (xs, ys) == pytest.approx((ox, oy), abs=1e-15)
        assert -1 - 1e-15 <= xs <= -1 / 3 + 1e-15
        assert 1 / 3 - 1e-15 <= ys <= 1 + 1e-15


def test_affine_embedding_matches_direct_evaluation():
    a = AffineTransform([0.4, -0.2, 0.1, 0.3, 0.7, -0.5])
    g = make_target_grid(5, 4)
    s = generate_grid(a.to_projective(), 5, 4)
    ex, ey = a.apply(g.xt, g.yt)
    assert np.array_equal(s.xs, ex) and np.array_equal(s.ys, ey)
    assert np.all(s.z == 1.0)


@pytest.mark.parametrize("s, roi, expected", [
    ((-1.0, 1.0), (2, 3, 5, 5), (2.0, 3.0)),
    ((0.0, 0.0), (0, 0, 5, 5), (2.0, 2.0)),
    ((1.0, -1.0), (2, 3, 5, 5), (6.0, 7.0)),
])
def test_denormalize_examples(s, roi, expected):
    x, y = denormalize(s, RegionOfInterest(*roi))
    assert (float(x), float(y)) == expected


def test_roi_validation():
    with pytest.raises(ValueError):
        RegionOfInterest(0, 0, 0, 3)
    with pytest.raises(ValueError):
        RegionOfInterest(0, 0, 3, -1)


def test_cell_init_theta0_exact():
    assert cell_init_transforms(3, 3)[0].theta.tolist() == THETA0


def test_cell_init_single_is_identity():
    assert cell_init_transforms(1, 1)[0].theta.tolist() == [1, 0, 0, 0, 1, 0, 0, 0, 1]


def test_cell_init_bottom_right_quadrant():
    t = cell_init_transforms(2, 2)[3]
    assert t.theta.tolist() == [0.5, 0, 0.5, 0, 0.5, -0.5, 0, 0, 1]
    s = generate_grid(t, 7, 7)
    assert s.xs.min() == 0.0 and s.xs.max() == 1.0
    assert s.ys.min() == -1.0 and s.ys.max() == 0.0


@pytest.mark.parametrize("rows, cols", [(1, 1), (2, 3), (3, 3), (4, 4), (5, 2)])
def test_cells_tile_the_square(rows, cols):
    boxes = []
    for t in cell_init_transforms(rows, cols):
        s = generate_grid(t, 2, 2)
        boxes.append((s.xs.min(), s.ys.min(), s.xs.max(), s.ys.max()))
    boxes = np.array(boxes)
    area = ((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])).sum()
    assert area == pytest.approx(4.0, abs=1e-12)
    assert boxes[:, 0].min() == pytest.approx(-1) and boxes[:, 2].max() == pytest.approx(1)
    assert boxes[:, 1].min() == pytest.approx(-1) and boxes[:, 3].max() == pytest.approx(1)
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            a, b = boxes[i], boxes[j]
            ix = min(a[2], b[2]) - max(a[0], b[0])
            iy = min(a[3], b[3]) - max(a[1], b[1])
            assert ix <= 1e-12 or iy <= 1e-12


@settings(max_examples=200, deadline=None)
@given(unit, unit)
def test_identity_is_exact(x, y):
    s = apply_transform(ProjectiveTransform.identity(), x, y)
    assert float(s.xs) == x and float(s.ys) == y


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=6, max_size=6), unit, unit)
def test_zero_perspective_equals_affine(theta, x, y):
    s = apply_transform(ProjectiveTransform(theta + [0, 0, 1]), x, y)
    ex, ey = AffineTransform(theta).apply(x, y)
    assert float(s.z) == 1.0
    assert float(s.xs) == float(ex) and float(s.ys) == float(ey)


@settings(max_examples=100, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20), st.floats(1.5, 40), st.floats(1.5, 40))
def test_denormalize_corners_hit_roi_corners(w0, h0, w, h):
    roi = RegionOfInterest(w0, h0, w, h)
    x, y = denormalize((np.array([-1.0, 1.0]), np.array([1.0, -1.0])), roi)
    assert x[0] == pytest.approx(w0, abs=1e-12) and y[0] == pytest.approx(h0, abs=1e-12)
    assert x[1] == pytest.approx(w0 + w - 1, abs=1e-12)
    assert y[1] == pytest.approx(h0 + h - 1, abs=1e-12)


def test_batched_theta_broadcasts():
    thetas = np.stack([t.theta for t in cell_init_transforms(2, 2)])
    g = make_target_grid(3, 3)
    s = apply_transform(thetas, g.xt, g.yt)
    assert s.xs.shape == (4, 9)
    for k in range(4):
        single = apply_transform(thetas[k], g.xt, g.yt)
        assert np.array_equal(single.xs, s.xs[k])


def test_determinism():
    t = ProjectiveTransform([0.3, 0.1, -0.2, 0.05, 0.4, 0.1, 0.2, -0.1, 1])
    a = generate_grid(t, 6, 5)
    b = generate_grid(t, 6, 5)
    assert a.xs.tobytes() == b.xs.tobytes() and a.ys.tobytes() == b.ys.tobytes()
