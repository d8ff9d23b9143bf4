import numpy as np
import pytest

from talkfield.blending import (
    MASK_WINDOW,
    MaskHistory,
    average_mask,
    blend,
    compose_final,
    project_mouth_mask,
    project_to_pixels,
    rasterize_hull,
)
from talkfield.field import FieldConfig, init_bundle
from talkfield.render import CameraPose, upsample


def _scanline(poly, H, W):
    """Even-odd crossing test per pixel centre, written row by row."""
    out = np.zeros((H, W), dtype=bool)
    n = len(poly)
    for r in range(H):
        xs = []
        for i in range(n):
            (x0, y0), (x1, y1) = poly[i], poly[(i + 1) % n]
            if (y0 <= r < y1) or (y1 <= r < y0):
                xs.append(x0 + (r - y0) * (x1 - x0) / (y1 - y0))
        xs.sort()
        for a, b in zip(xs[::2], xs[1::2]):
            for c in range(W):
                if a <= c <= b:
                    out[r, c] = True
    return out


def _field_points_for_pixels(px, pose, H, W, depth_z=0.0):
    # invert the pinhole projection for points on the plane z = depth_z (frontal camera)
    half = np.tan(0.5 * pose.fov_y)
    cols, rows = px[:, 0], px[:, 1]
    u = (2.0 * (cols + 0.5) / W - 1.0) * half * W / H
    v = (1.0 - 2.0 * (rows + 0.5) / H) * half
    dist = pose.eye[2] - depth_z
    return np.column_stack([u * dist, v * dist, np.full(len(px), depth_z)])


# -- masks -------------------------------------------------------------------


def test_projection_round_trip():
    pose = CameraPose()
    px = np.array([[3.2, 4.7], [10.0, 2.5], [7.7, 13.1]])
    pts = _field_points_for_pixels(px, pose, 16, 16)
    got, front = project_to_pixels(pts, pose, 16, 16)
    assert front.all() and np.max(np.abs(got - px)) < 1e-12


def test_square_hull_matches_scanline():
    H = W = 24
    square = np.array([[5.3, 6.6], [15.8, 6.6], [15.8, 14.2], [5.3, 14.2]])
    hard = rasterize_hull(square, H, W)
    ref = _scanline(square, H, W)
    assert hard.sum() == ref.sum() == 10 * 8
    assert np.array_equal(hard, ref)
    pose = CameraPose()
    mask = project_mouth_mask(_field_points_for_pixels(square, pose, H, W), pose, H, W, feather=0.0, dilate=0)
    assert np.array_equal(mask > 0, ref)
    # one pixel of square dilation grows the rectangle by a pixel on every side
    dil = project_mouth_mask(_field_points_for_pixels(square, pose, H, W), pose, H, W, feather=0.0)
    assert dil.sum() == 12 * 10


def test_random_convex_hull_matches_scanline():
    rng = np.random.default_rng(0)
    for _ in range(30):
        pts = rng.uniform(2, 30, (12, 2))
        from scipy.spatial import ConvexHull

        poly = pts[ConvexHull(pts).vertices]
        assert np.array_equal(rasterize_hull(pts, 32, 32), _scanline(poly, 32, 32))


def test_degenerate_hulls_are_empty():
    assert not rasterize_hull(np.array([[1.0, 1.0], [5.0, 5.0]]), 8, 8).any()
    assert not rasterize_hull(np.array([[1.0, 1.0], [3.0, 3.0], [5.0, 5.0]]), 8, 8).any()


def test_vertices_behind_camera_give_zero_mask():
    pose = CameraPose()
    behind = np.array([[0.0, 0.0, 3.0], [0.1, 0.0, 3.5], [0.0, 0.1, 4.0], [0.1, 0.1, 3.2]])
    assert not np.any(project_mouth_mask(behind, pose, 16, 16))


def test_mask_range_and_errors(basis0):
    from talkfield.deformation import ScaleTransform

    pts = ScaleTransform.from_bbox(basis0.bbox).apply(basis0.mean_shape[basis0.mouth_indices])
    m = project_mouth_mask(pts, CameraPose(yaw=0.2), 32, 32, feather=1.5)
    assert m.min() >= 0.0 and m.max() <= 1.0 and m.max() > 0.5
    with pytest.raises(ValueError):
        project_mouth_mask(pts[:2], CameraPose(), 8, 8)
    with pytest.raises(ValueError):
        project_mouth_mask(pts, CameraPose(), 8, 8, feather=-1.0)


# -- temporal averaging ------------------------------------------------------


def _history(masks, n=MASK_WINDOW):
    h = MaskHistory(n)
    for m in masks:
        h.push(m)
    return h


def test_average_constant_history():
    m = np.random.default_rng(0).uniform(size=(5, 5))
    assert np.array_equal(average_mask(_history([m] * 4)), m)


def test_average_zero_one():
    out = average_mask(_history([np.zeros((3, 3)), np.ones((3, 3))], n=2))
    assert np.all(out == 0.5)


def test_average_seven_random_masks():
    rng = np.random.default_rng(1)
    masks = [rng.uniform(size=(9, 9)) for _ in range(10)]
    out = average_mask(_history(masks))
    ref = np.array([[sum(m[i, j] for m in masks[-7:]) / 7 for j in range(9)] for i in range(9)])
    assert np.max(np.abs(out - ref)) < 1e-12
    assert len(_history(masks)) == 7


def test_history_errors():
    with pytest.raises(ValueError):
        average_mask(MaskHistory())
    with pytest.raises(ValueError):
        MaskHistory(0)
    h = _history([np.zeros((2, 2))])
    with pytest.raises(ValueError):
        h.push(np.zeros((3, 3)))


def test_step_uses_strictly_previous_masks():
    h = MaskHistory(3)
    a, b, c, d = (np.full((2, 2), v) for v in (0.0, 0.3, 0.6, 0.9))
    assert np.array_equal(h.step(a), a)  # first frame seeds the history
    assert np.array_equal(h.step(b), a)
    assert np.allclose(h.step(c), (a + b) / 2, atol=1e-15)
    assert np.allclose(h.step(d), (a + b + c) / 3, atol=1e-15)
    assert np.allclose(h.step(a), (b + c + d) / 3, atol=1e-15)


def test_temporal_smoothness_bound():
    rng = np.random.default_rng(2)
    raws = [rng.uniform(size=(6, 6)) * (rng.random() < 0.5) for _ in range(40)]
    h = MaskHistory(7)
    outs = [h.step(r) for r in raws]
    spread = np.max(np.abs(np.array(raws)[:, None] - np.array(raws)[None]))
    for t in range(8, len(outs)):
        assert np.max(np.abs(outs[t] - outs[t - 1])) <= spread / 7 + 1e-15
    assert all(o.min() >= 0 and o.max() <= 1 for o in outs)


# -- blending ----------------------------------------------------------------


def test_blend_binary_masks_pick_one_source(rng):
    a, b = rng.uniform(size=(4, 5, 16)), rng.uniform(size=(4, 5, 16))
    assert np.array_equal(blend(a, b, np.zeros((4, 5))), a)
    assert np.array_equal(blend(a, b, np.ones((4, 5))), b)
    m = (rng.random((4, 5)) < 0.5).astype(float)
    out = blend(a, b, m)
    assert np.array_equal(out[m == 0], a[m == 0]) and np.array_equal(out[m == 1], b[m == 1])


def test_blend_quarter_mask(rng):
    a, b = rng.uniform(size=(4, 5, 3)), rng.uniform(size=(4, 5, 3))
    out = blend(a, b, np.full((4, 5), 0.25))
    assert np.max(np.abs(out - (0.75 * a + 0.25 * b))) < 1e-12


def test_blend_shape_errors(rng):
    a = rng.uniform(size=(4, 5, 3))
    with pytest.raises(ValueError):
        blend(a, a[:3], np.zeros((4, 5)))
    with pytest.raises(ValueError):
        blend(a, a, np.zeros((5, 4)))


def test_compose_final_delegates_to_upsampler(rng):
    b = init_bundle(1, FieldConfig(width=16, depth=2))
    w = rng.normal(size=32)
    phi = rng.uniform(size=(4, 4, 16))
    img = compose_final(b, phi, w)
    assert np.array_equal(img, upsample(b, phi, w))
    assert np.array_equal(img, compose_final(b, phi, w))
    const = compose_final(b, np.full((4, 4, 16), 0.3), w)
    assert np.max(np.abs(const - const[0, 0])) < 1e-9
