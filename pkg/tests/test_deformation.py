import itertools

import numpy as np
import pytest

from talkfield.deformation import (
    BindingError,
    DisplacementField,
    ScaleTransform,
    anchor_lattice,
    bind_mesh,
    bind_vertices,
    build_displacement_field,
    scale_to_field,
)
from talkfield.face_model import ShapeCoeffs, evaluate_shape, vertex_displacement


def _brute_force_assignment(xy, grid):
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(len(grid)), len(xy)):
        cost = sum(np.linalg.norm(xy[i] - grid[j]) for i, j in enumerate(perm))
        if cost < best_cost - 1e-12:
            best, best_cost = perm, cost
    return np.array(best), best_cost


def _dense_idw(p, anchors, disp, radius):
    # every anchor takes part; weight 1/d^2 times the compact falloff, normalised by sum 1/d^2
    d = np.linalg.norm(anchors - p, axis=1)
    if np.any(d == 0):
        return disp[np.argmax(d == 0)]
    inv = 1.0 / d**2
    fall = np.where(d < radius, (1.0 - (d / radius) ** 2) ** 2, 0.0)
    return (inv * fall) @ disp / inv.sum()


# -- scaling -----------------------------------------------------------------


def test_bbox_centre_and_corners():
    bbox = np.array([[-0.5, -1.0, 0.2], [1.5, 3.0, 0.6]])
    pts, tf = scale_to_field(np.vstack([bbox.mean(axis=0), bbox[1], bbox[0]]), bbox)
    assert np.max(np.abs(pts[0])) < 1e-15
    ext = bbox[1] - bbox[0]
    assert np.allclose(pts[1], 0.8 * ext / ext.max(), atol=1e-12)
    assert np.allclose(pts[2], -0.8 * ext / ext.max(), atol=1e-12)


def test_transform_inverse(rng):
    tf = ScaleTransform.from_bbox([[-1, -2, -0.5], [1, 0, 0.5]])
    x = rng.normal(size=(50, 3))
    assert np.max(np.abs(tf.invert(tf.apply(x)) - x)) < 1e-12
    assert np.allclose(tf.apply_linear(x), tf.apply(x) - tf.apply(np.zeros(3)), atol=1e-12)


def test_degenerate_bbox():
    with pytest.raises(ValueError, match="degenerate"):
        ScaleTransform.from_bbox([[0, 0, 0], [0, 0, 0]])


# -- binding -----------------------------------------------------------------


def test_vertices_on_grid_bind_to_themselves():
    grid = anchor_lattice(8)
    pick = np.array([5, 17, 40, 63, 0])
    verts = np.column_stack([grid[pick], np.linspace(-0.5, 0.5, 5)])
    for method in ("optimal", "greedy"):
        b = bind_vertices(verts, grid, method=method)
        assert np.array_equal(b.grid_ids, pick)
        assert np.array_equal(b.anchors[:, 2], verts[:, 2])


def test_three_vertices_four_points_matches_exhaustive():
    rng = np.random.default_rng(0)
    for _ in range(20):
        grid = rng.uniform(-1, 1, (4, 2))
        verts = np.column_stack([rng.uniform(-1, 1, (3, 2)), np.zeros(3)])
        b = bind_vertices(verts, grid, method="optimal")
        ref, ref_cost = _brute_force_assignment(verts[:, :2], grid)
        cost = np.linalg.norm(verts[:, :2] - grid[b.grid_ids], axis=1).sum()
        assert abs(cost - ref_cost) < 1e-12
        assert np.array_equal(b.grid_ids, ref)


def test_vertex_order_does_not_change_pairs():
    rng = np.random.default_rng(1)
    for _ in range(10):
        grid = rng.uniform(-1, 1, (6, 2))
        verts = np.column_stack([rng.uniform(-1, 1, (4, 2)), np.zeros(4)])
        base = bind_vertices(verts, grid, method="optimal")
        for perm in itertools.permutations(range(4)):
            b = bind_vertices(verts[list(perm)], grid, method="optimal")
            mapped = {(perm[v], g) for v, g in b.pairs()}
            assert mapped == base.pairs()


def test_binding_is_one_to_one(basis0):
    for method in ("optimal", "greedy"):
        b = bind_mesh(basis0.mean_shape, basis0.bbox, method=method)
        assert len(set(b.grid_ids.tolist())) == basis0.num_vertices
        assert np.all(np.abs(b.anchors) <= 1.0)


def test_greedy_close_to_optimal(basis0):
    opt = bind_mesh(basis0.mean_shape, basis0.bbox, method="optimal")
    gre = bind_mesh(basis0.mean_shape, basis0.bbox, method="greedy")
    vf = opt.transform.apply(basis0.mean_shape)[:, :2]
    lat = anchor_lattice()
    c_opt = np.linalg.norm(vf - lat[opt.grid_ids], axis=1).sum()
    c_gre = np.linalg.norm(vf - lat[gre.grid_ids], axis=1).sum()
    assert c_opt <= c_gre + 1e-9
    assert c_gre < 1.5 * c_opt


def test_grid_too_small():
    with pytest.raises(BindingError):
        bind_vertices(np.zeros((5, 3)), anchor_lattice(2))
    with pytest.raises(ValueError):
        bind_vertices(np.zeros((2, 3)), anchor_lattice(2), method="nearest")


# -- displacement fields -----------------------------------------------------


@pytest.fixture(scope="module")
def bound(basis0):
    return bind_mesh(basis0.mean_shape, basis0.bbox)


def test_zero_displacement_field(bound, basis0, rng):
    f = build_displacement_field(bound, np.zeros((basis0.num_vertices, 3)))
    assert f.is_zero
    assert not np.any(f.displacement_at(rng.uniform(-1, 1, (100, 3))))


def test_uniform_displacement(bound, basis0):
    dv = np.tile([0.0, -0.01, 0.005], (basis0.num_vertices, 1))
    f = build_displacement_field(bound, dv)
    expect = bound.transform.apply_linear(dv[0])
    assert np.allclose(f.displacements, expect, rtol=0, atol=1e-15)


def test_displacements_clamped_to_radius(bound, basis0):
    dv = np.tile([0.0, 5.0, 0.0], (basis0.num_vertices, 1))
    f = build_displacement_field(bound, dv, radius=0.15)
    assert np.allclose(np.linalg.norm(f.displacements, axis=1), 0.15, atol=1e-15)


def test_size_mismatch(bound):
    with pytest.raises(ValueError):
        build_displacement_field(bound, np.zeros((10, 3)))
    with pytest.raises(ValueError):
        build_displacement_field(bound, np.zeros((1000, 2)))


def test_far_point_is_zero(rng):
    anchors = rng.uniform(-0.5, 0.5, (20, 3))
    f = DisplacementField(anchors, rng.normal(size=(20, 3)) * 0.01)
    far = np.array([[0.9, 0.9, 0.9], [-0.95, 0.9, -0.9]])
    assert not np.any(f.displacement_at(far))


def test_anchor_returns_its_displacement(rng):
    anchors = rng.uniform(-0.5, 0.5, (20, 3))
    disp = rng.normal(size=(20, 3)) * 0.01
    f = DisplacementField(anchors, disp)
    assert np.array_equal(f.displacement_at(anchors), disp)
    assert np.array_equal(f.displacement_at(anchors[3]), disp[3])


def test_dense_idw_oracle():
    rng = np.random.default_rng(3)
    anchors = rng.uniform(-0.2, 0.2, (12, 3))
    disp = rng.normal(size=(12, 3)) * 0.01
    f = DisplacementField(anchors, disp, k_neighbors=12, support_radius=0.3)
    pts = rng.uniform(-0.3, 0.3, (200, 3))
    got = f.displacement_at(pts)
    ref = np.array([_dense_idw(p, anchors, disp, 0.3) for p in pts])
    assert np.max(np.abs(got - ref)) < 1e-12


def test_single_moving_vertex_has_local_support(bound, basis0):
    dv = np.zeros((basis0.num_vertices, 3))
    v = int(basis0.mouth_indices[0])
    dv[v] = [0.0, 0.05, 0.0]
    f = build_displacement_field(bound, dv)
    a = bound.anchors[v]
    rng = np.random.default_rng(4)
    pts = a + rng.uniform(-0.3, 0.3, (3000, 3))
    d = f.displacement_at(pts)
    moved = np.any(d != 0, axis=1)
    dist = np.linalg.norm(pts - a, axis=1)
    assert moved.any()
    assert np.all(dist[moved] < f.support_radius)


def test_displacement_is_continuous(bound, basis0):
    dv = vertex_displacement(basis0.mean_shape, evaluate_shape(basis0, ShapeCoeffs(np.zeros(8), 1.5 * np.eye(6)[0])))
    f = build_displacement_field(bound, dv)
    rng = np.random.default_rng(6)
    p = bound.anchors[rng.choice(len(bound.anchors), 400)] + rng.uniform(-0.05, 0.05, (400, 3))
    eps = 1e-6
    step = rng.normal(size=p.shape)
    step *= eps / np.linalg.norm(step, axis=1, keepdims=True)
    slopes = np.linalg.norm(f.displacement_at(p + step) - f.displacement_at(p), axis=1) / eps
    # away from exact anchor hits the field is Lipschitz with a modest constant
    assert np.quantile(slopes, 0.99) < 50.0


def test_jaw_displacement_grows_with_lambda(bound, basis0):
    def mean_mouth(lam):
        va = evaluate_shape(basis0, ShapeCoeffs(np.zeros(8), lam * 0.6 * np.eye(6)[0]))
        f = build_displacement_field(bound, vertex_displacement(basis0.mean_shape, va))
        return np.linalg.norm(f.displacement_at(bound.anchors[basis0.mouth_indices]), axis=1).mean()

    assert mean_mouth(1.5) > mean_mouth(1.0) > 0.0
