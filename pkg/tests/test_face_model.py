import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from talkfield.face_model import (
    RankError,
    ShapeCoeffs,
    build_toy_basis,
    evaluate_shape,
    extract_landmarks,
    jaw_displacement,
    load_basis,
    sample_mesh,
    save_basis,
    vertex_displacement,
)


def _flat(b, which):
    arr = b.id_basis if which == "id" else b.exp_basis
    return arr.reshape(3 * b.num_vertices, -1)


def test_basis_columns_orthonormal(basis7):
    for which in ("id", "exp"):
        M = _flat(basis7, which)
        assert np.max(np.abs(M.T @ M - np.eye(M.shape[1]))) < 1e-6
    assert basis7.k_id == 8 and basis7.k_exp == 6 and basis7.num_vertices == 1000


def test_basis_deterministic(basis7):
    again = build_toy_basis(7)
    for name in ("mean_shape", "id_basis", "exp_basis", "landmark_indices", "mouth_indices"):
        assert np.array_equal(getattr(basis7, name), getattr(again, name))


def test_basis_index_invariants(basis0):
    for idx in (basis0.landmark_indices, basis0.mouth_indices):
        assert len(np.unique(idx)) == len(idx)
        assert idx.min() >= 0 and idx.max() < basis0.num_vertices
    lo, hi = basis0.bbox
    assert np.all(basis0.mean_shape >= lo) and np.all(basis0.mean_shape <= hi)
    # the head fits inside the unit sphere
    assert np.max(np.linalg.norm(basis0.mean_shape, axis=1)) <= 1.0


def test_heldout_mesh_projection_beats_zero(basis7):
    B = np.concatenate([_flat(basis7, "id"), _flat(basis7, "exp")], axis=1)
    mean = basis7.mean_shape.ravel()
    for seed in range(100, 110):
        target = sample_mesh(seed).ravel()
        coeffs = B.T @ (target - mean)  # orthogonal-projection oracle, columns orthonormal
        recon = mean + B @ coeffs
        assert np.linalg.norm(recon - target) < np.linalg.norm(mean - target)


def test_first_expression_mode_is_jaw(basis0):
    jaw = jaw_displacement(basis0.num_vertices, 0.3).ravel()
    proj = np.abs(_flat(basis0, "exp").T @ jaw)
    assert np.argmax(proj) == 0
    # opening moves the lower lip down
    up, lo = basis0.lip_pair
    e = evaluate_shape(basis0, ShapeCoeffs(np.zeros(8), np.eye(6)[0]))
    assert e[lo, 1] < basis0.mean_shape[lo, 1]


def test_rank_error_names_rank():
    with pytest.raises(RankError, match="rank"):
        build_toy_basis(0, num_vertices=100, k_id=1, k_exp=60)


def test_invalid_dimensions():
    with pytest.raises(ValueError):
        build_toy_basis(0, num_vertices=50)
    with pytest.raises(ValueError):
        build_toy_basis(0, k_id=0)


def test_zero_coefficients_give_mean(basis0):
    assert np.array_equal(evaluate_shape(basis0, ShapeCoeffs.zeros(basis0)), basis0.mean_shape)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_linearity_in_beta(seed):
    b = build_toy_basis(0)
    rng = np.random.default_rng(seed)
    a, b1, b2 = rng.normal(size=8), rng.normal(size=6), rng.normal(size=6)
    lhs = evaluate_shape(b, ShapeCoeffs(a, b1 + b2)) - evaluate_shape(b, ShapeCoeffs(a, b2))
    rhs = evaluate_shape(b, ShapeCoeffs(a, b1)) - evaluate_shape(b, ShapeCoeffs(a, np.zeros(6)))
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_random_superposition(basis0, rng):
    c1 = ShapeCoeffs(rng.normal(size=8), rng.normal(size=6))
    c2 = ShapeCoeffs(rng.normal(size=8), rng.normal(size=6))
    s = ShapeCoeffs(c1.alpha + c2.alpha, c1.beta + c2.beta)
    lhs = evaluate_shape(basis0, s) - basis0.mean_shape
    rhs = (evaluate_shape(basis0, c1) - basis0.mean_shape) + (evaluate_shape(basis0, c2) - basis0.mean_shape)
    assert np.max(np.abs(lhs - rhs)) < 1e-9


def test_unit_beta_matches_dense_matmul(basis7):
    e1 = np.eye(6)[0]
    got = evaluate_shape(basis7, ShapeCoeffs(np.zeros(8), e1))
    dense = np.einsum("vck,k->vc", basis7.exp_basis, e1)
    assert np.max(np.abs(got - (basis7.mean_shape + dense))) < 1e-12


def test_coefficient_dimension_mismatch(basis0):
    with pytest.raises(ValueError, match="K_exp"):
        evaluate_shape(basis0, ShapeCoeffs(np.zeros(8), np.zeros(5)))


def test_landmark_gather(basis0):
    lm = extract_landmarks(basis0, basis0.mean_shape)
    assert np.array_equal(lm, basis0.mean_shape[basis0.landmark_indices])


def test_landmarks_ignore_other_vertices(basis0, rng):
    v = basis0.mean_shape.copy()
    others = np.setdiff1d(np.arange(basis0.num_vertices), basis0.landmark_indices)
    v[others] = v[rng.permutation(others)]
    assert np.array_equal(extract_landmarks(basis0, v), extract_landmarks(basis0, basis0.mean_shape))


def test_landmark_difference_is_basis_rows(basis7):
    v1 = evaluate_shape(basis7, ShapeCoeffs(np.zeros(8), np.eye(6)[0]))
    diff = extract_landmarks(basis7, v1) - extract_landmarks(basis7, basis7.mean_shape)
    assert np.max(np.abs(diff - basis7.exp_basis[basis7.landmark_indices, :, 0])) < 1e-12


def test_vertex_displacement_cases(basis0):
    v = basis0.mean_shape
    assert not np.any(vertex_displacement(v, v))
    shifted = v + np.array([0.0, -0.1, 0.0])
    d = vertex_displacement(v, shifted)
    assert np.allclose(d, [0.0, 0.1, 0.0], atol=1e-15)
    lam = 1.5
    va = evaluate_shape(basis0, ShapeCoeffs(np.zeros(8), lam * np.eye(6)[0]))
    d = vertex_displacement(v, va)
    assert np.max(np.abs(d + lam * basis0.exp_basis[:, :, 0])) < 1e-12
    with pytest.raises(ValueError):
        vertex_displacement(v, v[:10])


def test_self_displacement_zero_for_any_coeffs(basis0, rng):
    c = ShapeCoeffs(rng.normal(size=8), rng.normal(size=6))
    v = evaluate_shape(basis0, c)
    assert not np.any(vertex_displacement(v, evaluate_shape(basis0, c)))


def test_symmetric_basis_is_mirror_symmetric():
    b = build_toy_basis(0, symmetric=True)
    mirror = b.mean_shape * np.array([-1.0, 1.0, 1.0])
    # every vertex has a mirror partner and every column maps onto itself
    from scipy.spatial import cKDTree

    d, partner = cKDTree(b.mean_shape).query(mirror)
    assert np.max(d) < 1e-9
    flip = np.array([-1.0, 1.0, 1.0])[None, :, None]
    for arr in (b.id_basis, b.exp_basis):
        assert np.max(np.abs(arr[partner] * flip - arr)) < 1e-9


def test_nfsb_round_trip(tmp_path, basis0):
    save_basis(basis0, tmp_path / "b.nfsb")
    raw = (tmp_path / "b.nfsb").read_bytes()
    assert raw[:4] == b"NFSB"
    back = load_basis(tmp_path / "b.nfsb")
    for name in ("mean_shape", "id_basis", "exp_basis", "landmark_indices", "mouth_indices"):
        assert np.array_equal(getattr(back, name), getattr(basis0, name))
