import numpy as np
import pytest

from conftest import DATA
from gradcheck import numeric_grad, rel_error
from talkfield.autodiff import Graph
from talkfield.field import (
    LEAKY_SLOPE,
    FieldConfig,
    declare_params,
    encode,
    envelope,
    field_forward,
    field_inputs,
    field_nodes,
    init_bundle,
    load_bundle,
    map_latent,
    mean_latent,
    query_field,
    save_bundle,
)


def _unit(rng, n):
    d = rng.normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _latent(bundle, seed):
    return map_latent(bundle, np.random.default_rng(seed).standard_normal(bundle.config.z_dim))


# -- encoding ----------------------------------------------------------------


def test_encode_zero():
    e = encode(np.zeros(3), 4)
    assert e.shape == (27,)
    assert not np.any(e[:3])
    for k in range(4):
        assert not np.any(e[3 + 6 * k : 6 + 6 * k])
        assert np.all(e[6 + 6 * k : 9 + 6 * k] == 1.0)


def test_encode_unit_x():
    e = encode(np.array([1.0, 0.0, 0.0]), 1)
    assert abs(e[3]) < 1e-12 and abs(e[6] + 1.0) < 1e-12


def test_encode_term_by_term(rng):
    x = rng.uniform(-1, 1, 3)
    L = 6
    e = encode(x, L)
    expect = list(x)
    for k in range(L):
        for fn in (np.sin, np.cos):
            for c in range(3):
                expect.append(fn((2**k) * np.pi * x[c]))
    assert np.max(np.abs(e - np.array(expect))) < 1e-12
    rows = rng.uniform(-1, 1, (5, 3))
    assert np.array_equal(encode(rows, L)[2], encode(rows[2], L))


def test_envelope_vanishes_outside_cube(rng):
    inside = rng.uniform(-0.85, 0.85, (100, 3))
    assert np.all(envelope(inside, 0.85) == 1.0)
    outside = rng.uniform(-1, 1, (100, 3))
    outside[:, 1] = rng.choice([-1.0, 1.0], 100) * rng.uniform(1.0, 2.0, 100)
    assert np.all(envelope(outside, 0.85) == 0.0)


# -- mapping -----------------------------------------------------------------


def test_map_latent_deterministic(bundle0, rng):
    z = rng.standard_normal(32)
    assert np.array_equal(map_latent(bundle0, z), map_latent(bundle0, z))


def test_map_latent_zero_weights_gives_bias(bundle0, rng):
    b = bundle0.with_params(
        {
            "map.0.W": np.zeros_like(bundle0.params["map.0.W"]),
            "map.1.W": np.zeros_like(bundle0.params["map.1.W"]),
            "map.1.b": np.full((1, 32), 0.25),
        }
    )
    for _ in range(3):
        assert np.all(map_latent(b, rng.standard_normal(32)) == 0.25)


def test_map_latent_matches_straight_line(bundle0, rng):
    p = bundle0.params
    z = rng.standard_normal(32)
    h = z @ p["map.0.W"] + p["map.0.b"][0]
    h = np.where(h > 0, h, LEAKY_SLOPE * h)
    ref = h @ p["map.1.W"] + p["map.1.b"][0]
    assert np.max(np.abs(map_latent(bundle0, z) - ref)) < 1e-12


def test_mean_latent_is_average(bundle0):
    z = np.random.default_rng(5).standard_normal((20, 32))
    ref = np.mean([map_latent(bundle0, zi) for zi in z], axis=0)
    assert np.max(np.abs(mean_latent(bundle0, 20, seed=5) - ref)) < 1e-12


# -- field queries -----------------------------------------------------------


def _field_oracle(bundle, points, dirs, w):
    # plain numpy forward with explicit concatenation at every hidden layer
    cfg, p = bundle.config, bundle.params
    lr = lambda x: np.where(x > 0, x, LEAKY_SLOPE * x)  # noqa: E731
    ep = encode(points, cfg.pos_freqs)
    ed = encode(dirs, cfg.dir_freqs)
    W0 = np.concatenate([p["field.0.Wp"], p["field.0.Ww"]])
    h = lr(np.concatenate([ep, np.tile(w, (len(ep), 1))], axis=1) @ W0 + p["field.0.b"])
    for k in range(1, cfg.depth):
        Wk = np.concatenate([p[f"field.{k}.Wh"], p[f"field.{k}.Ww"]])
        h = lr(np.concatenate([h, np.tile(w, (len(h), 1))], axis=1) @ Wk + p[f"field.{k}.b"])
    sigma = np.logaddexp(0.0, h @ p["sigma.W"] + p["sigma.b"])[:, 0] * envelope(points, cfg.envelope_inner)
    feat = 1.0 / (1.0 + np.exp(-(h @ p["feat.Wh"] + ed @ p["feat.Wd"] + p["feat.b"])))
    return feat, sigma


def test_field_forward_matches_concat_oracle(bundle0, rng):
    pts = rng.uniform(-1, 1, (50, 3))
    dirs = _unit(rng, 50)
    w = _latent(bundle0, 3)
    feat, sigma = field_forward(bundle0, pts, dirs, w)
    rf, rs = _field_oracle(bundle0, pts, dirs, w)
    assert np.max(np.abs(feat - rf)) < 1e-12
    assert np.max(np.abs(sigma - rs)) < 1e-12


def test_sigma_nonnegative_and_features_bounded(bundle0, rng):
    pts = rng.uniform(-3, 3, (2000, 3))
    feat, sigma = field_forward(bundle0, pts, _unit(rng, 2000), _latent(bundle0, 0))
    assert np.all(sigma >= 0.0)
    assert np.all((feat >= 0.0) & (feat <= 1.0))
    assert feat.shape == (2000, 16)


def test_query_is_deterministic(bundle0):
    w = _latent(bundle0, 1)
    a = query_field(bundle0, [0.1, 0.2, 0.3], [0.0, 0.0, 1.0], w)
    b = query_field(bundle0, [0.1, 0.2, 0.3], [0.0, 0.0, 1.0], w)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


def test_query_rejects_non_unit_direction(bundle0):
    with pytest.raises(ValueError, match="unit"):
        query_field(bundle0, [0, 0, 0], [0.0, 0.0, 1.1], _latent(bundle0, 0))


def test_sigma_gradient_matches_finite_differences(bundle0):
    rng = np.random.default_rng(11)
    cfg = bundle0.config
    pts = rng.uniform(-0.8, 0.8, (6, 3))
    inputs = field_inputs(cfg, pts, _unit(rng, 6))
    w = _latent(bundle0, 2).reshape(1, -1)

    g = Graph()
    p = declare_params(g, bundle0, ("field.", "sigma.", "feat."))
    _, sigma = field_nodes(
        g, cfg, g.input("enc_p", (6, cfg.pos_dim)), g.input("enc_d", (6, cfg.dir_dim)), g.input("env", (6, 1)), g.input("w", (1, cfg.w_dim)), p
    )
    loss = g.sum(sigma)
    vals = {**bundle0.params, **inputs, "w": w}
    grads = g.backward(g.forward(vals), loss)
    for name in ("sigma.W", "sigma.b", "field.3.Wh", "field.0.Ww", "field.2.b"):
        sub = (slice(0, 4),) * vals[name].ndim if name.endswith("Wh") or name.endswith("Ww") else (Ellipsis,)

        def f(x, name=name, sub=sub):
            full = vals[name].copy()
            full[sub] = x
            return float(g.forward({**vals, name: full})[loss])

        num = numeric_grad(f, vals[name][sub], h=1e-6)
        assert rel_error(grads[name][sub], num) < 1e-6, name


def test_sigma_at_origin_init_sweep():
    for seed in range(100):
        b = init_bundle(seed)
        _, s = query_field(b, [0.0, 0.0, 0.0], [0.0, 0.0, 1.0], _latent(b, seed))
        assert 0.1 < s < 10.0, (seed, s)


def test_init_is_deterministic(bundle0):
    again = init_bundle(0)
    assert again.checksum() == bundle0.checksum()
    assert init_bundle(1).checksum() != bundle0.checksum()


def test_seed_zero_matches_golden_checkpoint(bundle0):
    golden = load_bundle(DATA / "field_init_seed0.nfsp")
    assert golden.config == bundle0.config
    assert list(golden.params) == list(bundle0.params)
    for k, v in bundle0.params.items():
        assert np.array_equal(golden.params[k], v), k


def test_bundle_round_trip(tmp_path):
    b = init_bundle(3, FieldConfig(width=16, depth=2, symmetric=True))
    save_bundle(b, tmp_path / "b.nfsp")
    back = load_bundle(tmp_path / "b.nfsp")
    assert back.config == b.config and back.checksum() == b.checksum()


def test_style_injection_matters(bundle0, rng):
    pts = rng.uniform(-0.7, 0.7, (64, 3))
    dirs = _unit(rng, 64)
    fa, sa = field_forward(bundle0, pts, dirs, _latent(bundle0, 0))
    fb, sb = field_forward(bundle0, pts, dirs, _latent(bundle0, 1))
    assert np.max(np.abs(sa - sb)) > 1e-3
    assert np.max(np.abs(fa - fb)) > 1e-3


def test_field_lipschitz_statistical(bundle0):
    # sampled slopes of sigma on the unit cube stay under a recorded constant
    rng = np.random.default_rng(21)
    w = _latent(bundle0, 0)
    a = rng.uniform(-1, 1, (500, 3))
    step = rng.normal(size=(500, 3))
    step *= 1e-3 / np.linalg.norm(step, axis=1, keepdims=True)
    dirs = np.tile([0.0, 0.0, 1.0], (500, 1))
    _, sa = field_forward(bundle0, a, dirs, w)
    _, sb = field_forward(bundle0, a + step, dirs, w)
    slopes = np.abs(sb - sa) / 1e-3
    assert np.max(slopes) < 50.0


def test_symmetric_field_is_mirror_invariant(rng):
    b = init_bundle(2, FieldConfig(symmetric=True))
    pts = rng.uniform(-1, 1, (40, 3))
    dirs = _unit(rng, 40)
    flip = np.array([-1.0, 1.0, 1.0])
    w = _latent(b, 0)
    fa, sa = field_forward(b, pts, dirs, w)
    fb, sb = field_forward(b, pts * flip, dirs * flip, w)
    assert np.array_equal(sa, sb) and np.array_equal(fa, fb)


def test_config_validation():
    with pytest.raises(ValueError):
        FieldConfig(pos_freqs=0)
    with pytest.raises(ValueError):
        FieldConfig(feature_dim=2)
