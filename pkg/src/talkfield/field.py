"""Style-conditioned radiance field and the mapping network.

The field MLP sees ``[enc(p), w]`` at its first layer and ``[h, w]`` at every
later hidden layer. Concatenation is implemented as a split matmul,
``[h, w] @ [[W_h], [W_w]] = h @ W_h + w @ W_w``, so the style term is computed
once per query batch instead of once per point. Density comes from the last
hidden layer through a softplus and is multiplied by a smooth radial envelope
that vanishes outside the cube [-1, 1]^3; the feature head also receives
``enc(d)`` and ends in a sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .autodiff import Graph, Node, load_tensors, save_tensors

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class FieldConfig:
    z_dim: int = 32
    w_dim: int = 32
    map_hidden: int = 64
    width: int = 64
    depth: int = 4
    feature_dim: int = 16
    pos_freqs: int = 6
    dir_freqs: int = 2
    head_hidden: int = 8
    upsample_scale: int = 4
    envelope_inner: float = 0.85
    symmetric: bool = False

    def __post_init__(self):
        if self.pos_freqs < 1 or self.dir_freqs < 0:
            raise ValueError("need pos_freqs >= 1 and dir_freqs >= 0")
        if self.feature_dim < 3:
            raise ValueError("feature_dim must be >= 3 (first three channels are colour)")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")

    @property
    def pos_dim(self) -> int:
        return 3 + 6 * self.pos_freqs

    @property
    def dir_dim(self) -> int:
        return 3 + 6 * self.dir_freqs


@dataclass
class FieldBundle:
    """Mapping, field and upsampler parameters. Treat as immutable; use ``with_params``."""

    config: FieldConfig
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def with_params(self, updates: Mapping[str, np.ndarray]) -> "FieldBundle":
        merged = dict(self.params)
        merged.update({k: np.array(v, dtype=np.float64) for k, v in updates.items()})
        return FieldBundle(self.config, merged)

    def names(self, prefix: str | tuple[str, ...]) -> list[str]:
        return [k for k in self.params if k.startswith(prefix)]

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()


MAPPING_PREFIX = "map."
GENERATOR_PREFIXES = ("field.", "sigma.", "feat.", "up.")

_CONFIG_FIELDS = [f for f in FieldConfig.__dataclass_fields__]


def save_bundle(bundle: FieldBundle, path) -> None:
    tensors = dict(bundle.params)
    for key in _CONFIG_FIELDS:
        tensors[f"config.{key}"] = np.array([float(getattr(bundle.config, key))])
    save_tensors(path, tensors)


def load_bundle(path) -> FieldBundle:
    tensors = load_tensors(path)
    kwargs = {}
    for key in _CONFIG_FIELDS:
        value = tensors.pop(f"config.{key}")[0]
        kind = FieldConfig.__dataclass_fields__[key].type
        kwargs[key] = {"int": int, "float": float, "bool": bool}[kind](value)
    return FieldBundle(FieldConfig(**kwargs), tensors)


# ---------------------------------------------------------------------------
# encoding and envelope


def encode(x: np.ndarray, num_freqs: int) -> np.ndarray:
    """Fourier features ``[x, sin(2^0 pi x), cos(2^0 pi x), ..., cos(2^(L-1) pi x)]``.

    Works on a single 3-vector or on ``(P, 3)`` rows.
    """
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    for k in range(num_freqs):
        arg = (2.0**k * np.pi) * x
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def envelope(points: np.ndarray, inner: float) -> np.ndarray:
    """Density envelope of the cube [-1, 1]^3.

    Per axis it is 1 for ``|x| <= inner`` and fades smoothly to 0 at ``|x| = 1``;
    the product over axes vanishes everywhere outside the cube.
    """
    t = np.clip((np.abs(points) - inner) / (1.0 - inner), 0.0, 1.0)
    return np.prod((1.0 - t * t) ** 2, axis=-1)


def _fold(points, dirs):
    # mirror x into the right half-space; directions follow the same reflection
    sign = np.where(points[:, 0] >= 0.0, 1.0, -1.0)
    p = points.copy()
    d = dirs.copy()
    p[:, 0] = np.abs(points[:, 0])
    d[:, 0] = dirs[:, 0] * sign
    return p, d


def field_inputs(config: FieldConfig, points: np.ndarray, dirs: np.ndarray) -> dict[str, np.ndarray]:
    """Encoded graph inputs for ``(P, 3)`` points and unit directions."""
    if config.symmetric:
        points, dirs = _fold(points, dirs)
    return {
        "enc_p": encode(points, config.pos_freqs),
        "enc_d": encode(dirs, config.dir_freqs),
        "env": envelope(points, config.envelope_inner)[:, None],
    }


# ---------------------------------------------------------------------------
# graph builders


def declare_params(g: Graph, bundle: FieldBundle, prefix: str | tuple[str, ...]) -> dict[str, Node]:
    return {k: g.param(k, bundle.params[k].shape) for k in bundle.names(prefix)}


def mapping_nodes(g: Graph, config: FieldConfig, z: Node, p: Mapping[str, Node]) -> Node:
    n = z.shape[0]
    h = z @ p["map.0.W"]
    h = g.leaky_relu(h + g.broadcast(p["map.0.b"], h.shape), LEAKY_SLOPE)
    out = h @ p["map.1.W"]
    return out + g.broadcast(p["map.1.b"], (n, out.shape[1]))


def field_nodes(
    g: Graph,
    config: FieldConfig,
    enc_p: Node,
    enc_d: Node,
    env: Node,
    w: Node,
    p: Mapping[str, Node],
) -> tuple[Node, Node]:
    """Feature ``(P, C)`` and density ``(P, 1)`` nodes for ``P`` encoded points."""
    P = enc_p.shape[0]
    width = config.width

    def style(k):
        return g.broadcast(w @ p[f"field.{k}.Ww"] + p[f"field.{k}.b"], (P, width))

    h = g.leaky_relu(enc_p @ p["field.0.Wp"] + style(0), LEAKY_SLOPE)
    for k in range(1, config.depth):
        h = g.leaky_relu(h @ p[f"field.{k}.Wh"] + style(k), LEAKY_SLOPE)
    raw_sigma = h @ p["sigma.W"] + g.broadcast(p["sigma.b"], (P, 1))
    sigma = g.softplus(raw_sigma) * env
    raw_feat = h @ p["feat.Wh"] + enc_d @ p["feat.Wd"] + g.broadcast(p["feat.b"], (P, config.feature_dim))
    return g.sigmoid(raw_feat), sigma


# ---------------------------------------------------------------------------
# initialisation


def _uniform(rng, fan_in, shape, gain=1.0):
    bound = gain * np.sqrt(6.0 / ((1.0 + LEAKY_SLOPE**2) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


def _conv_identity(c_in, c_out):
    W = np.zeros((9, c_in, c_out))
    for c in range(min(c_in, c_out)):
        W[4, c, c] = 1.0
    return W.reshape(9 * c_in, c_out)


def init_bundle(
    seed: int,
    config: FieldConfig | None = None,
    head_jitter: float = 0.1,
    mirror_head: bool = False,
) -> FieldBundle:
    """Deterministic initialisation.

    ``head_jitter=0`` gives an exact identity upsampler head (output equals the
    first three bilinearly upsampled channels). ``mirror_head`` makes every
    head kernel left-right symmetric, so a mirror-symmetric feature map stays
    mirror-symmetric after upsampling.
    """
    config = config or FieldConfig()
    rng = np.random.default_rng(seed)
    c = config
    P: dict[str, np.ndarray] = {}
    P["map.0.W"] = _uniform(rng, c.z_dim, (c.z_dim, c.map_hidden))
    P["map.0.b"] = np.zeros((1, c.map_hidden))
    P["map.1.W"] = _uniform(rng, c.map_hidden, (c.map_hidden, c.w_dim), gain=0.5)
    P["map.1.b"] = np.zeros((1, c.w_dim))
    fan0 = c.pos_dim + c.w_dim
    P["field.0.Wp"] = _uniform(rng, fan0, (c.pos_dim, c.width))
    P["field.0.Ww"] = _uniform(rng, fan0, (c.w_dim, c.width))
    P["field.0.b"] = np.zeros((1, c.width))
    for k in range(1, c.depth):
        fan = c.width + c.w_dim
        P[f"field.{k}.Wh"] = _uniform(rng, fan, (c.width, c.width))
        P[f"field.{k}.Ww"] = _uniform(rng, fan, (c.w_dim, c.width))
        P[f"field.{k}.b"] = np.zeros((1, c.width))
    P["sigma.W"] = _uniform(rng, c.width, (c.width, 1), gain=0.3)
    P["sigma.b"] = np.zeros((1, 1))
    fan = c.width + c.dir_dim
    P["feat.Wh"] = _uniform(rng, fan, (c.width, c.feature_dim))
    P["feat.Wd"] = _uniform(rng, fan, (c.dir_dim, c.feature_dim))
    P["feat.b"] = np.zeros((1, c.feature_dim))

    chans = [c.feature_dim, c.head_hidden, c.head_hidden, 3]
    for k in range(3):
        cin, cout = chans[k], chans[k + 1]
        W = _conv_identity(cin, cout)
        if head_jitter:
            W = W + head_jitter * rng.uniform(-1.0, 1.0, size=W.shape) / np.sqrt(9 * cin)
        if mirror_head:
            K = W.reshape(3, 3, cin, cout)
            W = (0.5 * (K + K[:, ::-1])).reshape(9 * cin, cout)
        P[f"up.{k}.W"] = W
        P[f"up.{k}.b"] = np.zeros((1, cout))
        scale = head_jitter / np.sqrt(c.w_dim)
        P[f"up.{k}.A"] = scale * rng.uniform(-1.0, 1.0, size=(c.w_dim, cin))
        P[f"up.{k}.a"] = np.zeros((1, cin))

    bundle = FieldBundle(config, P)
    P["sigma.b"] = np.array([[_calibrate_density_bias(bundle, rng)]])
    return FieldBundle(config, P)


def _calibrate_density_bias(bundle: FieldBundle, rng, target: float = 0.5) -> float:
    # mean sigma * scene extent (2) ~= 1 over the cube
    cfg = bundle.config
    pts = rng.uniform(-1.0, 1.0, size=(2048, 3))
    dirs = rng.normal(size=(2048, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    zs = rng.standard_normal((4, cfg.z_dim))
    raws = []
    for k, z in enumerate(zs):
        sl = slice(k * 512, (k + 1) * 512)
        w = map_latent(bundle, z)
        _, _, raw = _field_eval(bundle, pts[sl], dirs[sl], w, want_raw=True)
        raws.append(raw)
    raw = np.concatenate(raws)[:, 0]
    env = envelope(pts, cfg.envelope_inner)
    lo, hi = -30.0, 30.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if np.mean(np.logaddexp(0.0, raw + mid) * env) > target:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# evaluation


def map_latent(bundle: FieldBundle, z: np.ndarray) -> np.ndarray:
    """Style vector ``w = f(z)`` of shape ``(w_dim,)``."""
    cfg = bundle.config
    z = np.asarray(z, dtype=np.float64).reshape(1, cfg.z_dim)
    g = Graph()
    p = declare_params(g, bundle, MAPPING_PREFIX)
    g.output("w", mapping_nodes(g, cfg, g.input("z", (1, cfg.z_dim)), p))
    ev = g.forward({**bundle.params, "z": z})
    return ev["w"][0].copy()


def mean_latent(bundle: FieldBundle, count: int = 1000, seed: int = 0) -> np.ndarray:
    """Average of ``count`` mapped gaussian samples."""
    cfg = bundle.config
    z = np.random.default_rng(seed).standard_normal((count, cfg.z_dim))
    g = Graph()
    p = declare_params(g, bundle, MAPPING_PREFIX)
    g.output("w", mapping_nodes(g, cfg, g.input("z", (count, cfg.z_dim)), p))
    return g.forward({**bundle.params, "z": z})["w"].mean(axis=0)


def _field_eval(bundle, points, dirs, w, want_raw=False):
    cfg = bundle.config
    inputs = field_inputs(cfg, points, dirs)
    n = len(points)
    g = Graph()
    p = declare_params(g, bundle, ("field.", "sigma.", "feat."))
    feat, sigma = field_nodes(
        g,
        cfg,
        g.input("enc_p", (n, cfg.pos_dim)),
        g.input("enc_d", (n, cfg.dir_dim)),
        g.input("env", (n, 1)),
        g.input("w", (1, cfg.w_dim)),
        p,
    )
    ev = g.forward({**bundle.params, **inputs, "w": np.asarray(w, dtype=np.float64).reshape(1, -1)})
    raw = None
    if want_raw:
        # pre-softplus density: the input of the softplus node
        softplus = next(nd for nd in g.nodes if nd.op == "softplus")
        raw = ev.values[softplus.inputs[0]] - bundle.params["sigma.b"][0, 0]
    return ev[feat], ev[sigma][:, 0], raw


def field_forward(bundle: FieldBundle, points: np.ndarray, dirs: np.ndarray, w: np.ndarray):
    """Batched query: ``(P, C)`` features and ``(P,)`` densities."""
    feat, sigma, _ = _field_eval(bundle, np.asarray(points, np.float64), np.asarray(dirs, np.float64), w)
    return feat, sigma


def query_field(bundle: FieldBundle, p, d, w) -> tuple[np.ndarray, float]:
    d = np.asarray(d, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ValueError(f"view direction must be unit length, |d| = {np.linalg.norm(d):.8f}")
    feat, sigma = field_forward(bundle, np.asarray(p, np.float64)[None], d[None], w)
    return feat[0], float(sigma[0])


def config_replace(config: FieldConfig, **changes) -> FieldConfig:
    return replace(config, **changes)
