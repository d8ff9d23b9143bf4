"""Deterministic volume rendering of the field into feature maps and images.

Rays are processed in fixed blocks. Each block gathers the samples whose
(displaced) position lies inside the scene cube, evaluates the field on them
in one graph, scatters the results back into the ``(rays, samples)`` layout
and composites front to back. Blocks are fixed by ray index and write to
disjoint pixel slots, so worker count and scheduling order do not change the
output bits. Changing the block size can move results by an ulp, because the
BLAS kernels group rows differently.

Gradients use recomputation: the feature map is rendered once, the upsampler
and loss give ``dL/dphi``, then each block is re-evaluated with the scalar
``sum(phi_block * dL/dphi_block)`` whose gradient equals the block's share of
``dL/dparams``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Protocol

import numpy as np
from PIL import Image

from .autodiff import Graph, Node, composite_weights
from .field import (
    LEAKY_SLOPE,
    FieldBundle,
    _fold,
    declare_params,
    encode,
    envelope,
    field_nodes,
)


@dataclass(frozen=True)
class CameraPose:
    yaw: float = 0.0
    pitch: float = 0.0
    radius: float = 2.0
    fov_y: float = 0.9
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"camera radius must be positive, got {self.radius}")
        if not abs(self.pitch) < np.pi / 2:
            raise ValueError(f"|pitch| must be below pi/2, got {self.pitch}")
        if not 0 < self.fov_y < np.pi:
            raise ValueError(f"fov_y must lie in (0, pi), got {self.fov_y}")

    @property
    def eye(self) -> np.ndarray:
        cp = np.cos(self.pitch)
        offset = np.array([cp * np.sin(self.yaw), np.sin(self.pitch), cp * np.cos(self.yaw)])
        return np.asarray(self.look_at, dtype=np.float64) + self.radius * offset

    def frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Camera (right, up, forward) unit vectors."""
        forward = np.asarray(self.look_at, dtype=np.float64) - self.eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        return right, up, forward


@dataclass(frozen=True)
class SamplingConfig:
    num_samples: int = 64
    t_near: float = 0.5
    t_far: float = 3.5

    def __post_init__(self):
        # t_near = 0 starts the ray at the camera, which is harmless
        if not 0 <= self.t_near < self.t_far:
            raise ValueError(f"need 0 <= t_near < t_far, got {self.t_near}, {self.t_far}")
        if self.num_samples < 2:
            raise ValueError(f"need at least 2 samples per ray, got {self.num_samples}")

    @property
    def delta(self) -> float:
        return (self.t_far - self.t_near) / self.num_samples

    def depths(self) -> np.ndarray:
        # stratum midpoints
        return self.t_near + (np.arange(self.num_samples) + 0.5) * self.delta


class Displacement(Protocol):
    def displacement_at(self, points: np.ndarray) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# rays and single-ray quadrature


def generate_rays(pose: CameraPose, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole rays through pixel centres: origins and unit directions, both ``(H, W, 3)``."""
    if H < 1 or W < 1:
        raise ValueError(f"image size must be positive, got {H}x{W}")
    right, up, forward = pose.frame()
    half = np.tan(0.5 * pose.fov_y)
    v = (1.0 - 2.0 * (np.arange(H) + 0.5) / H) * half
    u = (2.0 * (np.arange(W) + 0.5) / W - 1.0) * half * (W / H)
    dirs = forward + u[None, :, None] * right + v[:, None, None] * up
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.eye, dirs.shape).copy()
    return origins, dirs


def sample_points(origin, direction, config: SamplingConfig) -> tuple[np.ndarray, np.ndarray]:
    """Midpoint samples along one ray: ``(N, 3)`` positions and ``(N,)`` segment lengths."""
    t = config.depths()
    pts = np.asarray(origin, np.float64)[None, :] + t[:, None] * np.asarray(direction, np.float64)[None, :]
    return pts, np.full(config.num_samples, config.delta)


def integrate(features, sigmas, deltas) -> tuple[np.ndarray, float]:
    """Front-to-back compositing of one ray against a zero background."""
    features = np.asarray(features, np.float64)
    weights, final_t = _ray_weights(sigmas, deltas)
    color = np.sum(weights[:, None] * features, axis=0)
    return color, float(1.0 - final_t)


def _ray_weights(sigmas, deltas):
    sigmas = np.asarray(sigmas, np.float64)
    deltas = np.asarray(deltas, np.float64)
    if np.any(sigmas < 0):
        raise ValueError("densities must be non-negative")
    if np.any(deltas <= 0):
        raise ValueError("segment lengths must be positive")
    out = composite_weights(1.0 - np.exp(-(sigmas * deltas)))
    return out[:-1], out[-1]


def transmittance_weights(sigmas, deltas) -> tuple[np.ndarray, np.ndarray]:
    """Transmittance ``T_0..T_N`` and weights ``w_0..w_{N-1}`` for one ray."""
    weights, _ = _ray_weights(sigmas, deltas)
    T = np.empty(len(weights) + 1)
    T[0] = 1.0
    for i, w in enumerate(weights):
        T[i + 1] = T[i] - w
    return T, weights


# ---------------------------------------------------------------------------
# block evaluation


@dataclass
class _Block:
    graph: Graph
    bindings: dict
    color: Node
    opacity: Node


def composite_nodes(g: Graph, feat: Node, sigma: Node, deltas: Node) -> tuple[Node, Node]:
    """Batched compositing: ``feat (R, N, C)``, ``sigma (R, N)`` -> ``(R, C)`` and opacity ``(R,)``.

    Opacity is ``1 - T_N``, the correctly rounded exact sum of the weights.
    """
    R, N, C = feat.shape
    alpha = 1.0 - g.exp(-(sigma * deltas))
    out = g.composite(alpha)
    weights = g.slice(out, (slice(None), slice(0, N)))
    opacity = g.reshape(1.0 - g.slice(out, (slice(None), slice(N, N + 1))), (R,))
    wb = g.broadcast(g.reshape(weights, (R, N, 1)), (R, N, C))
    return g.sum(wb * feat, axis=1), opacity


def _block_points(origins, dirs, sampling: SamplingConfig, deform: Displacement | None):
    t = sampling.depths()
    pts = origins[:, None, :] + t[None, :, None] * dirs[:, None, :]
    pts = pts.reshape(-1, 3)
    if deform is not None:
        disp = deform.displacement_at(pts)
        # skip exact zeros so an identity deformation leaves every bit alone
        pts = np.add(pts, disp, out=pts.copy(), where=disp != 0)
    return pts


def _build_block(bundle: FieldBundle, origins, dirs, sampling, deform) -> _Block | None:
    cfg = bundle.config
    R, N = len(origins), sampling.num_samples
    pts = _block_points(origins, dirs, sampling, deform)
    env = envelope(pts, cfg.envelope_inner)
    idx = np.flatnonzero(env > 0)
    if len(idx) == 0:
        return None
    ray_of = idx // N
    p_in = pts[idx]
    if cfg.symmetric:
        p_in, d_in = _fold(p_in, dirs[ray_of])
        enc_d = encode(d_in, cfg.dir_freqs)
    else:
        enc_d = encode(dirs, cfg.dir_freqs)[ray_of]
    P = len(idx)
    g = Graph()
    params = declare_params(g, bundle, ("field.", "sigma.", "feat."))
    w = g.input("w", (1, cfg.w_dim))
    feat, sigma = field_nodes(
        g,
        cfg,
        g.input("enc_p", (P, cfg.pos_dim)),
        g.input("enc_d", (P, cfg.dir_dim)),
        g.input("env", (P, 1)),
        w,
        params,
    )
    feat3 = g.reshape(g.scatter(feat, idx, R * N), (R, N, cfg.feature_dim))
    sigma2 = g.reshape(g.scatter(sigma, idx, R * N), (R, N))
    deltas = g.const(np.full((R, N), sampling.delta))
    color, opacity = composite_nodes(g, feat3, sigma2, deltas)
    bindings = {"enc_p": encode(p_in, cfg.pos_freqs), "enc_d": enc_d, "env": env[idx, None]}
    return _Block(g, bindings, color, opacity)


def _run_block(bundle, w, origins, dirs, sampling, deform):
    block = _build_block(bundle, origins, dirs, sampling, deform)
    if block is None:
        return np.zeros((len(origins), bundle.config.feature_dim)), np.zeros(len(origins))
    ev = block.graph.forward({**bundle.params, **block.bindings, "w": np.reshape(w, (1, -1))})
    return ev[block.color], ev[block.opacity]


def _selected_rays(pose, H, W, pixel_mask):
    origins, dirs = generate_rays(pose, H, W)
    origins, dirs = origins.reshape(-1, 3), dirs.reshape(-1, 3)
    if pixel_mask is None:
        sel = np.arange(H * W)
    else:
        pixel_mask = np.asarray(pixel_mask)
        if pixel_mask.shape != (H, W):
            raise ValueError(f"pixel mask shape {pixel_mask.shape} does not match {H}x{W}")
        sel = np.flatnonzero(pixel_mask.reshape(-1) > 0)
    return origins[sel], dirs[sel], sel


def _blocks(n, size):
    return [slice(s, min(s + size, n)) for s in range(0, n, size)]


def render_feature_map(
    bundle: FieldBundle,
    w,
    pose: CameraPose,
    sampling: SamplingConfig,
    H: int,
    W: int,
    deform: Displacement | None = None,
    *,
    pixel_mask=None,
    workers: int = 1,
    block_rays: int = 512,
    return_opacity: bool = False,
):
    """Render an ``(H, W, C)`` feature map; pixels outside ``pixel_mask`` stay zero."""
    cfg = bundle.config
    w = np.asarray(w, np.float64)
    origins, dirs, sel = _selected_rays(pose, H, W, pixel_mask)
    blocks = _blocks(len(sel), block_rays)

    def job(sl):
        return _run_block(bundle, w, origins[sl], dirs[sl], sampling, deform)

    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, blocks))
    else:
        results = [job(sl) for sl in blocks]
    fmap = np.zeros((H * W, cfg.feature_dim))
    opacity = np.zeros(H * W)
    for sl, (color, alpha) in zip(blocks, results):
        fmap[sel[sl]] = color
        opacity[sel[sl]] = alpha
    fmap = fmap.reshape(H, W, cfg.feature_dim)
    if return_opacity:
        return fmap, opacity.reshape(H, W)
    return fmap


def field_param_grads(
    bundle: FieldBundle,
    w,
    pose: CameraPose,
    sampling: SamplingConfig,
    grad_map: np.ndarray,
    wrt: Iterable[str],
    deform: Displacement | None = None,
    *,
    pixel_mask=None,
    block_rays: int = 512,
) -> dict[str, np.ndarray]:
    """Vector-Jacobian product of the feature map with ``grad_map``.

    ``wrt`` may name field parameters and ``"w"``; the result holds one array per name.
    """
    wrt = list(wrt)
    H, W, C = grad_map.shape
    w = np.asarray(w, np.float64).reshape(1, -1)
    origins, dirs, sel = _selected_rays(pose, H, W, pixel_mask)
    gflat = grad_map.reshape(-1, C)[sel]
    out = {k: np.zeros_like(w) if k == "w" else np.zeros_like(bundle.params[k]) for k in wrt}
    for sl in _blocks(len(sel), block_rays):
        gb = gflat[sl]
        if not np.any(gb):
            continue
        block = _build_block(bundle, origins[sl], dirs[sl], sampling, deform)
        if block is None:
            continue
        g = block.graph
        vjp = g.sum(block.color * g.const(gb))
        ev = g.forward({**bundle.params, **block.bindings, "w": w})
        for k, v in g.backward(ev, vjp, wrt=wrt).items():
            out[k] += v
    return out


# ---------------------------------------------------------------------------
# upsampler


def bilinear_matrix(n: int, scale: int) -> np.ndarray:
    """``(n*scale, n)`` half-pixel bilinear interpolation matrix with edge clamping."""
    out = np.zeros((n * scale, n))
    src = (np.arange(n * scale) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    rows = np.arange(n * scale)
    np.add.at(out, (rows, lo), 1.0 - frac)
    np.add.at(out, (rows, hi), frac)
    return out


def _resize_nodes(g: Graph, x: Node, scale: int) -> Node:
    H, W, C = x.shape
    Uh = g.const(bilinear_matrix(H, scale))
    Uw = g.const(bilinear_matrix(W, scale))
    y = g.reshape(Uh @ g.reshape(x, (H, W * C)), (H * scale, W, C))
    y = g.reshape(g.transpose(y, (1, 0, 2)), (W, H * scale * C))
    y = g.reshape(Uw @ y, (W * scale, H * scale, C))
    return g.transpose(y, (1, 0, 2))


def _conv3x3_nodes(g: Graph, x: Node, Wk: Node, b: Node) -> Node:
    # replicate padding keeps constant maps constant
    H, W, C = x.shape
    x = g.concat([g.slice(x, (slice(0, 1),)), x, g.slice(x, (slice(H - 1, H),))], axis=0)
    x = g.concat([g.slice(x, (slice(None), slice(0, 1))), x, g.slice(x, (slice(None), slice(W - 1, W)))], axis=1)
    taps = [
        g.reshape(g.slice(x, (slice(dy, dy + H), slice(dx, dx + W))), (H * W, C))
        for dy in range(3)
        for dx in range(3)
    ]
    cols = g.concat(taps, axis=1)
    cout = Wk.shape[1]
    return cols @ Wk + g.broadcast(b, (H * W, cout))


def upsample_nodes(g: Graph, bundle: FieldBundle, phi: Node, w: Node, p) -> Node:
    """Bilinear resize then a three-layer style-modulated conv head; output ``(sH, sW, 3)`` in [0, 1]."""
    scale = bundle.config.upsample_scale
    x = _resize_nodes(g, phi, scale)
    H, W, C = x.shape
    h = g.reshape(x, (H * W, C))
    for k in range(3):
        cin = h.shape[1]
        mod = (w @ p[f"up.{k}.A"] + p[f"up.{k}.a"]) + 1.0
        h = h * g.broadcast(mod, (H * W, cin))
        h = _conv3x3_nodes(g, g.reshape(h, (H, W, cin)), p[f"up.{k}.W"], p[f"up.{k}.b"])
        h = g.leaky_relu(h, LEAKY_SLOPE) if k < 2 else g.clip(h, 0.0, 1.0)
    return g.reshape(h, (H, W, 3))


def upsample(bundle: FieldBundle, feature_map: np.ndarray, w) -> np.ndarray:
    cfg = bundle.config
    feature_map = np.asarray(feature_map, np.float64)
    if feature_map.ndim != 3 or feature_map.shape[2] != cfg.feature_dim:
        raise ValueError(f"expected an (H, W, {cfg.feature_dim}) feature map, got {feature_map.shape}")
    g = Graph()
    phi = g.input("phi", feature_map.shape)
    wn = g.input("w", (1, cfg.w_dim))
    img = upsample_nodes(g, bundle, phi, wn, declare_params(g, bundle, "up."))
    ev = g.forward({**bundle.params, "phi": feature_map, "w": np.reshape(w, (1, -1))})
    return ev[img]


# ---------------------------------------------------------------------------
# render + loss gradients


LossBuilder = Callable[[Graph, Node], Node]


def render_image(bundle, w, pose, sampling, H, W, deform=None, **kw) -> np.ndarray:
    return upsample(bundle, render_feature_map(bundle, w, pose, sampling, H, W, deform, **kw), w)


def render_loss_and_grads(
    bundle: FieldBundle,
    w,
    pose: CameraPose,
    sampling: SamplingConfig,
    H: int,
    W: int,
    loss: LossBuilder,
    wrt: Iterable[str],
    deform: Displacement | None = None,
    *,
    block_rays: int = 512,
) -> tuple[float, dict[str, np.ndarray], np.ndarray]:
    """Scalar ``loss(g, image)`` of the upsampled render and its gradients.

    ``wrt`` names bundle parameters (any prefix) and/or ``"w"``. Returns
    ``(loss, grads, image)``.
    """
    wrt = list(wrt)
    cfg = bundle.config
    w = np.asarray(w, np.float64).reshape(1, -1)
    fmap = render_feature_map(bundle, w, pose, sampling, H, W, deform, block_rays=block_rays)

    g = Graph()
    phi = g.input("phi", fmap.shape)
    wn = g.input("w", (1, cfg.w_dim))
    img = upsample_nodes(g, bundle, phi, wn, declare_params(g, bundle, "up."))
    L = loss(g, img)
    ev = g.forward({**bundle.params, "phi": fmap, "w": w})
    head_wrt = ["phi"] + [k for k in wrt if k == "w" or k.startswith("up.")]
    head = g.backward(ev, L, wrt=head_wrt)

    field_wrt = [k for k in wrt if k == "w" or k.startswith(("field.", "sigma.", "feat."))]
    grads = {k: v for k, v in head.items() if k != "phi"}
    if field_wrt:
        fg = field_param_grads(bundle, w, pose, sampling, head["phi"], field_wrt, deform, block_rays=block_rays)
        for k, v in fg.items():
            grads[k] = grads[k] + v if k in grads else v
    unknown = [k for k in wrt if k not in grads]
    if unknown:
        raise KeyError(f"cannot differentiate with respect to {unknown}")
    grads = {k: (v.reshape(-1) if k == "w" else v) for k, v in grads.items()}
    return float(ev[L].reshape(())), grads, ev[img]


def mse_loss(target: np.ndarray) -> LossBuilder:
    def build(g: Graph, img: Node) -> Node:
        return g.mean(g.square(img - g.const(target)))

    return build


# ---------------------------------------------------------------------------
# image io


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, image: np.ndarray) -> None:
    img = image if image.dtype == np.uint8 else to_uint8(image)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    img = image if image.dtype == np.uint8 else to_uint8(image)
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM is supported")
    pos += 1
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3).copy()
