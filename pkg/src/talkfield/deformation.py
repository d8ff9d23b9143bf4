"""Vertex-to-field binding and the interpolated displacement field.

Sign convention: the stored displacement is ``V_init - V_audio`` mapped into
field units. Rendering queries the canonical field at ``p + dp``, which is a
backward warp, so a vertex that moved down in the audio-driven mesh pulls
canonical content from above into the sample position below.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

FIELD_EXTENT = 1.6
OPTIMAL_LIMIT = 256


class BindingError(ValueError):
    pass


@dataclass(frozen=True)
class ScaleTransform:
    """``field = (model - center) * scale``."""

    center: np.ndarray
    scale: float

    @classmethod
    def from_bbox(cls, bbox) -> "ScaleTransform":
        bbox = np.asarray(bbox, dtype=np.float64)
        extent = bbox[1] - bbox[0]
        if not np.all(np.isfinite(bbox)) or extent.max() <= 0:
            raise ValueError(f"degenerate bounding box {bbox.tolist()}")
        return cls(0.5 * (bbox[0] + bbox[1]), FIELD_EXTENT / float(extent.max()))

    def apply(self, points) -> np.ndarray:
        return (np.asarray(points, np.float64) - self.center) * self.scale

    def apply_linear(self, vectors) -> np.ndarray:
        return np.asarray(vectors, np.float64) * self.scale

    def invert(self, points) -> np.ndarray:
        return np.asarray(points, np.float64) / self.scale + self.center


def scale_to_field(vertices, bbox) -> tuple[np.ndarray, ScaleTransform]:
    tf = ScaleTransform.from_bbox(bbox)
    return tf.apply(vertices), tf


def anchor_lattice(n: int = 64) -> np.ndarray:
    """``(n*n, 2)`` pixel-centre lattice over the frontal XY square [-1, 1]^2."""
    c = -1.0 + (2.0 * np.arange(n) + 1.0) / n
    gx, gy = np.meshgrid(c, c[::-1])
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


@dataclass(frozen=True)
class VertexBinding:
    vertex_ids: np.ndarray  # (M,)
    grid_ids: np.ndarray  # (M,) lattice index per vertex
    anchors: np.ndarray  # (M, 3) field coordinates
    transform: ScaleTransform | None = None

    def pairs(self) -> set[tuple[int, int]]:
        return {(int(v), int(g)) for v, g in zip(self.vertex_ids, self.grid_ids)}


def _optimal(xy, grid):
    cost = np.linalg.norm(xy[:, None, :] - grid[None, :, :], axis=-1)
    rows, cols = linear_sum_assignment(cost)
    out = np.empty(len(xy), dtype=np.intp)
    out[rows] = cols
    return out


def _greedy(xy, grid):
    # candidate pairs from growing k-NN lists, taken in ascending distance
    tree = cKDTree(grid)
    M = len(xy)
    out = np.full(M, -1, dtype=np.intp)
    used = np.zeros(len(grid), dtype=bool)
    k = min(16, len(grid))
    while True:
        todo = np.flatnonzero(out < 0)
        if len(todo) == 0:
            return out
        dist, idx = tree.query(xy[todo], k=k)
        dist = dist.reshape(len(todo), -1)
        idx = idx.reshape(len(todo), -1)
        order = np.lexsort((idx.ravel(), np.repeat(todo, idx.shape[1]), dist.ravel()))
        for flat in order:
            v = todo[flat // idx.shape[1]]
            gi = idx.flat[flat]
            if out[v] < 0 and not used[gi]:
                out[v] = gi
                used[gi] = True
        if k == len(grid):
            if np.any(out < 0):
                raise BindingError("anchor grid exhausted")
            return out
        k = min(4 * k, len(grid))


def bind_vertices(
    vertices_field,
    grid=None,
    method: str = "auto",
    transform: ScaleTransform | None = None,
) -> VertexBinding:
    """One-to-one XY matching of vertices to lattice points; anchor z comes from the vertex.

    ``method`` is ``"optimal"`` (minimum total XY distance), ``"greedy"``
    (ascending nearest distance) or ``"auto"`` (optimal up to 256 vertices).
    """
    v = np.asarray(vertices_field, np.float64)
    grid = anchor_lattice() if grid is None else np.asarray(grid, np.float64)[:, :2]
    if len(grid) < len(v):
        raise BindingError(f"grid of {len(grid)} points cannot bind {len(v)} vertices")
    if method == "auto":
        method = "optimal" if len(v) <= OPTIMAL_LIMIT else "greedy"
    if method == "optimal":
        gid = _optimal(v[:, :2], grid)
    elif method == "greedy":
        gid = _greedy(v[:, :2], grid)
    else:
        raise ValueError(f"unknown binding method {method!r}")
    anchors = np.column_stack([grid[gid], v[:, 2]])
    if np.any(np.abs(anchors) > 1.0):
        raise BindingError("anchors must lie inside [-1, 1]^3")
    return VertexBinding(np.arange(len(v)), gid, anchors, transform)


@dataclass(frozen=True)
class DisplacementField:
    anchors: np.ndarray
    displacements: np.ndarray
    k_neighbors: int = 4
    support_radius: float = 0.15

    def __post_init__(self):
        object.__setattr__(self, "_tree", cKDTree(self.anchors))

    @property
    def is_zero(self) -> bool:
        return not np.any(self.displacements)

    def displacement_at(self, points) -> np.ndarray:
        p = np.asarray(points, np.float64)
        single = p.ndim == 1
        p = np.atleast_2d(p)
        out = np.zeros_like(p)
        if self.is_zero or len(p) == 0:
            return out[0] if single else out
        r = self.support_radius
        tree: cKDTree = self._tree  # type: ignore[attr-defined]
        # points with no anchor inside the support get exactly zero
        near, _ = tree.query(p, k=1, distance_upper_bound=r)
        live = np.flatnonzero(np.isfinite(near))
        if len(live):
            k = min(self.k_neighbors, len(self.anchors))
            dist, idx = tree.query(p[live], k=k)
            dist = dist.reshape(len(live), k)
            idx = idx.reshape(len(live), k)
            out[live] = _idw(dist, self.displacements[idx], r)
        return out[0] if single else out


def _idw(dist, disp, radius):
    """IDW with power 2 and compact falloff over neighbour lists ``dist (P, k)``, ``disp (P, k, 3)``."""
    hit = dist == 0.0
    safe = np.where(hit, 1.0, dist)
    inv = 1.0 / (safe * safe)
    t = np.minimum(dist / radius, 1.0)
    fall = (1.0 - t * t) ** 2
    num = np.einsum("pk,pkc->pc", inv * fall, disp)
    res = num / inv.sum(axis=1, keepdims=True)
    exact = np.flatnonzero(hit.any(axis=1))
    if len(exact):
        res[exact] = disp[exact, np.argmax(hit[exact], axis=1)]
    return res


def build_displacement_field(
    binding: VertexBinding,
    delta_v,
    k: int = 4,
    radius: float = 0.15,
    transform: ScaleTransform | None = None,
) -> DisplacementField:
    """Per-anchor displacements ``+dV = V_init - V_audio`` in field units, clamped to ``radius``."""
    delta_v = np.asarray(delta_v, np.float64)
    if delta_v.ndim != 2 or delta_v.shape[1] != 3:
        raise ValueError(f"displacements must be (V, 3), got {delta_v.shape}")
    if len(delta_v) <= binding.vertex_ids.max():
        raise ValueError(f"{len(delta_v)} displacements do not cover vertex {binding.vertex_ids.max()}")
    tf = transform or binding.transform
    d = delta_v[binding.vertex_ids]
    d = tf.apply_linear(d) if tf is not None else d.copy()
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    d = np.where(norm > radius, d * (radius / np.where(norm > 0, norm, 1.0)), d)
    return DisplacementField(binding.anchors.copy(), d, k, radius)


def bind_mesh(vertices_model, bbox, grid=None, method: str = "auto") -> VertexBinding:
    """Scale a model-space mesh into the field and bind it to the lattice."""
    vf, tf = scale_to_field(vertices_model, bbox)
    return bind_vertices(vf, grid, method=method, transform=tf)
