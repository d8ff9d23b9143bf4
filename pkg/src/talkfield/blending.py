"""Mouth masks, temporal mask averaging and feature-space blending."""

from __future__ import annotations

from collections import deque

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError

from .field import FieldBundle
from .render import CameraPose, upsample

MASK_WINDOW = 7


def project_to_pixels(points_field, pose: CameraPose, H: int, W: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates ``(col, row)`` of field points (pixel centres at integers) and a front-facing flag."""
    right, up, forward = pose.frame()
    rel = np.asarray(points_field, np.float64) - pose.eye
    depth = rel @ forward
    front = depth > 1e-9
    safe = np.where(front, depth, 1.0)
    half = np.tan(0.5 * pose.fov_y)
    u = (rel @ right) / safe / (half * W / H)
    v = (rel @ up) / safe / half
    cols = 0.5 * (u + 1.0) * W - 0.5
    rows = 0.5 * (1.0 - v) * H - 0.5
    return np.stack([cols, rows], axis=-1), front


def rasterize_hull(points_px, H: int, W: int) -> np.ndarray:
    """Boolean ``(H, W)`` mask of pixel centres inside the closed convex hull of 2D points."""
    pts = np.asarray(points_px, np.float64)
    out = np.zeros((H, W), dtype=bool)
    if len(pts) < 3:
        return out
    try:
        hull = ConvexHull(pts)
    except QhullError:
        # collinear or coincident points enclose no area
        return out
    cols, rows = np.meshgrid(np.arange(W, dtype=np.float64), np.arange(H, dtype=np.float64))
    lo = np.floor(pts.min(axis=0)).astype(int)
    hi = np.ceil(pts.max(axis=0)).astype(int)
    c0, c1 = max(lo[0], 0), min(hi[0], W - 1)
    r0, r1 = max(lo[1], 0), min(hi[1], H - 1)
    if c0 > c1 or r0 > r1:
        return out
    sub = np.stack([cols[r0 : r1 + 1, c0 : c1 + 1], rows[r0 : r1 + 1, c0 : c1 + 1]], axis=-1)
    inside = np.ones(sub.shape[:2], dtype=bool)
    scale = np.abs(pts).max() + 1.0
    for nx, ny, off in hull.equations:
        inside &= sub[..., 0] * nx + sub[..., 1] * ny + off <= 1e-12 * scale
    out[r0 : r1 + 1, c0 : c1 + 1] = inside
    return out


def project_mouth_mask(
    mouth_vertices_field,
    pose: CameraPose,
    H: int,
    W: int,
    feather: float = 1.0,
    dilate: int = 1,
) -> np.ndarray:
    """Soft ``(H, W)`` mouth mask in [0, 1]: projected convex hull, square dilation, Gaussian feather."""
    verts = np.asarray(mouth_vertices_field, np.float64)
    if verts.ndim != 2 or verts.shape[1] != 3 or len(verts) < 3:
        raise ValueError(f"need at least 3 mouth vertices as (M, 3), got {verts.shape}")
    if feather < 0 or dilate < 0:
        raise ValueError("feather and dilate must be non-negative")
    px, front = project_to_pixels(verts, pose, H, W)
    hard = rasterize_hull(px[front], H, W)
    if dilate and hard.any():
        hard = ndimage.binary_dilation(hard, structure=np.ones((3, 3), bool), iterations=dilate)
    mask = hard.astype(np.float64)
    if feather > 0:
        mask = ndimage.gaussian_filter(mask, sigma=feather, mode="nearest", truncate=3.0)
    return np.clip(mask, 0.0, 1.0)


class MaskHistory:
    """FIFO of the most recent ``capacity`` masks."""

    def __init__(self, capacity: int = MASK_WINDOW):
        if capacity < 1:
            raise ValueError(f"capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._masks: deque[np.ndarray] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._masks)

    def push(self, mask) -> None:
        m = np.asarray(mask, np.float64)
        if self._masks and m.shape != self._masks[0].shape:
            raise ValueError(f"mask shape {m.shape} differs from history {self._masks[0].shape}")
        self._masks.append(m.copy())

    @property
    def masks(self) -> list[np.ndarray]:
        return list(self._masks)

    def step(self, raw_mask) -> np.ndarray:
        """Mask for the current frame: mean of strictly previous raw masks, then record ``raw_mask``.

        On the very first frame there is nothing earlier, so the raw mask seeds
        the history and is used as is.
        """
        if not self._masks:
            self.push(raw_mask)
            return average_mask(self)
        m = average_mask(self)
        self.push(raw_mask)
        return m


def average_mask(history: MaskHistory) -> np.ndarray:
    masks = history.masks
    if not masks:
        raise ValueError("cannot average an empty mask history")
    acc = np.zeros_like(masks[0])
    for m in masks:
        acc += m
    return acc / len(masks)


def blend(phi_deformed, phi_exp, mask) -> np.ndarray:
    """Convex per-pixel mix ``phi_deformed * (1 - M) + phi_exp * M``."""
    a = np.asarray(phi_deformed, np.float64)
    b = np.asarray(phi_exp, np.float64)
    m = np.asarray(mask, np.float64)
    if a.shape != b.shape or a.ndim != 3 or m.shape != a.shape[:2]:
        raise ValueError(f"blend shapes do not match: {a.shape}, {b.shape}, mask {m.shape}")
    m = m[..., None]
    return a * (1.0 - m) + b * m


def compose_final(bundle: FieldBundle, phi_blended, w_inv) -> np.ndarray:
    return upsample(bundle, phi_blended, w_inv)
