"""Pixel-level and shape-level metrics used in run reports."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .face_model import BlendshapeBasis, ShapeCoeffs, evaluate_shape

PSNR_CAP = 99.0


@dataclass(frozen=True)
class MetricReport:
    name: str
    values: tuple[float, ...]

    @classmethod
    def of(cls, name: str, values) -> "MetricReport":
        v = tuple(float(x) for x in values)
        if not v or not all(np.isfinite(v)):
            raise ValueError(f"metric {name!r} needs finite values")
        return cls(name, v)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def min(self) -> float:
        return min(self.values)

    @property
    def max(self) -> float:
        return max(self.values)

    def summary(self) -> dict:
        return {"name": self.name, "mean": self.mean, "min": self.min, "max": self.max, "count": len(self.values)}


def psnr(a, b, max_value: float = 1.0) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr needs equal shapes, got {a.shape} and {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(max_value * max_value / mse)))


def mean_abs_diff(a, b) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shapes differ: {a.shape} vs {b.shape}")
    # compensated sum so a constant difference comes back as itself
    return math.fsum(np.abs(a - b).ravel()) / a.size


def mouth_opening(beta, basis: BlendshapeBasis) -> float:
    """Vertical distance between the upper and lower lip centres of the neutral identity with expression ``beta``."""
    verts = evaluate_shape(basis, ShapeCoeffs(np.zeros(basis.k_id), np.asarray(beta, np.float64)))
    up, lo = basis.lip_pair
    return float(abs(verts[up, 1] - verts[lo, 1]))


def envelope_correlation(series_a, series_b) -> float:
    a = np.asarray(series_a, np.float64).ravel()
    b = np.asarray(series_b, np.float64).ravel()
    if len(a) != len(b) or len(a) < 3:
        raise ValueError(f"need two series of equal length >= 3, got {len(a)} and {len(b)}")
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("correlation is undefined for a constant series")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))
