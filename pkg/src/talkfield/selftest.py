"""Fast invariant checks runnable from the command line."""

from __future__ import annotations

import math

import numpy as np

from .blending import MaskHistory, average_mask, blend
from .deformation import DisplacementField, anchor_lattice
from .field import init_bundle
from .metrics import envelope_correlation, psnr
from .render import CameraPose, SamplingConfig, render_feature_map, transmittance_weights


def _weights_sum(rng):
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(1, 64))
        T, w = transmittance_weights(rng.exponential(2.0, n), rng.uniform(0.0, 0.2, n))
        if np.any(np.diff(T) > 0) or math.fsum(w) > 1.0:
            return False, "transmittance increased or weights exceeded one"
        worst = max(worst, math.fsum(w))
    return True, f"max weight sum {worst:.6f}"


def _zero_deformation(_rng):
    bundle = init_bundle(0)
    w = np.zeros(bundle.config.w_dim)
    pose = CameraPose(0.2, 0.1)
    s = SamplingConfig(16)
    zero = DisplacementField(np.column_stack([anchor_lattice(8), np.zeros(64)]), np.zeros((64, 3)))
    a = render_feature_map(bundle, w, pose, s, 8, 8)
    b = render_feature_map(bundle, w, pose, s, 8, 8, zero)
    return bool(np.array_equal(a, b)), "8x8 feature map"


def _blend_exact(rng):
    a, b = rng.normal(size=(2, 6, 5, 4))
    ok = np.array_equal(blend(a, b, np.zeros((6, 5))), a) and np.array_equal(blend(a, b, np.ones((6, 5))), b)
    return bool(ok), "binary masks pick one source"


def _mask_mean(rng):
    h = MaskHistory(7)
    masks = rng.uniform(size=(7, 5, 5))
    for m in masks:
        h.push(m)
    err = float(np.max(np.abs(average_mask(h) - masks.mean(axis=0))))
    return err <= 1e-12, f"max error {err:.1e}"


def _metrics(rng):
    x = rng.normal(size=20)
    ok = abs(envelope_correlation(x, 3.0 * x + 1.0) - 1.0) < 1e-12 and psnr(x, x) == 99.0
    return bool(ok), "correlation and psnr sentinels"


CHECKS = {
    "weights": _weights_sum,
    "zero deformation": _zero_deformation,
    "blend": _blend_exact,
    "mask mean": _mask_mean,
    "metrics": _metrics,
}


def run_selftest(seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn(rng)
        except Exception as exc:  # report, keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, ok, detail))
    return out
