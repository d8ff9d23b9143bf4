"""Latent projection, generator tuning and landmark-based coefficient refinement."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import AdamState, adam_step
from .deformation import ScaleTransform
from .face_model import BlendshapeBasis, ShapeCoeffs, evaluate_shape, extract_landmarks
from .field import GENERATOR_PREFIXES, FieldBundle, mean_latent
from .render import CameraPose, SamplingConfig, mse_loss, render_loss_and_grads

PROJECT_LR = 1e-2
TUNE_LR = 1e-4


@dataclass
class InversionResult:
    w_inv: np.ndarray
    tuned_bundle: FieldBundle
    loss_curve: dict[str, list[float]]

    @property
    def final_loss(self) -> float:
        return min(self.loss_curve["tuning"] or self.loss_curve["projection"])


def _map_size(bundle: FieldBundle, target: np.ndarray) -> tuple[int, int]:
    s = bundle.config.upsample_scale
    H, W = target.shape[:2]
    if H % s or W % s or target.ndim != 3 or target.shape[2] != 3:
        raise ValueError(f"target of shape {target.shape} is not an RGB image divisible by the upsample factor {s}")
    return H // s, W // s


def _check(loss, phase, step):
    if not np.isfinite(loss):
        raise FloatingPointError(f"{phase}: non-finite loss at step {step}")


def project_latent(
    bundle: FieldBundle,
    target_image,
    pose: CameraPose,
    steps: int = 1000,
    sampling: SamplingConfig | None = None,
    *,
    lr: float = PROJECT_LR,
    w_init=None,
) -> tuple[np.ndarray, list[float]]:
    """Adam on ``w`` alone; returns the best iterate and the loss of every iterate.

    The curve has ``steps + 1`` entries: iterates ``0..steps``.
    """
    sampling = sampling or SamplingConfig()
    target = np.asarray(target_image, np.float64)
    H, W = _map_size(bundle, target)
    w = np.array(mean_latent(bundle) if w_init is None else w_init, dtype=np.float64)
    loss_fn = mse_loss(target)
    state = AdamState()
    curve: list[float] = []
    best_w, best = w.copy(), np.inf
    for step in range(steps + 1):
        want = ["w"] if step < steps else []
        loss, grads, _ = render_loss_and_grads(bundle, w, pose, sampling, H, W, loss_fn, want)
        _check(loss, "projection", step)
        curve.append(loss)
        if loss < best:
            best, best_w = loss, w.copy()
        if step < steps:
            w = adam_step({"w": w}, grads, state, lr)["w"]
    return best_w, curve


def tune_generator(
    bundle: FieldBundle,
    w,
    target_image,
    pose: CameraPose,
    steps: int = 1000,
    sampling: SamplingConfig | None = None,
    *,
    lr: float = TUNE_LR,
    prefixes: tuple[str, ...] = GENERATOR_PREFIXES,
) -> tuple[FieldBundle, list[float]]:
    """Adam on field and upsampler parameters with ``w`` and the mapping network frozen."""
    sampling = sampling or SamplingConfig()
    target = np.asarray(target_image, np.float64)
    H, W = _map_size(bundle, target)
    names = bundle.names(prefixes)
    loss_fn = mse_loss(target)
    state = AdamState()
    current = bundle
    curve: list[float] = []
    best_bundle, best = bundle, np.inf
    for step in range(steps + 1):
        want = names if step < steps else []
        loss, grads, _ = render_loss_and_grads(current, w, pose, sampling, H, W, loss_fn, want)
        _check(loss, "tuning", step)
        curve.append(loss)
        if loss < best:
            best, best_bundle = loss, current
        if step < steps:
            updated = adam_step({k: current.params[k] for k in names}, grads, state, lr)
            current = current.with_params(updated)
    return best_bundle, curve


def invert(
    bundle: FieldBundle,
    target_image,
    pose: CameraPose,
    project_steps: int = 1000,
    tune_steps: int = 1000,
    sampling: SamplingConfig | None = None,
) -> InversionResult:
    w, proj = project_latent(bundle, target_image, pose, project_steps, sampling)
    tuned, tune = tune_generator(bundle, w, target_image, pose, tune_steps, sampling)
    return InversionResult(w, tuned, {"projection": proj, "tuning": tune})


def write_loss_curve(path, result: InversionResult) -> None:
    with Path(path).open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["phase", "step", "loss"])
        for phase in ("projection", "tuning"):
            for i, v in enumerate(result.loss_curve[phase]):
                out.writerow([phase, i, repr(v)])


# ---------------------------------------------------------------------------
# coefficient refinement


def project_points(points_field: np.ndarray, pose: CameraPose) -> np.ndarray:
    """Perspective projection to normalised image coordinates ``(x right, y up)`` in tan(fov/2) units."""
    right, up, forward = pose.frame()
    rel = np.asarray(points_field, np.float64) - pose.eye
    depth = rel @ forward
    half = np.tan(0.5 * pose.fov_y)
    return np.stack([(rel @ right) / depth, (rel @ up) / depth], axis=-1) / half


def landmark_projection(basis: BlendshapeBasis, coeffs: ShapeCoeffs, pose: CameraPose, transform: ScaleTransform):
    lm = extract_landmarks(basis, evaluate_shape(basis, coeffs))
    return project_points(transform.apply(lm), pose)


@dataclass(frozen=True)
class RefineResult:
    coeffs: ShapeCoeffs
    pose: CameraPose
    error: float
    errors: list[float]


def _residual(basis, x, pose, tf, target, k_id):
    c = ShapeCoeffs(x[:k_id], x[k_id:-2])
    p = replace(pose, yaw=float(x[-2]), pitch=float(x[-1]))
    return (landmark_projection(basis, c, p, tf) - target).reshape(-1)


def _jacobian(basis, x, pose, tf, target, k_id):
    # coefficient columns through the chain rule of the projection; pose columns by central differences
    c = ShapeCoeffs(x[:k_id], x[k_id:-2])
    p = replace(pose, yaw=float(x[-2]), pitch=float(x[-1]))
    idx = basis.landmark_indices
    lm = tf.apply(extract_landmarks(basis, evaluate_shape(basis, c)))
    dlm = np.concatenate([basis.id_basis[idx], basis.exp_basis[idx]], axis=2) * tf.scale  # (L, 3, K)
    right, up, forward = p.frame()
    rel = lm - p.eye
    depth = rel @ forward
    half = np.tan(0.5 * p.fov_y)
    xr, yu = rel @ right, rel @ up
    dd = np.einsum("c,lck->lk", forward, dlm)
    dx = (np.einsum("c,lck->lk", right, dlm) * depth[:, None] - xr[:, None] * dd) / (depth**2)[:, None] / half
    dy = (np.einsum("c,lck->lk", up, dlm) * depth[:, None] - yu[:, None] * dd) / (depth**2)[:, None] / half
    J = np.empty((2 * len(idx), len(x)))
    J[0::2, :-2] = dx
    J[1::2, :-2] = dy
    h = 1e-6
    for j in (len(x) - 2, len(x) - 1):
        e = np.zeros(len(x))
        e[j] = h
        J[:, j] = (_residual(basis, x + e, pose, tf, target, k_id) - _residual(basis, x - e, pose, tf, target, k_id)) / (2 * h)
    return J


def refine_coefficients(
    basis: BlendshapeBasis,
    initial: ShapeCoeffs,
    pose: CameraPose,
    target_landmarks,
    steps: int = 500,
    transform: ScaleTransform | None = None,
    tol: float = 0.0,
) -> RefineResult:
    """Damped Gauss-Newton on the squared 2D landmark error over ``(alpha, beta, yaw, pitch)``.

    Steps are accepted only when they lower the error, so the error sequence
    is non-increasing and the final iterate is the best one.
    """
    tf = transform or ScaleTransform.from_bbox(basis.bbox)
    target = np.asarray(target_landmarks, np.float64)
    k_id = basis.k_id
    x = np.concatenate([initial.alpha, initial.beta, [pose.yaw, pose.pitch]]).astype(np.float64)
    r = _residual(basis, x, pose, tf, target, k_id)
    err = float(r @ r)
    errors = [err]
    damping = 1e-3
    for step in range(steps):
        if err <= tol:
            break
        J = _jacobian(basis, x, pose, tf, target, k_id)
        g = J.T @ r
        A = J.T @ J
        improved = False
        for _ in range(20):
            delta = np.linalg.solve(A + damping * np.diag(np.diag(A) + 1e-12), -g)
            x_new = x + delta
            if abs(x_new[-1]) >= np.pi / 2:
                damping *= 10.0
                continue
            r_new = _residual(basis, x_new, pose, tf, target, k_id)
            err_new = float(r_new @ r_new)
            if not np.isfinite(err_new):
                raise FloatingPointError(f"coefficient refinement diverged at step {step}")
            if err_new < err:
                x, r, err = x_new, r_new, err_new
                damping = max(damping / 10.0, 1e-12)
                improved = True
                break
            damping *= 10.0
        errors.append(err)
        if not improved:
            break
    coeffs = ShapeCoeffs(x[:k_id], x[k_id:-2])
    return RefineResult(coeffs, replace(pose, yaw=float(x[-2]), pitch=float(x[-1])), err, errors)
