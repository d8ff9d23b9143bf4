"""End-to-end animation: config, prerequisites, the per-frame loop, reports and the mirrored-pose harness."""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .audio import (
    AudioClip,
    AudioRegressor,
    ExpressionConfig,
    load_wav,
    rms_envelope,
    track_from_audio,
    train_audio_regressor,
)
from .autodiff import load_tensors, save_tensors
from .blending import MaskHistory, blend, compose_final, project_mouth_mask
from .deformation import ScaleTransform, bind_mesh, build_displacement_field
from .face_model import (
    BlendshapeBasis,
    ShapeCoeffs,
    build_toy_basis,
    evaluate_shape,
    load_basis,
    save_basis,
    vertex_displacement,
)
from .field import FieldBundle, FieldConfig, init_bundle, load_bundle, map_latent, save_bundle
from .inversion import invert, landmark_projection, refine_coefficients, write_loss_curve
from .lipaint import (
    LatentProbe,
    LipaintConfig,
    LossWeights,
    ToyDiscriminator,
    fit_probe,
    infer_mouth_latent,
    train_lipaint,
    train_toy_discriminator,
)
from .metrics import PSNR_CAP, MetricReport, envelope_correlation, mean_abs_diff, mouth_opening, psnr
from .render import CameraPose, SamplingConfig, read_png, read_ppm, render_feature_map, render_image, write_png

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    def __init__(self, stage: str, frame: int | None, cause: BaseException):
        where = f"frame {frame}" if frame is not None else "setup"
        super().__init__(f"stage {stage!r} failed at {where}: {cause}")
        self.stage = stage
        self.frame = frame


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class PipelineConfig:
    # inputs
    audio: str = ""
    target_image: str = ""
    landmarks: str = ""
    pose_track: str = ""
    prepared: str = ""
    out_dir: str = "out"
    # identity and seeds
    identity_seed: int = 0
    field_seed: int = 0
    basis_seed: int = 0
    seed: int = 0
    symmetric: bool = False
    mirror_head: bool = False
    # video and rendering
    fps: float = 25.0
    feature_size: int = 64
    num_samples: int = 64
    t_near: float = 0.5
    t_far: float = 3.5
    yaw: float = 0.0
    pitch: float = 0.0
    workers: int = 1
    # audio to expression
    alpha_m: float = 0.5
    lambda_exp: float = 1.5
    audio_backend: str = "deterministic"
    # deformation and blending
    binding: str = "auto"
    mask_window: int = 7
    mask_feather: float = 1.5
    # preprocessing budgets
    invert_steps: int = 1000
    refine_steps: int = 500
    lipaint_steps: int = 2000
    # output
    frames: int = 0
    dump_masks: bool = False

    def __post_init__(self):
        for f in dataclasses.fields(self):
            _check_range(f.name, getattr(self, f.name))
        if not self.t_near < self.t_far:
            raise ConfigError(f"t_near ({self.t_near}) must be below t_far ({self.t_far})")

    @property
    def sampling(self) -> SamplingConfig:
        return SamplingConfig(self.num_samples, self.t_near, self.t_far)

    @property
    def pose(self) -> CameraPose:
        return CameraPose(self.yaw, self.pitch)

    @property
    def expression(self) -> ExpressionConfig:
        return ExpressionConfig(fps=self.fps, alpha_m=self.alpha_m, lambda_exp=self.lambda_exp, backend=self.audio_backend)

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)


_RANGES: dict[str, Callable[[object], bool]] = {
    "fps": lambda v: 0 < v <= 240,
    "feature_size": lambda v: 4 <= v <= 512,
    "num_samples": lambda v: 1 <= v <= 1024,
    "t_near": lambda v: v >= 0,
    "t_far": lambda v: v > 0,
    "yaw": lambda v: abs(v) <= np.pi,
    "pitch": lambda v: abs(v) < np.pi / 2,
    "workers": lambda v: 1 <= v <= 64,
    "alpha_m": lambda v: 0.0 <= v <= 1.0,
    "lambda_exp": lambda v: 0.0 < v <= 10.0,
    "audio_backend": lambda v: v in ("deterministic", "learned"),
    "binding": lambda v: v in ("auto", "optimal", "greedy"),
    "mask_window": lambda v: 1 <= v <= 1000,
    "mask_feather": lambda v: 0.0 <= v <= 64.0,
    "invert_steps": lambda v: v >= 0,
    "refine_steps": lambda v: v >= 0,
    "lipaint_steps": lambda v: v >= 0,
    "frames": lambda v: v >= 0,
    "identity_seed": lambda v: v >= 0,
    "field_seed": lambda v: v >= 0,
    "basis_seed": lambda v: v >= 0,
    "seed": lambda v: v >= 0,
}


def _check_range(name, value, line: int | None = None):
    ok = _RANGES.get(name)
    if isinstance(value, float) and not np.isfinite(value) or ok is not None and not ok(value):
        where = f" (line {line})" if line is not None else ""
        raise ConfigError(f"{name} = {value!r} is out of range{where}")


def _field_types() -> dict[str, type]:
    kinds = {"str": str, "int": int, "float": float, "bool": bool}
    return {f.name: kinds[f.type] for f in dataclasses.fields(PipelineConfig)}


def _parse_value(kind: type, text: str):
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"expected true/false, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def parse_config_text(text: str) -> PipelineConfig:
    """``key = value`` lines, ``#`` comments, unknown keys rejected, missing keys defaulted."""
    types = _field_types()
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            parsed = _parse_value(types[key], value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {key} expects {types[key].__name__}: {exc}") from None
        _check_range(key, parsed, lineno)
        values[key] = parsed
    return PipelineConfig(**values)


def parse_config(path) -> PipelineConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def serialize_config(config: PipelineConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        if isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, float):
            text = repr(v)
        else:
            text = str(v)
        if isinstance(v, str) and ("#" in v or v != v.strip()):
            raise ConfigError(f"{f.name} = {v!r} cannot be written in the key = value format")
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# prerequisites


@dataclass
class Prerequisites:
    bundle: FieldBundle
    basis: BlendshapeBasis
    probe: LatentProbe
    lipaint: dict[str, np.ndarray]
    regressor: AudioRegressor | None = None
    w_inv: np.ndarray | None = None
    discriminator: ToyDiscriminator | None = None


def field_config_for(config: PipelineConfig) -> FieldConfig:
    return FieldConfig(symmetric=config.symmetric)


def synthesize_prerequisites(config: PipelineConfig, *, gan: bool = False, disc_steps: int = 300) -> Prerequisites:
    """Build every learned piece from seeds.

    With ``gan=False`` the mouth network trains on the supervised terms only,
    which keeps a fresh ``animate`` run short.
    """
    bundle = init_bundle(config.field_seed, field_config_for(config), mirror_head=config.mirror_head)
    basis = build_toy_basis(config.basis_seed, symmetric=config.symmetric)
    probe = fit_probe(bundle, basis, seed=config.seed)
    disc = None
    weights = LossWeights()
    if gan:
        disc = train_toy_discriminator(bundle, probe, steps=disc_steps, seed=config.seed)
    else:
        weights = LossWeights(gan=0.0)
    lip = train_lipaint(bundle, basis, LipaintConfig(steps=config.lipaint_steps, weights=weights, seed=config.seed), probe=probe, disc=disc)
    regressor = train_audio_regressor(config.seed) if config.audio_backend == "learned" else None
    return Prerequisites(bundle, basis, probe, lip.params, regressor, None, disc)


def save_prerequisites(prereq: Prerequisites, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_bundle(prereq.bundle, d / "bundle.nfsp")
    save_basis(prereq.basis, d / "basis.nfsb")
    save_tensors(
        d / "probe.nfsp",
        {"matrix": prereq.probe.matrix, "bias": prereq.probe.bias, "k_id": np.array([prereq.probe.k_id], float)},
    )
    save_tensors(d / "lipaint.nfsp", prereq.lipaint)
    if prereq.regressor is not None:
        save_tensors(d / "regressor.nfsp", {**prereq.regressor.params, "beta_max": np.array([prereq.regressor.beta_max])})
    if prereq.discriminator is not None:
        save_tensors(d / "discriminator.nfsp", prereq.discriminator.params)
    if prereq.w_inv is not None:
        save_tensors(d / "identity.nfsp", {"w_inv": prereq.w_inv})


def load_prerequisites(directory) -> Prerequisites:
    d = Path(directory)
    missing = [n for n in ("bundle.nfsp", "basis.nfsb", "probe.nfsp", "lipaint.nfsp") if not (d / n).exists()]
    if missing:
        raise FileNotFoundError(f"{d}: missing prerequisite files {missing}")
    pt = load_tensors(d / "probe.nfsp")
    probe = LatentProbe(pt["matrix"], pt["bias"], int(pt["k_id"][0]))
    regressor = None
    if (d / "regressor.nfsp").exists():
        rt = load_tensors(d / "regressor.nfsp")
        beta_max = float(rt.pop("beta_max")[0])
        regressor = AudioRegressor(rt, beta_max)
    disc = ToyDiscriminator(load_tensors(d / "discriminator.nfsp")) if (d / "discriminator.nfsp").exists() else None
    w_inv = load_tensors(d / "identity.nfsp")["w_inv"] if (d / "identity.nfsp").exists() else None
    return Prerequisites(
        load_bundle(d / "bundle.nfsp"), load_basis(d / "basis.nfsb"), probe, load_tensors(d / "lipaint.nfsp"), regressor, w_inv, disc
    )


def read_image(path) -> np.ndarray:
    p = Path(path)
    raw = read_ppm(p) if p.suffix.lower() in (".ppm", ".pnm") else read_png(p)
    return raw.astype(np.float64) / 255.0


def prepare(config: PipelineConfig, directory, *, gan: bool = True, disc_steps: int = 300) -> Prerequisites:
    """Train the toy networks, invert the target image if one is given, and store everything."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    prereq = synthesize_prerequisites(config, gan=gan, disc_steps=disc_steps)
    if config.target_image:
        target = read_image(config.target_image)
        res = invert(prereq.bundle, target, config.pose, config.invert_steps, config.invert_steps, config.sampling)
        prereq.bundle = res.tuned_bundle
        prereq.w_inv = res.w_inv
        write_loss_curve(d / "inversion_loss.csv", res)
    save_prerequisites(prereq, d)
    return prereq


# ---------------------------------------------------------------------------
# identity set-up


@dataclass(frozen=True)
class Identity:
    w_inv: np.ndarray
    bundle: FieldBundle
    coeffs: ShapeCoeffs
    pose: CameraPose
    refine_error: float


def golden_latent(bundle: FieldBundle, seed: int) -> np.ndarray:
    z = np.random.default_rng(seed).standard_normal(bundle.config.z_dim)
    return map_latent(bundle, z)


def setup_identity(config: PipelineConfig, prereq: Prerequisites) -> Identity:
    bundle = prereq.bundle
    if prereq.w_inv is not None:
        w_inv = prereq.w_inv
    elif config.target_image:
        target = read_image(config.target_image)
        res = invert(bundle, target, config.pose, config.invert_steps, config.invert_steps, config.sampling)
        w_inv, bundle = res.w_inv, res.tuned_bundle
    else:
        w_inv = golden_latent(bundle, config.identity_seed)
    coeffs0 = prereq.probe.coeffs(w_inv)
    pose0 = config.pose
    tf = ScaleTransform.from_bbox(prereq.basis.bbox)
    if config.landmarks:
        target_lm = np.loadtxt(config.landmarks, dtype=np.float64, ndmin=2)
    else:
        # without an external detector the probe reading is its own target
        target_lm = landmark_projection(prereq.basis, coeffs0, pose0, tf)
    ref = refine_coefficients(prereq.basis, coeffs0, pose0, target_lm, config.refine_steps, tf)
    return Identity(w_inv, bundle, ref.coeffs, ref.pose, ref.error)


def read_pose_track(path, count: int) -> list[tuple[float, float]]:
    data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if data.shape[1] != 2:
        raise ValueError(f"pose track needs 'yaw pitch' rows, got {data.shape[1]} columns")
    if len(data) < count:
        raise ValueError(f"pose track has {len(data)} rows for {count} frames")
    return [(float(a), float(b)) for a, b in data[:count]]


# ---------------------------------------------------------------------------
# the frame loop


@dataclass
class RunReport:
    rows: list[dict]
    summary: dict
    timings: list[float] = field(default_factory=list)
    frames: list[np.ndarray] = field(default_factory=list)  # emitted uint8 frames

    def metric(self, name: str) -> MetricReport:
        return MetricReport.of(name, [r[name] for r in self.rows])


REPORT_COLUMNS = ("frame", "yaw", "pitch", "jaw", "mouth_opening", "rms", "mask_mean", "psnr_static")


@contextlib.contextmanager
def _stage(name: str, frame: int | None = None):
    try:
        yield
    except PipelineError:
        raise
    except Exception as exc:
        raise PipelineError(name, frame, exc) from exc


def _atomic_png(path: Path, image) -> None:
    tmp = path.with_name(f".tmp-{os.getpid()}-{path.name}")
    try:
        write_png(tmp, image)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(f".tmp-{os.getpid()}-{path.name}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _frame_to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def run_pipeline(
    config: PipelineConfig,
    prereq: Prerequisites | None = None,
    *,
    audio: AudioClip | None = None,
    keep_frames: bool = False,
    write: bool = True,
) -> RunReport:
    """Animate the identity with the audio and write ``frame_%05d.png`` plus reports into ``config.out_dir``."""
    out = Path(config.out_dir)
    with _stage("setup"):
        if audio is None:
            if not config.audio:
                raise ValueError("no audio path configured")
            audio = load_wav(config.audio)
        if write:
            out.mkdir(parents=True, exist_ok=True)
            if config.dump_masks:
                (out / "masks").mkdir(exist_ok=True)
    with _stage("prerequisites"):
        if prereq is None:
            prereq = load_prerequisites(config.prepared) if config.prepared else synthesize_prerequisites(config)
    with _stage("identity"):
        ident = setup_identity(config, prereq)
    basis = prereq.basis
    bundle = ident.bundle
    with _stage("audio"):
        track = track_from_audio(
            audio, ident.coeffs.beta, config.expression, regressor=prereq.regressor, k_exp=basis.k_exp
        )
        rms = rms_envelope(audio, config.fps, config.expression.window_frames * config.expression.mel.hop_seconds)
    n_frames = track.num_frames if config.frames == 0 else min(config.frames, track.num_frames)
    with _stage("pose"):
        if config.pose_track:
            poses = read_pose_track(config.pose_track, n_frames)
        else:
            poses = [(ident.pose.yaw, ident.pose.pitch)] * n_frames
    with _stage("binding"):
        v_init = evaluate_shape(basis, ident.coeffs)
        binding = bind_mesh(v_init, basis.bbox, method=config.binding)
        tf = binding.transform

    H = W = config.feature_size
    sampling = config.sampling
    history = MaskHistory(config.mask_window)
    static_cache: dict[tuple[float, float], np.ndarray] = {}
    rows: list[dict] = []
    timings: list[float] = []
    frames: list[np.ndarray] = []
    for t in range(n_frames):
        start = time.perf_counter()
        yaw, pitch = poses[t]
        pose = CameraPose(yaw, pitch, ident.pose.radius, ident.pose.fov_y)
        beta_t = track.betas[t]
        with _stage("deformation", t):
            v_audio = evaluate_shape(basis, ShapeCoeffs(ident.coeffs.alpha, beta_t))
            disp = build_displacement_field(binding, vertex_displacement(v_init, v_audio))
        with _stage("render", t):
            phi_d = render_feature_map(bundle, ident.w_inv, pose, sampling, H, W, disp, workers=config.workers)
        with _stage("mask", t):
            raw_mask = project_mouth_mask(tf.apply(v_audio[basis.mouth_indices]), pose, H, W, config.mask_feather)
            mask = history.step(raw_mask)
        with _stage("lipaint", t):
            w_exp = np.reshape(infer_mouth_latent(prereq.lipaint, beta_t, ident.w_inv), -1)
        with _stage("mouth render", t):
            phi_e = render_feature_map(bundle, w_exp, pose, sampling, H, W, pixel_mask=mask > 0, workers=config.workers)
        with _stage("blend", t):
            image = compose_final(bundle, blend(phi_d, phi_e, mask), ident.w_inv)
        frame = _frame_to_uint8(image)
        with _stage("write", t):
            if write:
                _atomic_png(out / f"frame_{t:05d}.png", frame)
                if config.dump_masks:
                    tmp = out / "masks" / f".tmp-mask_{t:05d}.png"
                    Image.fromarray(_frame_to_uint8(mask), mode="L").save(tmp, format="PNG")
                    os.replace(tmp, out / "masks" / f"mask_{t:05d}.png")
        with _stage("metrics", t):
            key = (yaw, pitch)
            if key not in static_cache:
                static_cache[key] = render_image(bundle, ident.w_inv, pose, sampling, H, W, workers=config.workers)
            rows.append(
                {
                    "frame": t,
                    "yaw": yaw,
                    "pitch": pitch,
                    "jaw": float(beta_t[config.expression.jaw_index]),
                    "mouth_opening": mouth_opening(beta_t, basis),
                    "rms": float(rms[t]),
                    "mask_mean": float(mask.mean()),
                    "psnr_static": psnr(frame / 255.0, static_cache[key]),
                }
            )
        if keep_frames:
            frames.append(frame)
        timings.append(time.perf_counter() - start)
        log.info("frame %d/%d in %.2fs", t + 1, n_frames, timings[-1])

    summary = _summarize(config, rows, ident, n_frames)
    report = RunReport(rows, summary, timings, frames)
    if write:
        write_reports(report, out)
    return report


def _summarize(config: PipelineConfig, rows: list[dict], ident: Identity, n_frames: int) -> dict:
    opening = np.array([r["mouth_opening"] for r in rows])
    rms = np.array([r["rms"] for r in rows])
    try:
        corr = envelope_correlation(opening, rms)
    except ValueError:
        corr = None
    metrics = {}
    for name in ("jaw", "mouth_opening", "rms", "mask_mean", "psnr_static"):
        if rows:
            metrics[name] = MetricReport.of(name, [r[name] for r in rows]).summary()
    return {
        "frames": n_frames,
        "fps": config.fps,
        "resolution": config.feature_size * ident.bundle.config.upsample_scale,
        "envelope_correlation": corr,
        "refine_error": ident.refine_error,
        "metrics": metrics,
        "config": serialize_config(config),
    }


def write_reports(report: RunReport, out) -> None:
    """``report.csv`` and ``report.json`` hold only deterministic content; wall-clock goes to ``timings.csv``."""
    out = Path(out)
    lines = [",".join(REPORT_COLUMNS)]
    for r in report.rows:
        lines.append(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in REPORT_COLUMNS))
    _atomic_text(out / "report.csv", "\n".join(lines) + "\n")
    _atomic_text(out / "report.json", json.dumps({"summary": report.summary, "rows": report.rows}, indent=2, sort_keys=True) + "\n")
    with (out / "timings.csv").open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "seconds"])
        for i, s in enumerate(report.timings):
            wr.writerow([i, f"{s:.4f}"])


# ---------------------------------------------------------------------------
# mirrored-pose harness


def flip_pose(pose: CameraPose) -> CameraPose:
    return dataclasses.replace(pose, yaw=-pose.yaw)


def internal_difference(frames_a, frames_b, mirror_b: bool = True) -> dict:
    """Mean and worst PSNR / mean absolute difference between two frame sequences (values in [0, 1] or uint8)."""
    if len(frames_a) != len(frames_b):
        raise ValueError(f"sequence lengths differ: {len(frames_a)} vs {len(frames_b)}")
    if not len(frames_a):
        raise ValueError("empty frame sequences")
    ps, mads = [], []
    for a, b in zip(frames_a, frames_b):
        a = _as_float(a)
        b = _as_float(b)
        if mirror_b:
            b = b[:, ::-1]
        ps.append(psnr(a, b))
        mads.append(mean_abs_diff(a, b))
    worst = int(np.argmax(mads))
    return {
        "psnr_mean": float(np.mean(ps)),
        "psnr_min": float(min(ps)),
        "mad_mean": float(np.mean(mads)),
        "mad_max": float(mads[worst]),
        "worst_frame": worst,
        "psnr_cap": PSNR_CAP,
    }


def _as_float(img) -> np.ndarray:
    img = np.asarray(img)
    return img.astype(np.float64) / 255.0 if img.dtype == np.uint8 else img.astype(np.float64)


def run_internal_difference(
    config: PipelineConfig,
    prereq: Prerequisites | None = None,
    *,
    audio: AudioClip | None = None,
    write: bool = True,
) -> dict:
    """Animate at the configured pose and at its mirror, and compare against the static scene at both poses."""
    if prereq is None:
        prereq = load_prerequisites(config.prepared) if config.prepared else synthesize_prerequisites(config)
    out = Path(config.out_dir)
    pose_a = config.pose
    pose_b = flip_pose(pose_a)
    cfg_a = config.replace(out_dir=str(out / "pose_a"))
    cfg_b = config.replace(out_dir=str(out / "pose_b"), yaw=pose_b.yaw)
    rep_a = run_pipeline(cfg_a, prereq, audio=audio, keep_frames=True, write=write)
    rep_b = run_pipeline(cfg_b, prereq, audio=audio, keep_frames=True, write=write)
    ident = setup_identity(config, prereq)
    H = W = config.feature_size
    static_a = _frame_to_uint8(render_image(ident.bundle, ident.w_inv, pose_a, config.sampling, H, W, workers=config.workers))
    static_b = _frame_to_uint8(render_image(ident.bundle, ident.w_inv, pose_b, config.sampling, H, W, workers=config.workers))
    deformed = internal_difference(rep_a.frames, rep_b.frames, mirror_b=True)
    static = internal_difference([static_a], [static_b], mirror_b=True)
    ratio = deformed["mad_mean"] / static["mad_mean"] if static["mad_mean"] > 0 else None
    result = {
        "yaw": pose_a.yaw,
        "deformed": deformed,
        "static": static,
        "mad_ratio": ratio,
        "metric_note": "pixel PSNR / mean absolute difference between mirrored-pose outputs",
    }
    if write:
        out.mkdir(parents=True, exist_ok=True)
        _atomic_text(out / "iddiff.json", json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result
