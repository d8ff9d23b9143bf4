"""Audio ingestion, log-mel features and the audio-to-expression mapping."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .autodiff import AdamState, Graph, adam_step


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or len(s) == 0:
            raise ValueError("audio clip must be a non-empty mono sequence")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", s)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


class WavError(ValueError):
    pass


# ---------------------------------------------------------------------------
# RIFF / WAVE io


def load_wav(path) -> AudioClip:
    """Read a PCM16 or float32 WAV file; stereo is averaged to mono."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError(f"{path}: malformed RIFF header (chunk id {data[:4]!r})")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavError(f"{path}: chunk {cid!r} truncated ({len(body)} of {size} bytes)")
        if cid == b"fmt ":
            if size < 16:
                raise WavError(f"{path}: chunk {cid!r} too short for a format header")
            tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", body)
            if tag == 0xFFFE and size >= 26:
                (tag,) = struct.unpack_from("<H", body, 24)  # sub-format GUID prefix
            fmt = (tag, channels, rate, bits)
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavError(f"{path}: missing chunk b'fmt '")
    if payload is None:
        raise WavError(f"{path}: missing chunk b'data'")
    tag, channels, rate, bits = fmt
    if tag == 1 and bits == 16:
        x = np.frombuffer(payload[: len(payload) // 2 * 2], dtype="<i2").astype(np.float64) / 32768.0
    elif tag == 3 and bits == 32:
        x = np.frombuffer(payload[: len(payload) // 4 * 4], dtype="<f4").astype(np.float64)
    else:
        raise WavError(f"{path}: chunk b'fmt ' declares unsupported codec (format {tag}, {bits} bits)")
    if channels < 1:
        raise WavError(f"{path}: chunk b'fmt ' declares {channels} channels")
    x = x[: len(x) // channels * channels].reshape(-1, channels).mean(axis=1)
    return AudioClip(x, rate)


def write_wav(path, clip_or_samples, sample_rate: int | None = None, *, float32: bool = False, channels=None) -> None:
    """Write mono (or ``(n, channels)``) audio as PCM16 or float32."""
    if isinstance(clip_or_samples, AudioClip):
        x, rate = clip_or_samples.samples, clip_or_samples.sample_rate
    else:
        x, rate = np.asarray(clip_or_samples, np.float64), int(sample_rate)
    x = x.reshape(len(x), -1)
    nch = x.shape[1]
    if float32:
        raw = x.astype("<f4").tobytes()
        tag, bits = 3, 32
    else:
        raw = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = 1, 16
    block = nch * bits // 8
    fmt = struct.pack("<HHIIHH", tag, nch, rate, rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(raw)) + raw
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Polyphase windowed-sinc resampling."""
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    g = gcd(int(target_rate), int(clip.sample_rate))
    up, down = int(target_rate) // g, int(clip.sample_rate) // g
    return AudioClip(resample_poly(clip.samples, up, down), int(target_rate))


# ---------------------------------------------------------------------------
# mel spectrogram


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 16000
    n_fft: int = 800
    hop: int = 200
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-5

    @property
    def hop_seconds(self) -> float:
        return self.hop / self.sample_rate

    @property
    def window_seconds(self) -> float:
        return self.n_fft / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray  # (T_a, D) log mel power
    hop_seconds: float
    window_seconds: float


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, np.float64) / 2595.0) - 1.0)


def mel_edges(config: MelConfig) -> np.ndarray:
    """``n_mels + 2`` band edges in Hz; band ``i`` peaks at ``edges[i + 1]``."""
    return mel_to_hz(np.linspace(hz_to_mel(config.f_min), hz_to_mel(config.f_max), config.n_mels + 2))


def mel_filterbank(config: MelConfig) -> np.ndarray:
    """``(n_mels, n_fft // 2 + 1)`` triangular filters with unit peak."""
    edges = mel_edges(config)
    freqs = np.arange(config.n_fft // 2 + 1) * config.sample_rate / config.n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def mel_spectrogram(clip: AudioClip, config: MelConfig | None = None) -> MelSpectrogram:
    config = config or MelConfig()
    if clip.sample_rate != config.sample_rate:
        raise ValueError(f"expected {config.sample_rate} Hz audio, got {clip.sample_rate} Hz; resample first")
    x = clip.samples
    if len(x) < config.n_fft:
        raise ValueError(f"clip of {len(x)} samples is shorter than one {config.n_fft}-sample window")
    half = config.n_fft // 2
    padded = np.pad(x, half, mode="reflect")
    n_frames = 1 + len(x) // config.hop
    starts = np.arange(n_frames) * config.hop
    frames = padded[starts[:, None] + np.arange(config.n_fft)[None, :]]
    window = np.hanning(config.n_fft + 1)[:-1]  # periodic Hann
    power = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    mel = power @ mel_filterbank(config).T
    return MelSpectrogram(np.log(np.maximum(mel, config.log_floor)), config.hop_seconds, config.window_seconds)


# ---------------------------------------------------------------------------
# audio -> expression


@dataclass(frozen=True)
class ExpressionConfig:
    fps: float = 25.0
    window_frames: int = 16
    alpha_m: float = 0.5
    lambda_exp: float = 1.5
    beta_max: float = 1.0
    jaw_index: int = 0
    backend: str = "deterministic"
    mel: MelConfig = field(default_factory=MelConfig)


def window_energy(mel_window: np.ndarray) -> float:
    """Log of the RMS mel power over a window (equals the log floor for silence)."""
    power = np.exp(np.asarray(mel_window, np.float64))
    return float(0.5 * np.log(np.mean(power * power)))


def energy_to_jaw(energy: float, log_floor: float = 1e-5, beta_max: float = 1.0) -> float:
    """Affine map of ``[log(floor), 0]`` onto ``[0, beta_max]``, clamped."""
    lo = np.log(log_floor)
    return float(np.clip((energy - lo) / (0.0 - lo), 0.0, 1.0) * beta_max)


@dataclass
class AudioRegressor:
    """Tiny MLP from a window's per-band mean log-mel to the jaw coefficient."""

    params: dict[str, np.ndarray]
    beta_max: float = 1.0

    @staticmethod
    def features(mel_window: np.ndarray, log_floor: float = 1e-5) -> np.ndarray:
        # per-band mean, shifted so that silence maps to 0 and 0 dB-ish to ~1
        lo = np.log(log_floor)
        return (np.mean(mel_window, axis=0) - lo) / (-lo)

    def predict(self, feats: np.ndarray) -> np.ndarray:
        g, out = _regressor_graph(self.params, feats.shape[0], feats.shape[1])
        return g.forward({**self.params, "x": feats})[out][:, 0] * self.beta_max


def _regressor_graph(params, n, d):
    g = Graph()
    x = g.input("x", (n, d))
    p = {k: g.param(k, v.shape) for k, v in params.items()}
    h = g.leaky_relu(x @ p["W0"] + g.broadcast(p["b0"], (n, p["W0"].shape[1])), 0.2)
    return g, g.sigmoid(h @ p["W1"] + g.broadcast(p["b1"], (n, 1)))


def train_audio_regressor(
    seed: int = 0,
    steps: int = 400,
    hidden: int = 16,
    lr: float = 1e-2,
    config: ExpressionConfig | None = None,
) -> AudioRegressor:
    """Distil the deterministic energy mapping into the regressor on synthetic noise windows."""
    config = config or ExpressionConfig()
    mel_cfg = config.mel
    rng = np.random.default_rng(seed)
    n_win = 256
    # synthetic coloured-noise bursts at random levels
    wins = []
    for _ in range(n_win):
        amp = 10.0 ** rng.uniform(-4.0, 0.0)
        n = mel_cfg.n_fft + mel_cfg.hop * (config.window_frames - 1)
        x = rng.standard_normal(n) * amp
        if rng.random() < 0.5:
            x = np.cumsum(x) * 0.1
        wins.append(mel_spectrogram(AudioClip(x, mel_cfg.sample_rate), mel_cfg).frames[: config.window_frames])
    X = np.stack([AudioRegressor.features(w, mel_cfg.log_floor) for w in wins])
    y = np.array([energy_to_jaw(window_energy(w), mel_cfg.log_floor, 1.0) for w in wins])[:, None]
    d = X.shape[1]
    params = {
        "W0": rng.uniform(-1, 1, (d, hidden)) / np.sqrt(d),
        "b0": np.zeros((1, hidden)),
        "W1": rng.uniform(-1, 1, (hidden, 1)) / np.sqrt(hidden),
        "b1": np.zeros((1, 1)),
    }
    g, out = _regressor_graph(params, n_win, d)
    loss = g.mean(g.square(out - g.const(y)))
    state = AdamState()
    for _ in range(steps):
        ev = g.forward({**params, "x": X})
        params = adam_step(params, g.backward(ev, loss), state, lr)
    return AudioRegressor(params, config.beta_max)


def audio_to_expression(
    mel_window: np.ndarray,
    beta_basis: np.ndarray,
    backend: str = "deterministic",
    *,
    regressor: AudioRegressor | None = None,
    config: ExpressionConfig | None = None,
) -> np.ndarray:
    """Expression vector for one mel window; only the jaw coefficient depends on audio."""
    config = config or ExpressionConfig()
    beta = np.array(beta_basis, dtype=np.float64)
    if mel_window.shape[0] != config.window_frames:
        raise ValueError(f"expected a {config.window_frames}-frame mel window, got {mel_window.shape[0]}")
    if backend == "deterministic":
        jaw = energy_to_jaw(window_energy(mel_window), config.mel.log_floor, config.beta_max)
    elif backend == "learned":
        if regressor is None:
            raise ValueError("learned backend requires trained regressor weights")
        feats = AudioRegressor.features(mel_window, config.mel.log_floor)[None, :]
        jaw = float(regressor.predict(feats)[0])
    else:
        raise ValueError(f"unknown audio backend {backend!r}")
    beta[config.jaw_index] = jaw
    return beta


def momentum_blend(beta_init, beta_prev_audio, alpha_m: float) -> np.ndarray:
    if not 0.0 <= alpha_m <= 1.0:
        raise ValueError(f"alpha_m must lie in [0, 1], got {alpha_m}")
    beta_init = np.asarray(beta_init, np.float64)
    beta_prev_audio = np.asarray(beta_prev_audio, np.float64)
    if alpha_m == 0.0:
        return beta_init.copy()
    if alpha_m == 1.0:
        return beta_prev_audio.copy()
    return (1.0 - alpha_m) * beta_init + alpha_m * beta_prev_audio


def scale_expression(beta_audio, lambda_exp: float) -> np.ndarray:
    if not lambda_exp > 0:
        raise ValueError(f"lambda_exp must be positive, got {lambda_exp}")
    return np.asarray(beta_audio, np.float64) * lambda_exp


def mel_window_at(mel: MelSpectrogram, t_seconds: float, width: int) -> np.ndarray:
    """``width`` frames centred on ``t_seconds``; indices past either end are clamped."""
    centre = int(round(t_seconds / mel.hop_seconds))
    idx = np.clip(np.arange(centre - width // 2, centre - width // 2 + width), 0, len(mel.frames) - 1)
    return mel.frames[idx]


@dataclass(frozen=True)
class ExpressionTrack:
    betas: np.ndarray  # (T_f, K_exp), scaled
    fps: float
    backend: str
    raw_betas: np.ndarray | None = None  # unscaled network outputs

    @property
    def num_frames(self) -> int:
        return len(self.betas)


def num_video_frames(duration: float, fps: float) -> int:
    # guard against 7.999999 * 25 style rounding
    return int(np.floor(duration * fps + 1e-9))


def track_from_audio(
    clip: AudioClip,
    beta_init,
    config: ExpressionConfig | None = None,
    *,
    regressor: AudioRegressor | None = None,
    k_exp: int | None = None,
) -> ExpressionTrack:
    """Per-frame expression coefficients.

    Frame ``t``: blend ``beta_init`` with the previous unscaled output, map
    the mel window centred at ``t / fps``, then scale by ``lambda_exp``.
    """
    config = config or ExpressionConfig()
    beta_init = np.asarray(beta_init, np.float64)
    if k_exp is not None and len(beta_init) != k_exp:
        raise ValueError(f"beta_init has {len(beta_init)} coefficients, face model has {k_exp}")
    if clip.sample_rate != config.mel.sample_rate:
        clip = resample(clip, config.mel.sample_rate)
    n = num_video_frames(clip.duration, config.fps)
    if n < 1:
        raise ValueError(f"clip of {clip.duration:.4f} s is shorter than one video frame")
    mel = mel_spectrogram(clip, config.mel)
    raw = np.empty((n, len(beta_init)))
    prev = beta_init
    for t in range(n):
        beta_in = momentum_blend(beta_init, prev, config.alpha_m)
        win = mel_window_at(mel, t / config.fps, config.window_frames)
        prev = audio_to_expression(win, beta_in, config.backend, regressor=regressor, config=config)
        raw[t] = prev
    return ExpressionTrack(scale_expression(raw, config.lambda_exp), config.fps, config.backend, raw)


def rms_envelope(clip: AudioClip, fps: float, window_seconds: float) -> np.ndarray:
    """Frame-aligned RMS amplitude, each window centred at ``t / fps``."""
    n = num_video_frames(clip.duration, fps)
    half = int(round(window_seconds * clip.sample_rate / 2))
    out = np.empty(n)
    for t in range(n):
        c = int(round(t / fps * clip.sample_rate))
        seg = clip.samples[max(0, c - half) : c + half]
        out[t] = np.sqrt(np.mean(seg * seg))
    return out
