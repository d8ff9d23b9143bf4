"""Procedural linear blendshape face model.

The template is a frontal face patch: points of a disk in parameter space
``(u, v)`` lifted onto an ellipsoid cap. Identity parameters deform the
cranium/nose/jaw geometry, expression parameters open the jaw around a hinge
and move the lip ring, brows and cheeks. Identity shapes are run through a
centred PCA, expression displacements through an uncentred one (the zero
expression is the closed, neutral face), giving

    S = mean_shape + id_basis @ alpha + exp_basis @ beta

with orthonormal basis columns. Model units: the mean face lies inside the
unit sphere centred at the origin; +z points out of the face, +y up.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MOUTH_V = -0.42  # mouth line in template parameter space
MOUTH_HALF_WIDTH = 0.22
LIP_OFFSET = 0.03
DISK_RADIUS = 0.95
_HINGE = np.array([0.0, -0.05, -0.25])
_GOLDEN = (3.0 - np.sqrt(5.0)) * np.pi


class RankError(ValueError):
    pass


@dataclass(frozen=True)
class BlendshapeBasis:
    mean_shape: np.ndarray  # (V, 3)
    id_basis: np.ndarray  # (V, 3, K_id)
    exp_basis: np.ndarray  # (V, 3, K_exp)
    landmark_indices: np.ndarray  # (L,), first two are the upper/lower lip centres
    mouth_indices: np.ndarray  # (M,)

    @property
    def num_vertices(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def k_id(self) -> int:
        return self.id_basis.shape[2]

    @property
    def k_exp(self) -> int:
        return self.exp_basis.shape[2]

    @property
    def bbox(self) -> np.ndarray:
        """(2, 3) array of min and max corners of ``mean_shape``."""
        return np.stack([self.mean_shape.min(axis=0), self.mean_shape.max(axis=0)])

    @property
    def lip_pair(self) -> tuple[int, int]:
        return int(self.landmark_indices[0]), int(self.landmark_indices[1])


@dataclass(frozen=True)
class ShapeCoeffs:
    alpha: np.ndarray
    beta: np.ndarray

    @classmethod
    def zeros(cls, basis: BlendshapeBasis) -> "ShapeCoeffs":
        return cls(np.zeros(basis.k_id), np.zeros(basis.k_exp))


# ---------------------------------------------------------------------------
# template and parametric family


def _template_uv(num_vertices: int) -> np.ndarray:
    """Left-right symmetric point layout on the parameter disk.

    A column of points on u = 0 (including both lip centres) plus a Vogel
    spiral on the right half-disk and its mirror image.
    """
    ks = np.arange(-40, 41)
    centre = MOUTH_V + LIP_OFFSET + 0.06 * ks
    centre = centre[np.abs(centre) <= DISK_RADIUS * 0.97]
    # the lower lip centre sits at MOUTH_V - LIP_OFFSET (k = -1)
    if (num_vertices - len(centre)) % 2:
        centre = centre[:-1]
    m = (num_vertices - len(centre)) // 2
    if m < 1:
        raise ValueError(f"num_vertices={num_vertices} too small for the template")
    i = np.arange(m)
    r = DISK_RADIUS * np.sqrt((i + 0.5) / m)
    theta = np.mod(i * _GOLDEN, 2 * np.pi) / 2.0 - np.pi / 2.0
    margin = 0.015
    u = margin + r * np.cos(theta) * (DISK_RADIUS - margin) / DISK_RADIUS
    v = r * np.sin(theta)
    right = np.stack([u, v], axis=1)
    left = right * np.array([-1.0, 1.0])
    mid = np.stack([np.zeros_like(centre), centre], axis=1)
    return np.concatenate([mid, right, left])


def _gauss(uv, cu, cv, su, sv):
    return np.exp(-0.5 * (((uv[:, 0] - cu) / su) ** 2 + ((uv[:, 1] - cv) / sv) ** 2))


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


# identity parameters: (name, default, std)
_ID_PARAMS = [
    ("width", 0.78, 0.04),
    ("height", 0.95, 0.03),
    ("depth", 0.80, 0.04),
    ("nose", 0.10, 0.03),
    ("nose_length", 0.0, 0.02),
    ("chin", 0.0, 0.03),
    ("jaw_width", 0.0, 0.05),
    ("brow_ridge", 0.0, 0.02),
    ("cheeks", 0.0, 0.03),
    ("eye_depth", 0.0, 0.02),
    ("lip_thickness", 0.0, 0.01),
    ("mouth_width", 0.0, 0.03),
    ("forehead", 0.0, 0.03),
]

# expression parameters: (name, std); jaw is sampled separately
_EXP_PARAMS = [
    ("pucker", 0.03),
    ("smile", 0.03),
    ("spread", 0.02),
    ("brow_raise", 0.025),
    ("cheek_puff", 0.02),
    ("upper_lip", 0.015),
]
_JAW_MAX = 0.35
_SMIRK_STD = 0.015


def _identity_shape(uv: np.ndarray, p: dict) -> np.ndarray:
    u, v = uv[:, 0], uv[:, 1]
    n = np.stack([u, v, np.sqrt(np.clip(1.0 - u * u - v * v, 0.0, None))], axis=1)
    pts = n * np.array([p["width"], p["height"], p["depth"]])
    lower = _smoothstep((-0.3 - v) / 0.4)
    pts[:, 0] *= 1.0 + p["jaw_width"] * lower
    mouth = _gauss(uv, 0.0, MOUTH_V, 0.25, 0.12)
    pts[:, 0] += p["mouth_width"] * u * mouth
    dz = (
        p["nose"] * _gauss(uv, 0.0, 0.02, 0.08, 0.12)
        + p["nose_length"] * _gauss(uv, 0.0, -0.08, 0.06, 0.2)
        + p["chin"] * _gauss(uv, 0.0, -0.8, 0.15, 0.12)
        + p["brow_ridge"] * _gauss(uv, 0.0, 0.35, 0.4, 0.06)
        + p["eye_depth"] * -(_gauss(uv, 0.3, 0.2, 0.08, 0.06) + _gauss(uv, -0.3, 0.2, 0.08, 0.06))
        + p["lip_thickness"] * _gauss(uv, 0.0, MOUTH_V, 0.2, 0.05)
        + p["forehead"] * _gauss(uv, 0.0, 0.7, 0.25, 0.2)
    )
    pts += dz[:, None] * n
    cheeks = _gauss(uv, 0.45, -0.2, 0.15, 0.15) + _gauss(uv, -0.45, -0.2, 0.15, 0.15)
    pts += (p["cheeks"] * cheeks)[:, None] * n
    return pts


def _apply_expression(uv: np.ndarray, neutral: np.ndarray, e: dict) -> np.ndarray:
    u, v = uv[:, 0], uv[:, 1]
    pts = neutral.copy()
    ring = _gauss(uv, 0.0, MOUTH_V, 0.2, 0.06)
    pts[:, 2] += e["pucker"] * ring
    pts[:, 0] -= 0.5 * e["pucker"] * ring * u / 0.2
    for side in (1.0, -1.0):
        corner = _gauss(uv, side * MOUTH_HALF_WIDTH, MOUTH_V, 0.08, 0.06)
        pts[:, 0] += side * 0.5 * e["smile"] * corner
        pts[:, 1] += e["smile"] * corner
        if side > 0:
            pts[:, 1] += e.get("smirk", 0.0) * corner
    pts[:, 0] += e["spread"] * u * ring / 0.2
    brows = _gauss(uv, 0.3, 0.38, 0.15, 0.06) + _gauss(uv, -0.3, 0.38, 0.15, 0.06)
    pts[:, 1] += e["brow_raise"] * brows
    cheeks = _gauss(uv, 0.4, -0.3, 0.12, 0.12) + _gauss(uv, -0.4, -0.3, 0.12, 0.12)
    pts[:, 2] += e["cheek_puff"] * cheeks
    pts[:, 1] += e["upper_lip"] * _gauss(uv, 0.0, MOUTH_V + 0.04, 0.15, 0.03)
    # jaw: rotate the lower face about a horizontal hinge behind the face
    theta = e["jaw"] * _smoothstep((MOUTH_V + 0.015 - v) / 0.045)
    rel = pts - _HINGE
    c, s = np.cos(theta), np.sin(theta)
    y = c * rel[:, 1] - s * rel[:, 2]
    z = s * rel[:, 1] + c * rel[:, 2]
    pts[:, 1] = _HINGE[1] + y
    pts[:, 2] = _HINGE[2] + z
    return pts


def _sample_identity(rng) -> dict:
    return {name: default + std * rng.standard_normal() for name, default, std in _ID_PARAMS}


def _sample_expression(rng, symmetric: bool) -> dict:
    e = {"jaw": _JAW_MAX * rng.random()}
    e.update({name: std * rng.standard_normal() for name, std in _EXP_PARAMS})
    e["smirk"] = 0.0 if symmetric else _SMIRK_STD * rng.standard_normal()
    return e


def _neutral_expression() -> dict:
    e = {"jaw": 0.0, "smirk": 0.0}
    e.update({name: 0.0 for name, _ in _EXP_PARAMS})
    return e


def jaw_expression(theta: float) -> dict:
    """Expression parameters with only the jaw opened by ``theta`` radians."""
    e = _neutral_expression()
    e["jaw"] = float(theta)
    return e


def _top_components(data: np.ndarray, k: int, what: str) -> np.ndarray:
    _, s, vt = np.linalg.svd(data, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-9)) if s.size and s[0] > 0 else 0
    if k > rank:
        raise RankError(f"{what} samples have rank {rank}, fewer than the {k} components requested")
    comps = vt[:k].copy()
    # deterministic sign: largest-magnitude entry positive
    idx = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(k), idx])[:, None]
    return comps


def _pick_landmarks(uv: np.ndarray, count: int) -> np.ndarray:
    mw, mv = MOUTH_HALF_WIDTH, MOUTH_V
    targets = [
        (0.0, mv + LIP_OFFSET),
        (0.0, mv - LIP_OFFSET),
        (mw, mv),
        (-mw, mv),
        (0.0, 0.0),
        (0.1, -0.12),
        (-0.1, -0.12),
        (0.15, 0.22),
        (-0.15, 0.22),
        (0.45, 0.22),
        (-0.45, 0.22),
        (0.3, 0.38),
        (-0.3, 0.38),
        (0.0, -0.85),
        (0.6, -0.55),
        (-0.6, -0.55),
        (0.75, -0.2),
        (-0.75, -0.2),
        (0.1, mv + 0.045),
        (-0.1, mv + 0.045),
        (0.1, mv - 0.05),
        (-0.1, mv - 0.05),
        (0.5, 0.0),
        (-0.5, 0.0),
        (0.0, 0.7),
        (0.0, -0.65),
        (0.4, -0.35),
        (-0.4, -0.35),
    ]
    chosen: list[int] = []
    for t in targets:
        if len(chosen) >= count:
            break
        d = np.linalg.norm(uv - np.asarray(t), axis=1)
        d[chosen] = np.inf
        chosen.append(int(np.argmin(d)))
    # fill the rest by farthest-point sampling
    while len(chosen) < count:
        d = np.min(np.linalg.norm(uv[:, None, :] - uv[chosen][None], axis=2), axis=1)
        chosen.append(int(np.argmax(d)))
    return np.array(chosen, dtype=np.int64)


def build_toy_basis(
    seed: int,
    num_vertices: int = 1000,
    k_id: int = 8,
    k_exp: int = 6,
    num_landmarks: int = 40,
    symmetric: bool = False,
) -> BlendshapeBasis:
    """Sample a parametric head family and fit identity/expression PCA bases.

    ``symmetric=True`` drops the one asymmetric expression mode so that every
    basis column is left-right mirror symmetric.
    """
    if num_vertices < 100:
        raise ValueError("num_vertices must be >= 100")
    if k_id < 1 or k_exp < 1:
        raise ValueError("k_id and k_exp must be >= 1")
    if not 2 <= num_landmarks <= num_vertices:
        raise ValueError("num_landmarks must be in [2, num_vertices]")
    rng = np.random.default_rng(seed)
    uv = _template_uv(num_vertices)
    n_samples = 10 * (k_id + k_exp)

    ids = [_identity_shape(uv, _sample_identity(rng)) for _ in range(n_samples)]
    id_data = np.stack([s.ravel() for s in ids])
    mean = id_data.mean(axis=0)
    id_comps = _top_components(id_data - mean, k_id, "identity")

    deltas = []
    for neutral in ids:
        e = _sample_expression(rng, symmetric)
        deltas.append((_apply_expression(uv, neutral, e) - neutral).ravel())
    exp_comps = _top_components(np.stack(deltas), k_exp, "expression")

    landmarks = _pick_landmarks(uv, num_landmarks)
    # expression 0 opens the mouth: lower lip moves down
    lower = landmarks[1]
    if exp_comps[0, 3 * lower + 1] > 0:
        exp_comps[0] *= -1.0

    mouth = np.flatnonzero(((uv[:, 0] / (MOUTH_HALF_WIDTH + 0.04)) ** 2 + ((uv[:, 1] - MOUTH_V) / 0.09) ** 2) <= 1.0)

    V = num_vertices
    basis = BlendshapeBasis(
        mean_shape=mean.reshape(V, 3),
        id_basis=id_comps.T.reshape(V, 3, k_id),
        exp_basis=exp_comps.T.reshape(V, 3, k_exp),
        landmark_indices=landmarks,
        mouth_indices=mouth.astype(np.int64),
    )
    _freeze(basis)
    return basis


def _freeze(basis: BlendshapeBasis) -> None:
    for arr in (basis.mean_shape, basis.id_basis, basis.exp_basis, basis.landmark_indices, basis.mouth_indices):
        arr.flags.writeable = False


def sample_mesh(seed: int, num_vertices: int = 1000, symmetric: bool = False) -> np.ndarray:
    """A fresh member of the parametric family (identity plus expression)."""
    rng = np.random.default_rng(seed)
    uv = _template_uv(num_vertices)
    neutral = _identity_shape(uv, _sample_identity(rng))
    return _apply_expression(uv, neutral, _sample_expression(rng, symmetric))


def template_uv(num_vertices: int) -> np.ndarray:
    return _template_uv(num_vertices)


def jaw_displacement(num_vertices: int, theta: float) -> np.ndarray:
    """Vertex displacement of a pure jaw opening on the default identity."""
    uv = _template_uv(num_vertices)
    neutral = _identity_shape(uv, {name: default for name, default, _ in _ID_PARAMS})
    return _apply_expression(uv, neutral, jaw_expression(theta)) - neutral


# ---------------------------------------------------------------------------
# evaluation


def _check_coeffs(basis: BlendshapeBasis, coeffs: ShapeCoeffs) -> tuple[np.ndarray, np.ndarray]:
    alpha = np.asarray(coeffs.alpha, dtype=np.float64)
    beta = np.asarray(coeffs.beta, dtype=np.float64)
    if alpha.shape != (basis.k_id,) or beta.shape != (basis.k_exp,):
        raise ValueError(
            f"coefficient shapes alpha{alpha.shape}, beta{beta.shape} do not match basis "
            f"(K_id={basis.k_id}, K_exp={basis.k_exp})"
        )
    return alpha, beta


def evaluate_shape(basis: BlendshapeBasis, coeffs: ShapeCoeffs) -> np.ndarray:
    alpha, beta = _check_coeffs(basis, coeffs)
    V = basis.num_vertices
    shape = basis.mean_shape.reshape(-1) + basis.id_basis.reshape(3 * V, -1) @ alpha
    shape = shape + basis.exp_basis.reshape(3 * V, -1) @ beta
    return shape.reshape(V, 3)


def extract_landmarks(basis: BlendshapeBasis, vertices: np.ndarray) -> np.ndarray:
    vertices = np.asarray(vertices)
    if vertices.shape != (basis.num_vertices, 3):
        raise ValueError(f"vertices of shape {vertices.shape} do not belong to this basis")
    return vertices[basis.landmark_indices]


def vertex_displacement(v_init: np.ndarray, v_audio: np.ndarray) -> np.ndarray:
    """Per-vertex displacement ``v_init - v_audio``."""
    v_init, v_audio = np.asarray(v_init), np.asarray(v_audio)
    if v_init.shape != v_audio.shape:
        raise ValueError(f"vertex sets differ in shape: {v_init.shape} vs {v_audio.shape}")
    return v_init - v_audio


# ---------------------------------------------------------------------------
# NFSB serialization

_NFSB_MAGIC = b"NFSB"
_NFSB_VERSION = 1


def save_basis(basis: BlendshapeBasis, path) -> None:
    V, K_id, K_exp, L = basis.num_vertices, basis.k_id, basis.k_exp, len(basis.landmark_indices)
    parts = [
        _NFSB_MAGIC,
        struct.pack("<I", _NFSB_VERSION),
        struct.pack("<4I", V, K_id, K_exp, L),
    ]
    for arr in (basis.mean_shape, basis.id_basis, basis.exp_basis, basis.bbox):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    parts.append(np.asarray(basis.landmark_indices, dtype="<u4").tobytes())
    parts.append(struct.pack("<I", len(basis.mouth_indices)))
    parts.append(np.asarray(basis.mouth_indices, dtype="<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_basis(path) -> BlendshapeBasis:
    data = Path(path).read_bytes()
    if data[:4] != _NFSB_MAGIC:
        raise ValueError(f"{path}: not an NFSB basis (magic {data[:4]!r})")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _NFSB_VERSION:
        raise ValueError(f"{path}: unsupported NFSB version {version}")
    V, K_id, K_exp, L = struct.unpack_from("<4I", data, 8)
    pos = 24

    def take(count, dtype):
        nonlocal pos
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
        pos += arr.nbytes
        return arr

    mean = take(V * 3, "<f8").reshape(V, 3).astype(np.float64)
    id_basis = take(V * 3 * K_id, "<f8").reshape(V, 3, K_id).astype(np.float64)
    exp_basis = take(V * 3 * K_exp, "<f8").reshape(V, 3, K_exp).astype(np.float64)
    take(6, "<f8")  # bbox, derived from mean_shape
    landmarks = take(L, "<u4").astype(np.int64)
    (m,) = struct.unpack_from("<I", data, pos)
    pos += 4
    mouth = take(m, "<u4").astype(np.int64)
    basis = BlendshapeBasis(mean, id_basis, exp_basis, landmarks, mouth)
    _freeze(basis)
    return basis
