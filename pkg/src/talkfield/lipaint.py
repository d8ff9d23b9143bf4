"""Residual latent network that edits a style latent towards a target expression.

Supervision is self-generated. A fixed linear probe couples latents to face
model coefficients: it is fitted once so that ``probe(f(z))`` reproduces a
scaled slice of ``z``. A training example draws an identity latent, reads its
coefficients through the probe, perturbs the expression part and asks the
network for a latent whose probe reading matches the perturbed target. The
landmark and coefficient losses are taken through the analytic least-squares
estimator; the adversarial term renders the edited latent and scores it with
a small discriminator trained beforehand on in-range versus out-of-range
edits.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Graph, Node, adam_step
from .face_model import BlendshapeBasis, RankError, ShapeCoeffs, evaluate_shape, extract_landmarks
from .field import FieldBundle, map_latent
from .render import CameraPose, SamplingConfig, _conv3x3_nodes, render_image, render_loss_and_grads

COEFF_SCALE = 0.5
AUGMENT_RANGE = 1.0
PROB_CLAMP = 1e-6
# fixed gain on the residual head; the zero-initialised output layer moves at
# most ~lr per Adam step, and this restores reach over a short schedule
RESIDUAL_GAIN = 4.0


# ---------------------------------------------------------------------------
# latent <-> coefficient coupling


@dataclass(frozen=True)
class LatentProbe:
    """Affine map ``w -> [alpha, beta]``."""

    matrix: np.ndarray  # (D_w, K_id + K_exp)
    bias: np.ndarray  # (K_id + K_exp,)
    k_id: int

    def __call__(self, w) -> np.ndarray:
        return np.asarray(w, np.float64) @ self.matrix + self.bias

    def coeffs(self, w) -> ShapeCoeffs:
        c = self(w)
        return ShapeCoeffs(c[: self.k_id], c[self.k_id :])

    def expression_edit(self, delta_beta) -> np.ndarray:
        """Minimum-norm latent change moving the probe's expression reading by ``delta_beta``."""
        A = self.matrix[:, self.k_id :]
        return np.linalg.pinv(A.T) @ np.asarray(delta_beta, np.float64)


def fit_probe(bundle: FieldBundle, basis: BlendshapeBasis, count: int = 1000, seed: int = 0) -> LatentProbe:
    """Least-squares probe from mapped latents to ``COEFF_SCALE * z[:K]``."""
    K = basis.k_id + basis.k_exp
    if K > bundle.config.z_dim:
        raise ValueError(f"latent of dimension {bundle.config.z_dim} cannot carry {K} coefficients")
    z = np.random.default_rng(seed).standard_normal((count, bundle.config.z_dim))
    W = np.stack([map_latent(bundle, zi) for zi in z])
    X = np.column_stack([W, np.ones(count)])
    sol, *_ = np.linalg.lstsq(X, COEFF_SCALE * z[:, :K], rcond=None)
    return LatentProbe(sol[:-1], sol[-1], basis.k_id)


# ---------------------------------------------------------------------------
# analytic estimator


def landmark_operator(basis: BlendshapeBasis) -> tuple[np.ndarray, np.ndarray]:
    """Landmarks as an affine function of ``[alpha, beta]``: ``(3L, K)`` matrix and ``(3L,)`` offset."""
    idx = basis.landmark_indices
    B = np.concatenate([basis.id_basis[idx], basis.exp_basis[idx]], axis=2)
    return B.reshape(3 * len(idx), -1), basis.mean_shape[idx].reshape(-1)


def estimator_matrix(basis: BlendshapeBasis) -> np.ndarray:
    """``(B^T B)^-1 B^T`` for the landmark operator; raises on rank deficiency."""
    B, _ = landmark_operator(basis)
    s = np.linalg.svd(B, compute_uv=False)
    rank = int(np.sum(s > s[0] * max(B.shape) * np.finfo(float).eps))
    if rank < B.shape[1]:
        raise RankError(f"landmark system has rank {rank} < {B.shape[1]} coefficients")
    return np.linalg.solve(B.T @ B, B.T)


def estimate_coeffs_and_landmarks(landmarks_obs, basis: BlendshapeBasis) -> tuple[ShapeCoeffs, np.ndarray]:
    """Least-squares ``(alpha, beta)`` for observed landmark positions and the fitted landmarks."""
    B, offset = landmark_operator(basis)
    obs = np.asarray(landmarks_obs, np.float64).reshape(-1)
    if obs.shape != offset.shape:
        raise ValueError(f"expected {len(offset) // 3} landmarks, got {obs.size / 3:g}")
    c = estimator_matrix(basis) @ (obs - offset)
    coeffs = ShapeCoeffs(c[: basis.k_id], c[basis.k_id :])
    return coeffs, extract_landmarks(basis, evaluate_shape(basis, coeffs))


# ---------------------------------------------------------------------------
# losses


def loss_ldm(ldm_target, ldm_out) -> float:
    """Mean over landmarks of the squared L2 distance."""
    a, b = np.asarray(ldm_target, np.float64), np.asarray(ldm_out, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"landmark sets differ in shape: {a.shape} vs {b.shape}")
    return float(np.mean(np.sum((a - b) ** 2, axis=-1)))


def loss_3dmm(s_target: ShapeCoeffs, s_hat: ShapeCoeffs) -> float:
    """Squared L2 over expression coefficients plus squared L2 over identity coefficients."""
    for name in ("alpha", "beta"):
        if np.shape(getattr(s_target, name)) != np.shape(getattr(s_hat, name)):
            raise ValueError(f"{name} dimensions differ")
    db = np.asarray(s_target.beta, np.float64) - s_hat.beta
    da = np.asarray(s_target.alpha, np.float64) - s_hat.alpha
    return float(db @ db + da @ da)


def loss_gan_from_prob(prob: float) -> float:
    return float(-np.log(np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)))


def loss_gan(disc: "ToyDiscriminator", image) -> float:
    return loss_gan_from_prob(disc.prob(image))


@dataclass(frozen=True)
class LossWeights:
    ldm: float = 1.0
    coeff: float = 1.0
    gan: float = 0.1

    def __post_init__(self):
        if min(self.ldm, self.coeff, self.gan) < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


def total_loss(l_ldm: float, l_3dmm: float, l_gan: float, weights: LossWeights | tuple = LossWeights()) -> float:
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*weights)
    out = weights.ldm * l_ldm + weights.coeff * l_3dmm
    if weights.gan:
        out += weights.gan * l_gan
    return out


# ---------------------------------------------------------------------------
# the residual network


def init_lipaint(seed: int, k_exp: int, w_dim: int, width: int = 128) -> dict[str, np.ndarray]:
    """Residual MLP ``[beta, w] -> dw``: input layer, one residual block, zero output layer."""
    rng = np.random.default_rng(seed)
    d_in = k_exp + w_dim
    bound_in = np.sqrt(6.0 / (1.04 * d_in))
    bound_h = np.sqrt(6.0 / (1.04 * width))
    return {
        "lip.0.W": rng.uniform(-bound_in, bound_in, (d_in, width)),
        "lip.0.b": np.zeros((1, width)),
        "lip.1.W": rng.uniform(-bound_h, bound_h, (width, width)),
        "lip.1.b": np.zeros((1, width)),
        "lip.2.W": np.zeros((width, w_dim)),
        "lip.2.b": np.zeros((1, w_dim)),
    }


def lipaint_nodes(g: Graph, p: dict[str, Node], beta: Node, w: Node) -> Node:
    n = beta.shape[0]
    width = p["lip.0.W"].shape[1]
    x = g.concat([beta, w], axis=1)
    h = g.leaky_relu(x @ p["lip.0.W"] + g.broadcast(p["lip.0.b"], (n, width)), 0.2)
    h = h + g.leaky_relu(h @ p["lip.1.W"] + g.broadcast(p["lip.1.b"], (n, width)), 0.2)
    return w + (h @ p["lip.2.W"] + g.broadcast(p["lip.2.b"], (n, w.shape[1]))) * RESIDUAL_GAIN


def lipaint_forward(params: dict[str, np.ndarray], beta_target, w_id) -> np.ndarray:
    beta = np.atleast_2d(np.asarray(beta_target, np.float64))
    w = np.atleast_2d(np.asarray(w_id, np.float64))
    if beta.shape[0] != w.shape[0] or params["lip.0.W"].shape[0] != beta.shape[1] + w.shape[1]:
        raise ValueError(f"input dimensions {beta.shape}, {w.shape} do not match the network")
    g = Graph()
    p = {k: g.param(k, v.shape) for k, v in params.items()}
    out = lipaint_nodes(g, p, g.input("beta", beta.shape), g.input("w", w.shape))
    res = g.forward({**params, "beta": beta, "w": w})[out]
    return res[0] if np.ndim(w_id) == 1 else res


def infer_mouth_latent(params, beta_audio_t, w_inv) -> np.ndarray:
    return lipaint_forward(params, beta_audio_t, w_inv)


# ---------------------------------------------------------------------------
# training data


@dataclass(frozen=True)
class TrainingExample:
    w_id: np.ndarray
    beta_source: np.ndarray
    beta_target: np.ndarray
    s_target: ShapeCoeffs
    ldm_target: np.ndarray


def sample_training_example(
    bundle: FieldBundle,
    basis: BlendshapeBasis,
    probe: LatentProbe,
    seed: int,
    augment: bool = True,
) -> TrainingExample:
    rng = np.random.default_rng(seed)
    w = map_latent(bundle, rng.standard_normal(bundle.config.z_dim))
    source = probe.coeffs(w)
    u = rng.uniform(-AUGMENT_RANGE, AUGMENT_RANGE, basis.k_exp)
    target_beta = source.beta + u if augment else source.beta.copy()
    s_target = ShapeCoeffs(source.alpha, target_beta)
    ldm = extract_landmarks(basis, evaluate_shape(basis, s_target))
    return TrainingExample(w, source.beta, target_beta, s_target, ldm)


# ---------------------------------------------------------------------------
# discriminator


TINY_POSE = CameraPose()
TINY_SAMPLING = SamplingConfig(num_samples=16)
TINY_SIZE = 8


def tiny_render(bundle: FieldBundle, w) -> np.ndarray:
    return render_image(bundle, w, TINY_POSE, TINY_SAMPLING, TINY_SIZE, TINY_SIZE)


def _pool_matrix(n, k):
    P = np.zeros((n // k, n))
    for i in range(n // k):
        P[i, i * k : (i + 1) * k] = 1.0 / k
    return P


def disc_nodes(g: Graph, p: dict[str, Node], img: Node) -> Node:
    """Probability ``(1, 1)`` that ``img`` is an in-range render."""
    H, W, _ = img.shape
    c1 = p["d.0.W"].shape[1]
    h = g.leaky_relu(_conv3x3_nodes(g, img, p["d.0.W"], p["d.0.b"]), 0.2)
    # 4x average pooling as two matmuls
    Ph, Pw = g.const(_pool_matrix(H, 4)), g.const(_pool_matrix(W, 4))
    h = g.reshape(Ph @ g.reshape(h, (H, W * c1)), (H // 4, W, c1))
    h = g.reshape(g.transpose(h, (1, 0, 2)), (W, (H // 4) * c1))
    h = g.transpose(g.reshape(Pw @ h, (W // 4, H // 4, c1)), (1, 0, 2))
    c2 = p["d.1.W"].shape[1]
    h = g.leaky_relu(_conv3x3_nodes(g, h, p["d.1.W"], p["d.1.b"]), 0.2)
    feat = g.mean(g.reshape(h, ((H // 4) * (W // 4), c2)), axis=0, keepdims=True)
    return g.sigmoid(feat @ p["d.2.W"] + p["d.2.b"])


@dataclass
class ToyDiscriminator:
    params: dict[str, np.ndarray]
    train_accuracy: float = float("nan")
    heldout_accuracy: float = float("nan")

    def prob(self, image) -> float:
        image = np.asarray(image, np.float64)
        g = Graph()
        p = {k: g.const(v) for k, v in self.params.items()}
        out = disc_nodes(g, p, g.input("img", image.shape))
        return float(g.forward({"img": image})[out][0, 0])

    def loss_builder(self):
        """Graph builder for ``-log clip(D(img))`` with frozen discriminator weights."""

        def build(g: Graph, img: Node) -> Node:
            p = {k: g.const(v) for k, v in self.params.items()}
            prob = g.clip(disc_nodes(g, p, img), PROB_CLAMP, 1.0 - PROB_CLAMP)
            return g.reshape(-g.log(prob), ())

        return build


def init_discriminator(seed: int, channels: tuple[int, int] = (8, 8)) -> ToyDiscriminator:
    rng = np.random.default_rng(seed)
    c1, c2 = channels
    return ToyDiscriminator(
        {
            "d.0.W": rng.uniform(-1, 1, (27, c1)) * np.sqrt(6.0 / 27),
            "d.0.b": np.zeros((1, c1)),
            "d.1.W": rng.uniform(-1, 1, (9 * c1, c2)) * np.sqrt(6.0 / (9 * c1)),
            "d.1.b": np.zeros((1, c2)),
            "d.2.W": np.zeros((c2, 1)),
            "d.2.b": np.zeros((1, 1)),
        }
    )


def edited_latent(probe: LatentProbe, w, u) -> np.ndarray:
    return np.asarray(w, np.float64) + probe.expression_edit(u)


def discriminator_dataset(bundle, probe: LatentProbe, count: int, seed: int):
    """Balanced renders: label 1 for edits with ``|u| <= 1``, 0 for ``1.5 <= |u| <= 3``."""
    rng = np.random.default_rng(seed)
    k_exp = probe.matrix.shape[1] - probe.k_id
    images, labels = [], []
    for i in range(count):
        w = map_latent(bundle, rng.standard_normal(bundle.config.z_dim))
        if i % 2 == 0:
            u = rng.uniform(-AUGMENT_RANGE, AUGMENT_RANGE, k_exp)
            label = 1.0
        else:
            u = rng.uniform(1.5, 3.0, k_exp) * rng.choice([-1.0, 1.0], k_exp)
            label = 0.0
        images.append(tiny_render(bundle, edited_latent(probe, w, u)))
        labels.append(label)
    return np.stack(images), np.array(labels)


def _disc_batch_loss(disc_params, images, labels):
    g = Graph()
    p = {k: g.param(k, v.shape) for k, v in disc_params.items()}
    total = None
    for i, img in enumerate(images):
        prob = g.clip(disc_nodes(g, p, g.input(f"img{i}", img.shape)), PROB_CLAMP, 1.0 - PROB_CLAMP)
        y = labels[i]
        term = -g.log(prob) if y == 1.0 else -g.log(1.0 - prob)
        total = term if total is None else total + term
    loss = g.reshape(total * (1.0 / len(images)), ())
    ev = g.forward({**disc_params, **{f"img{i}": img for i, img in enumerate(images)}})
    return float(ev[loss]), g.backward(ev, loss)


def _accuracy(disc: ToyDiscriminator, images, labels) -> float:
    preds = np.array([disc.prob(im) > 0.5 for im in images], dtype=float)
    return float(np.mean(preds == labels))


def train_toy_discriminator(
    bundle: FieldBundle,
    probe: LatentProbe,
    steps: int = 300,
    seed: int = 0,
    train_count: int = 128,
    heldout_count: int = 64,
    batch: int = 16,
    lr: float = 3e-3,
) -> ToyDiscriminator:
    """Fit the discriminator on tiny renders; accuracies are stored on the result."""
    images, labels = discriminator_dataset(bundle, probe, train_count, seed)
    h_images, h_labels = discriminator_dataset(bundle, probe, heldout_count, seed + 7919)
    disc = init_discriminator(seed)
    params = dict(disc.params)
    rng = np.random.default_rng(seed + 1)
    state = AdamState()
    for _ in range(steps):
        idx = rng.choice(train_count, batch, replace=False)
        _, grads = _disc_batch_loss(params, images[idx], labels[idx])
        params = adam_step(params, grads, state, lr)
    disc = ToyDiscriminator(params)
    disc.train_accuracy = _accuracy(disc, images, labels)
    disc.heldout_accuracy = _accuracy(disc, h_images, h_labels)
    return disc


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class LipaintConfig:
    steps: int = 2000
    batch: int = 8
    lr: float = 1e-5
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    width: int = 128
    heldout: int = 32
    log_every: int = 1


@dataclass
class LipaintResult:
    params: dict[str, np.ndarray]
    log: list[dict]
    heldout_initial: float
    heldout_final: float


def _supervised_graph(params, probe: LatentProbe, basis: BlendshapeBasis, n: int):
    """Graph of ``L_ldm`` and ``L_3dmm`` (batch means) for ``n`` examples."""
    B, offset = landmark_operator(basis)
    E = estimator_matrix(basis)
    L = len(basis.landmark_indices)
    K = B.shape[1]
    g = Graph()
    p = {k: g.param(k, v.shape) for k, v in params.items()}
    beta_t = g.input("beta_t", (n, basis.k_exp))
    w_id = g.input("w_id", (n, probe.matrix.shape[0]))
    s_t = g.input("s_t", (n, K))
    ldm_t = g.input("ldm_t", (n, 3 * L))
    w_exp = lipaint_nodes(g, p, beta_t, w_id)
    # rendered-state landmarks of the edited latent, then the analytic estimator
    coeffs = w_exp @ g.const(probe.matrix) + g.broadcast(g.const(probe.bias[None]), (n, K))
    ldm_state = coeffs @ g.const(B.T) + g.broadcast(g.const(offset[None]), (n, 3 * L))
    s_hat = (ldm_state - g.broadcast(g.const(offset[None]), (n, 3 * L))) @ g.const(E.T)
    ldm_hat = s_hat @ g.const(B.T) + g.broadcast(g.const(offset[None]), (n, 3 * L))
    l_ldm = g.sum(g.square(ldm_hat - ldm_t)) * (1.0 / (n * L))
    l_3dmm = g.sum(g.square(s_hat - s_t)) * (1.0 / n)
    return g, w_exp, l_ldm, l_3dmm


def _batch_inputs(examples):
    return {
        "beta_t": np.stack([e.beta_target for e in examples]),
        "w_id": np.stack([e.w_id for e in examples]),
        "s_t": np.stack([np.concatenate([e.s_target.alpha, e.s_target.beta]) for e in examples]),
        "ldm_t": np.stack([e.ldm_target.reshape(-1) for e in examples]),
    }


def heldout_loss(params, probe, basis, examples) -> float:
    """Mean ``L_ldm + L_3dmm`` over ``examples``."""
    g, _, l_ldm, l_3dmm = _supervised_graph(params, probe, basis, len(examples))
    ev = g.forward({**params, **_batch_inputs(examples)})
    return float(ev[l_ldm] + ev[l_3dmm])


def train_lipaint(
    bundle: FieldBundle,
    basis: BlendshapeBasis,
    config: LipaintConfig = LipaintConfig(),
    *,
    probe: LatentProbe | None = None,
    disc: ToyDiscriminator | None = None,
    log_path=None,
) -> LipaintResult:
    """Adam on the network parameters only; bundle and basis stay frozen."""
    probe = probe or fit_probe(bundle, basis, seed=config.seed)
    w_dim = bundle.config.w_dim
    params = init_lipaint(config.seed, basis.k_exp, w_dim, config.width)
    use_gan = config.weights.gan > 0
    if use_gan and disc is None:
        raise ValueError("a trained discriminator is required when the adversarial weight is non-zero")
    heldout = [sample_training_example(bundle, basis, probe, 10_000_000 + config.seed * 1000 + i) for i in range(config.heldout)]
    h0 = heldout_loss(params, probe, basis, heldout)
    state = AdamState()
    log: list[dict] = []
    n = config.batch
    g, w_exp_node, l_ldm, l_3dmm = _supervised_graph(params, probe, basis, n)
    gan_grad = g.input("gan_grad", (n, w_dim))
    sup = l_ldm * config.weights.ldm + l_3dmm * config.weights.coeff
    # the adversarial gradient enters through a linear surrogate <w_exp, dL_gan/dw_exp>
    objective = sup + g.sum(w_exp_node * gan_grad) * (config.weights.gan / n) if use_gan else sup
    gan_loss = disc.loss_builder() if use_gan else None

    for step in range(config.steps):
        batch = [
            sample_training_example(bundle, basis, probe, config.seed * 1_000_003 + step * n + i) for i in range(n)
        ]
        inputs = _batch_inputs(batch)
        gan_g = np.zeros((n, w_dim))
        l_gan = 0.0
        if use_gan:
            w_exp = g.forward({**params, **inputs, "gan_grad": gan_g})[w_exp_node]
            for i in range(n):
                li, gi, _ = render_loss_and_grads(
                    bundle, w_exp[i], TINY_POSE, TINY_SAMPLING, TINY_SIZE, TINY_SIZE, gan_loss, ["w"]
                )
                l_gan += li / n
                gan_g[i] = gi["w"]
        ev = g.forward({**params, **inputs, "gan_grad": gan_g})
        ldm_v, coef_v = float(ev[l_ldm]), float(ev[l_3dmm])
        total = total_loss(ldm_v, coef_v, l_gan, config.weights)
        if not np.isfinite(total):
            raise FloatingPointError(f"lipaint training diverged at step {step}")
        grads = g.backward(ev, objective, wrt=list(params))
        params = adam_step(params, grads, state, config.lr)
        if step % config.log_every == 0 or step == config.steps - 1:
            log.append({"step": step, "l_ldm": ldm_v, "l_3dmm": coef_v, "l_gan": l_gan, "total": total})
    h1 = heldout_loss(params, probe, basis, heldout)
    if log_path is not None:
        write_training_log(log_path, log)
    return LipaintResult(params, log, h0, h1)


def write_training_log(path, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["step", "l_ldm", "l_3dmm", "l_gan", "total"])
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
