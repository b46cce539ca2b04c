"""WGAN-GP joint regressor: refines a noisy single-channel joint heatmap
(stacked with the RGB frame) into the exact coordinates of the six
joints of interest.

The critic scores raw 12-vectors of joint coordinates. Its gradient
penalty needs the critic's input gradient as a differentiable expression;
since the critic is a smooth-activation perceptron, that gradient is the
closed-form product of layer weight transposes and activation-derivative
diagonals, built from forward primitives so the tape can differentiate it
with respect to the critic parameters. No double-backward machinery.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .io import atomic_write_text, load_checkpoint, read_fgt, save_checkpoint, write_fgt
from .layers import Adam, Conv2d, Linear, xavier_uniform
from .tensor import ContractError, Tensor

JOINT_NAMES = ["l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist"]


class JointSet:
    """Six (x, y) joint coordinates in normalized [0,1] image space,
    ordered L/R shoulder, L/R elbow, L/R wrist."""

    __slots__ = ("coords",)

    def __init__(self, coords):
        coords = np.asarray(coords, dtype=np.float64).reshape(-1)
        if coords.shape != (12,):
            raise ContractError(f"JointSet needs exactly 12 values, got {coords.shape}")
        if coords.min() < 0.0 or coords.max() > 1.0:
            raise ContractError(f"joint coordinates must lie in [0,1], "
                                f"got range [{coords.min():.3f}, {coords.max():.3f}]")
        self.coords = coords

    def as_points(self) -> np.ndarray:
        return self.coords.reshape(6, 2)

    def __eq__(self, other):
        return isinstance(other, JointSet) and np.array_equal(self.coords, other.coords)

    def __repr__(self):
        return f"JointSet({np.round(self.coords, 3).tolist()})"


@dataclass
class HeatmapSample:
    image: np.ndarray      # [3,H,W] in [0,1]
    heatmap: np.ndarray    # [1,H,W] in [0,1]
    truth: JointSet

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.image, self.heatmap], axis=0)


@dataclass
class NoiseConfig:
    """Corruption model standing in for a poorly generalizing pose estimator."""
    sigma_px: float = 2.5      # bump width
    p_drop: float = 0.25       # chance a joint's bump is missing entirely
    sigma_jit_px: float = 3.0  # bump center jitter
    n_spurious: int = 2        # extra bumps at random positions


@dataclass
class GanConfig:
    lambda_gp: float = 10.0
    lr: float = 1e-4
    n_critic: int = 5
    beta1: float = 0.5
    beta2: float = 0.99
    epochs: int = 200
    batch_size: int = 16

    def __post_init__(self):
        if self.n_critic < 1:
            raise ContractError("n_critic must be >= 1")
        if self.lambda_gp < 0:
            raise ContractError("lambda_gp must be >= 0")


def gaussian_bumps(centers_px: np.ndarray, h: int, w: int, sigma: float) -> np.ndarray:
    """Sum of unit-height isotropic Gaussians at pixel centers, [H,W]."""
    out = np.zeros((h, w), dtype=np.float64)
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    for cx, cy in centers_px:
        out += np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma))
    return out


def render_pose_image(truth: JointSet, h: int, w: int) -> np.ndarray:
    """Soft-blob rendering of the arm joints as a [3,H,W] image in [0,1]."""
    pts = truth.as_points() * np.array([w - 1, h - 1])
    blob = gaussian_bumps(pts, h, w, sigma=1.8)
    tint = np.array([0.9, 0.7, 0.5])
    return np.clip(tint[:, None, None] * blob[None], 0.0, 1.0).astype(np.float32)


def synth_heatmap(truth: JointSet, noise: NoiseConfig | None = None,
                  seed: int | np.random.Generator = 0, h: int = 64, w: int = 64) -> HeatmapSample:
    """Noisy heatmap for a known pose: per-joint bumps independently dropped
    and jittered, plus spurious bumps; clipped to [0,1]. Deterministic per seed."""
    noise = noise or NoiseConfig()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    pts = truth.as_points() * np.array([w - 1, h - 1])
    centers = []
    for p in pts:
        if rng.uniform() < noise.p_drop:
            continue
        centers.append(p + rng.normal(0.0, noise.sigma_jit_px, size=2))
    for _ in range(noise.n_spurious):
        centers.append(np.array([rng.uniform(0, w - 1), rng.uniform(0, h - 1)]))
    hm = gaussian_bumps(np.array(centers).reshape(-1, 2), h, w, noise.sigma_px)
    hm = np.clip(hm, 0.0, 1.0).astype(np.float32)
    return HeatmapSample(render_pose_image(truth, h, w), hm[None], truth)


# -- baseline decoder ------------------------------------------------------

def argmax_decode_near_truth(heatmap: np.ndarray, truth: JointSet,
                             radius_px: int = 8) -> np.ndarray:
    """Per-joint heatmap argmax within a window around the true location.

    The association step is oracle-assisted (it knows which joint to look
    near) so this measures pure localization error; dropped joints make the
    window argmax land on noise.
    """
    hm = heatmap[0] if heatmap.ndim == 3 else heatmap
    h, w = hm.shape
    pts = truth.as_points() * np.array([w - 1, h - 1])
    out = np.zeros((6, 2))
    for k, (cx, cy) in enumerate(pts):
        x0, x1 = max(0, int(cx) - radius_px), min(w, int(cx) + radius_px + 1)
        y0, y1 = max(0, int(cy) - radius_px), min(h, int(cy) + radius_px + 1)
        window = hm[y0:y1, x0:x1]
        iy, ix = np.unravel_index(np.argmax(window), window.shape)
        out[k] = [(x0 + ix) / (w - 1), (y0 + iy) / (h - 1)]
    return out.reshape(12)


def mean_joint_error_px(pred, truth, h: int, w: int) -> float:
    """Mean Euclidean distance over the six joints, in pixels."""
    p = np.asarray(getattr(pred, "coords", pred)).reshape(6, 2) * np.array([w - 1, h - 1])
    q = np.asarray(getattr(truth, "coords", truth)).reshape(6, 2) * np.array([w - 1, h - 1])
    return float(np.linalg.norm(p - q, axis=1).mean())


# -- critic ----------------------------------------------------------------

_ACT = {"tanh": (T.tanh, lambda a: 1.0 - a * a),
        "sigmoid": (T.sigmoid, lambda a: a * (1.0 - a))}


class CriticMlp:
    """Smooth-activation perceptron scoring joint 12-vectors."""

    def __init__(self, hidden=(64, 64), activation: str = "tanh", seed: int = 0):
        if activation not in _ACT:
            raise ContractError(f"unsupported activation {activation!r}; "
                                f"critic needs one of {sorted(_ACT)}")
        rng = np.random.default_rng(seed)
        dims = [12, *hidden, 1]
        self.activation = activation
        self.layers = [Linear(a, b, rng=rng) for a, b in zip(dims, dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        """[B,12] -> [B] critic scores."""
        act, _ = _ACT[self.activation]
        a = x
        for layer in self.layers[:-1]:
            a = act(layer(a))
        return T.reshape(self.layers[-1](a), (x.shape[0],))

    def input_gradient(self, x: Tensor) -> Tensor:
        """[B,12] -> [B,12] gradients of the score wrt each input row,
        expressed through forward primitives (differentiable wrt weights)."""
        act, act_deriv = _ACT[self.activation]
        activations = []
        a = x
        for layer in self.layers[:-1]:
            a = act(layer(a))
            activations.append(a)
        batch = x.shape[0]
        ones = Tensor(np.ones((batch, 1), dtype=x.data.dtype))
        grad = T.matmul(ones, self.layers[-1].weight)  # [B, h_last]
        for layer, a in zip(reversed(self.layers[:-1]), reversed(activations)):
            grad = T.matmul(grad * act_deriv(a), layer.weight)
        return grad

    def params(self, prefix: str = "critic.") -> dict:
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.params(f"{prefix}l{i}."))
        return out


def critic_input_gradient(critic: CriticMlp, x) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=T.default_dtype()))
    if x.data.ndim == 1:
        x = T.reshape(x, (1, x.shape[0]))
    return critic.input_gradient(x)


def interpolate(real: np.ndarray, fake: np.ndarray, eps) -> np.ndarray:
    """x̂ = ε·real + (1−ε)·fake with ε broadcast per pair (ε=1 is the real
    sample, ε=0 the fake)."""
    eps = np.asarray(eps, dtype=real.dtype).reshape(real.shape[0], 1)
    return eps * real + (1.0 - eps) * fake


def wgan_gp_loss(critic: CriticMlp, real, fake, lambda_gp: float = 10.0,
                 rng: np.random.Generator | None = None, eps=None) -> Tensor:
    """Critic loss: mean D(fake) − mean D(real) + λ·mean((‖∇D(x̂)‖₂ − 1)²)
    with x̂ = ε·real + (1−ε)·fake, ε uniform per pair."""
    real_a = np.asarray(getattr(real, "data", real), dtype=T.default_dtype())
    fake_a = np.asarray(getattr(fake, "data", fake), dtype=T.default_dtype())
    if real_a.shape != fake_a.shape or real_a.ndim != 2 or real_a.shape[0] < 1:
        raise ContractError(f"real/fake batches must be equal [B,12] shapes, "
                            f"got {real_a.shape} vs {fake_a.shape}")
    if eps is None:
        rng = rng or np.random.default_rng(0)
        eps = rng.uniform(size=(real_a.shape[0], 1))
    xhat = Tensor(interpolate(real_a, fake_a, eps))

    wasserstein = T.reduce_mean(critic(Tensor(fake_a))) - T.reduce_mean(critic(Tensor(real_a)))
    if not np.isfinite(wasserstein.data):
        raise FloatingPointError("critic produced a non-finite score")
    grad = critic.input_gradient(xhat)                      # [B,12]
    norms = T.sqrt(T.reduce_sum(grad * grad, axis=1))       # [B]
    penalty = T.reduce_mean((norms - 1.0) * (norms - 1.0))
    return wasserstein + lambda_gp * penalty


# -- generator ---------------------------------------------------------------

class JointRegressor:
    """Conv stack over the 4-channel stack, flattened and mapped to 12
    sigmoid outputs.

    The features are flattened rather than globally averaged: average
    pooling is translation-invariant, which is exactly the wrong property
    when the output is a coordinate.
    """

    def __init__(self, h: int = 64, w: int = 64, widths=(8, 16, 32),
                 mlp_hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        w1, w2, w3 = widths
        self.h, self.w = h, w
        self.convs = [Conv2d(4, w1, kernel=3, stride=2, padding=1, rng=rng),
                      Conv2d(w1, w2, kernel=3, stride=2, padding=1, rng=rng),
                      Conv2d(w2, w3, kernel=3, stride=2, padding=1, rng=rng)]
        sh, sw = h, w
        for _ in self.convs:
            sh = (sh + 2 - 3) // 2 + 1
            sw = (sw + 2 - 3) // 2 + 1
        self.feat_dim = w3 * sh * sw
        self.widths = tuple(widths)
        self.mlp_hidden = mlp_hidden
        self.fc1 = Linear(self.feat_dim, mlp_hidden, rng=rng)
        self.fc2 = Linear(mlp_hidden, 12, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        """[B,4,H,W] -> [B,12] in (0,1)."""
        if x.data.ndim != 4 or x.shape[1] != 4:
            raise ContractError(f"generator expects [B,4,H,W] input, got {x.shape}")
        a = x
        for conv in self.convs:
            a = T.tanh(conv(a))
        a = T.reshape(a, (x.shape[0], self.feat_dim))
        return T.sigmoid(self.fc2(T.tanh(self.fc1(a))))

    def params(self, prefix: str = "gen.") -> dict:
        out = {}
        for i, conv in enumerate(self.convs):
            out.update(conv.params(f"{prefix}conv{i}."))
        out.update(self.fc1.params(f"{prefix}fc1."))
        out.update(self.fc2.params(f"{prefix}fc2."))
        return out

    def save(self, directory):
        directory = Path(directory)
        save_checkpoint(directory, self.params())
        meta = {"h": self.h, "w": self.w, "widths": ",".join(map(str, self.widths)),
                "mlp_hidden": self.mlp_hidden}
        atomic_write_text(directory / "net_config.txt",
                          "".join(f"{k}={v}\n" for k, v in meta.items()))

    @classmethod
    def load(cls, directory) -> "JointRegressor":
        directory = Path(directory)
        cfg = dict(line.split("=", 1) for line in
                   (directory / "net_config.txt").read_text().splitlines() if line.strip())
        gen = cls(h=int(cfg["h"]), w=int(cfg["w"]),
                  widths=tuple(int(v) for v in cfg["widths"].split(",")),
                  mlp_hidden=int(cfg["mlp_hidden"]))
        stored = load_checkpoint(directory)
        own = gen.params()
        for name, arr in stored.items():
            own[name].data = arr.astype(own[name].data.dtype).reshape(own[name].shape)
        return gen


def regress_joints(generator: JointRegressor, stack) -> JointSet:
    """Refine one [4,H,W] image+heatmap stack into joint coordinates."""
    stack = np.asarray(stack, dtype=np.float32)
    if stack.ndim != 3 or stack.shape[0] != 4:
        raise ContractError(f"regress_joints expects a [4,H,W] stack, got {stack.shape}")
    with T.no_grad():
        out = generator(Tensor(stack[None]))
    return JointSet(np.clip(out.data[0].astype(np.float64), 0.0, 1.0))


# -- training -----------------------------------------------------------------

def pretrain_generator(generator: JointRegressor, samples, epochs: int,
                       lr: float = 1e-3, batch_size: int = 8, seed: int = 0,
                       log=None) -> list:
    """Supervised mean-squared-error warm start on a small labeled subset."""
    samples = list(samples)
    if not samples:
        raise ContractError("pretrain subset is empty")
    rng = np.random.default_rng(seed)
    stacks = np.stack([s.stacked() for s in samples]).astype(np.float32)
    truths = np.stack([s.truth.coords for s in samples]).astype(np.float32)
    opt = Adam(generator.params(), lr=lr)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(samples))
        total = 0.0
        for i in range(0, len(samples), batch_size):
            idx = order[i:i + batch_size]
            opt.zero_grad()
            pred = generator(Tensor(stacks[idx]))
            loss = T.reduce_mean((pred - truths[idx]) * (pred - truths[idx]))
            total += loss.item() * len(idx)
            T.backward(loss)
            opt.step()
        history.append(total / len(samples))
        if log:
            log(f"pretrain epoch {epoch + 1}/{epochs} mse {history[-1]:.6f}")
    return history


def train_gan(samples, cfg: GanConfig, generator: JointRegressor | None = None,
              seed: int = 0, log=None) -> tuple:
    """Alternating WGAN-GP training: ``cfg.n_critic`` critic updates per
    generator update, Adam(β1, β2) on both sides.

    Returns (generator, critic, history).
    """
    samples = list(samples)
    if not samples:
        raise ContractError("GAN dataset is empty")
    rng = np.random.default_rng(seed)
    h, w = samples[0].image.shape[1:]
    generator = generator or JointRegressor(h=h, w=w, seed=seed)
    critic = CriticMlp(seed=seed + 1)
    stacks = np.stack([s.stacked() for s in samples]).astype(np.float32)
    reals = np.stack([s.truth.coords for s in samples]).astype(np.float32)

    opt_g = Adam(generator.params(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    opt_c = Adam(critic.params(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    history = {"critic_loss": [], "generator_loss": []}

    def sample_batch():
        idx = rng.integers(0, len(samples), size=min(cfg.batch_size, len(samples)))
        return stacks[idx], reals[idx]

    steps_per_epoch = max(1, len(samples) // max(cfg.batch_size, 1))
    for epoch in range(cfg.epochs):
        c_losses, g_losses = [], []
        for _ in range(steps_per_epoch):
            for _ in range(cfg.n_critic):
                batch_x, batch_q = sample_batch()
                with T.no_grad():
                    fake = generator(Tensor(batch_x)).data
                opt_c.zero_grad()
                loss_c = wgan_gp_loss(critic, batch_q, fake, cfg.lambda_gp, rng=rng)
                if abs(loss_c.item()) > 1e6:
                    raise FloatingPointError(f"critic loss diverged: {loss_c.item():.3e}")
                T.backward(loss_c)
                opt_c.step()
                c_losses.append(loss_c.item())
            batch_x, _ = sample_batch()
            opt_g.zero_grad()
            opt_c.zero_grad()
            loss_g = -T.reduce_mean(critic(generator(Tensor(batch_x))))
            T.backward(loss_g)
            opt_g.step()
            opt_c.zero_grad()  # drop critic grads picked up through D(G(I))
            g_losses.append(loss_g.item())
        history["critic_loss"].append(float(np.mean(c_losses)))
        history["generator_loss"].append(float(np.mean(g_losses)))
        if log:
            log(f"gan epoch {epoch + 1}/{cfg.epochs} critic {history['critic_loss'][-1]:+.4f} "
                f"gen {history['generator_loss'][-1]:+.4f}")
    return generator, critic, history


def evaluate_generator(generator: JointRegressor, samples) -> float:
    """Mean joint error (px) of the refined coordinates over a sample set."""
    errors = []
    h, w = samples[0].image.shape[1:]
    for s in samples:
        pred = regress_joints(generator, s.stacked())
        errors.append(mean_joint_error_px(pred, s.truth, h, w))
    return float(np.mean(errors))


def evaluate_argmax_baseline(samples, radius_px: int = 8) -> float:
    errors = []
    h, w = samples[0].image.shape[1:]
    for s in samples:
        pred = argmax_decode_near_truth(s.heatmap, s.truth, radius_px)
        errors.append(mean_joint_error_px(pred, s.truth, h, w))
    return float(np.mean(errors))


# -- heatmap dataset persistence ---------------------------------------------

def save_heatmap_set(directory, samples):
    """images.fgt [N,3,H,W], heatmaps.fgt [N,1,H,W], truth.csv (id, 12 coords)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_fgt(directory / "images.fgt", np.stack([s.image for s in samples]))
    write_fgt(directory / "heatmaps.fgt", np.stack([s.heatmap for s in samples]))
    rows = [",".join([str(i)] + [f"{v:.8f}" for v in s.truth.coords])
            for i, s in enumerate(samples)]
    atomic_write_text(directory / "truth.csv", "\n".join(rows) + "\n")


def load_heatmap_set(directory) -> list:
    directory = Path(directory)
    images = read_fgt(directory / "images.fgt")
    heatmaps = read_fgt(directory / "heatmaps.fgt")
    samples = []
    for line in (directory / "truth.csv").read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split(",")
        i = int(parts[0])
        samples.append(HeatmapSample(images[i], heatmaps[i],
                                     JointSet([float(v) for v in parts[1:]])))
    return samples
