"""Attention mechanisms: the embedded-Gaussian non-local block over
space-time positions, per-frame temporal attention over LSTM hidden
states, feature-map heatmap extraction, and the gamma ramp schedule."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .layers import xavier_uniform
from .io import atomic_write_bytes
from .tensor import ContractError, Tensor


class NonLocalBlock:
    """Residual self-attention over every space-time position of [T,C,H,W].

    theta/phi/g are 1x1 convolutions C -> C/2 (stored as plain matrices,
    which is what a 1x1 conv is per position); w_z maps C/2 back to C.
    ``gamma`` scales the residual branch and is schedule-driven, not
    trained: gamma = 0 leaves the wrapped network exactly intact.

    w_z starts at zero so the branch also contributes nothing at the
    moment the gamma ramp switches on, instead of perturbing a converged
    network with random features.
    """

    def __init__(self, channels: int, rng: np.random.Generator | None = None):
        if channels % 2 != 0:
            raise ContractError(f"non-local block needs an even channel count, got {channels}")
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        emb = channels // 2
        self.theta = Tensor(xavier_uniform((channels, emb), channels, emb, rng),
                            requires_grad=True, name="theta")
        self.phi = Tensor(xavier_uniform((channels, emb), channels, emb, rng),
                          requires_grad=True, name="phi")
        self.g = Tensor(xavier_uniform((channels, emb), channels, emb, rng),
                        requires_grad=True, name="g")
        self.w_z = Tensor(np.zeros((emb, channels)), requires_grad=True, name="w_z")
        self.gamma = 0.0

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4:
            raise ContractError(f"non-local block expects [T,C,H,W], got {x.shape}")
        t, c, h, w = x.shape
        if c != self.channels:
            raise ContractError(f"non-local block built for C={self.channels}, got C={c}")
        if self.gamma == 0.0:
            return x  # exact identity; the branch gradient is zero anyway
        n = t * h * w
        # positions as rows: [N, C]
        flat = T.reshape(T.transpose(x, (0, 2, 3, 1)), (n, c))
        q = T.matmul(flat, self.theta)                       # [N, C/2]
        k = T.matmul(flat, self.phi)                         # [N, C/2]
        v = T.matmul(flat, self.g)                           # [N, C/2]
        attn = T.softmax(T.matmul(q, T.transpose(k)), axis=1)
        y = T.matmul(attn, v)                                # [N, C/2]
        z = T.matmul(y, self.w_z)                            # [N, C]
        z = T.transpose(T.reshape(z, (t, h, w, c)), (0, 3, 1, 2))
        return x + self.gamma * z

    def params(self, prefix: str = "") -> dict:
        return {prefix + "theta": self.theta, prefix + "phi": self.phi,
                prefix + "g": self.g, prefix + "w_z": self.w_z}


class TemporalAttention:
    """Softmax-weighted average of LSTM hidden states.

    A single linear map scores each hidden vector; the weights form a
    probability distribution over frames.
    """

    def __init__(self, hidden_dim: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.hidden_dim = hidden_dim
        # no score bias: softmax is shift-invariant, so one would never train
        self.weight = Tensor(xavier_uniform((hidden_dim,), hidden_dim, 1, rng),
                             requires_grad=True, name="weight")

    def __call__(self, hidden_states) -> Tensor:
        if len(hidden_states) == 0:
            raise ContractError("temporal attention needs at least one hidden state")
        n = len(hidden_states)
        stacked = T.concat([T.reshape(h, (1, self.hidden_dim)) for h in hidden_states], axis=0)
        scores = T.matmul(stacked, self.weight)  # [T]
        weights = T.softmax(scores, axis=0)
        return T.matmul(T.reshape(weights, (1, n)), stacked)[0]

    def frame_weights(self, hidden_states) -> np.ndarray:
        """The attention distribution itself, for inspection."""
        with T.no_grad():
            stacked = T.concat([T.reshape(h, (1, self.hidden_dim)) for h in hidden_states], axis=0)
            return T.softmax(T.matmul(stacked, self.weight), axis=0).data

    def params(self, prefix: str = "") -> dict:
        return {prefix + "weight": self.weight}


def gamma_schedule(epoch_in_ramp: int, ramp_epochs: int) -> float:
    """Residual-branch weight during the attention ramp phase.

    Before the ramp (negative epoch) the weight is 0; at ramp start it is
    0.1 and it climbs linearly to 1 by the final ramp epoch.
    """
    if ramp_epochs < 1:
        raise ContractError("ramp_epochs must be >= 1")
    if epoch_in_ramp < 0:
        return 0.0
    if ramp_epochs == 1:
        return 1.0
    return min(1.0, 0.1 + 0.9 * (epoch_in_ramp / (ramp_epochs - 1)))


def attention_heatmap(features) -> np.ndarray:
    """Collapse [C,H,W] features to a [H,W] saliency map.

    Per-pixel value is the channel-wise sum of absolute activations,
    min-max normalized to [0,1]; an all-zero input stays all-zero.
    """
    data = getattr(features, "data", features)
    data = np.asarray(data)
    if data.ndim != 3:
        raise ContractError(f"attention_heatmap expects [C,H,W], got {data.shape}")
    acc = np.abs(data).sum(axis=0)
    lo, hi = acc.min(), acc.max()
    if hi - lo < 1e-30:
        return np.zeros_like(acc)
    return (acc - lo) / (hi - lo)


def write_pgm(path, heatmap: np.ndarray) -> None:
    """Export a [H,W] map in [0,1] as binary 8-bit PGM (P5)."""
    hm = np.asarray(heatmap)
    if hm.ndim != 2:
        raise ContractError(f"write_pgm expects a 2-D map, got shape {hm.shape}")
    scaled = np.clip(np.round(hm * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{hm.shape[1]} {hm.shape[0]}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + scaled.tobytes())
