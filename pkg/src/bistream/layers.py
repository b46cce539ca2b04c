"""Trainable layers and optimization: conv2d, linear, LSTM cell, the
softmax cross-entropy loss, Adam, and gradient accumulation."""

from __future__ import annotations

import warnings

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor


def xavier_uniform(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Conv2d:
    """2-D cross-correlation layer with bias."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        fan_out = out_ch * kernel * kernel
        self.weight = Tensor(xavier_uniform((out_ch, in_ch, kernel, kernel), fan_in, fan_out, rng),
                             requires_grad=True, name="weight")
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True, name="bias")
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def params(self, prefix: str = "") -> dict:
        return {prefix + "weight": self.weight, prefix + "bias": self.bias}


class Linear:
    """Affine map: x [in] -> [out], or batched [B,in] -> [B,out]."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        rng = rng or np.random.default_rng(0)
        w = np.zeros((out_dim, in_dim)) if zero_init \
            else xavier_uniform((out_dim, in_dim), in_dim, out_dim, rng)
        self.weight = Tensor(w, requires_grad=True, name="weight")
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True, name="bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim == 1:
            return T.matmul(self.weight, x) + self.bias
        if x.data.ndim == 2:
            return T.matmul(x, T.transpose(self.weight)) + self.bias
        raise ContractError(f"Linear expects 1-D or 2-D input, got {x.shape}")

    def params(self, prefix: str = "") -> dict:
        return {prefix + "weight": self.weight, prefix + "bias": self.bias}


class LstmCell:
    """Single LSTM cell; gate order (input, forget, cell, output).

    The forget-gate bias starts at 1 so early training passes state through.
    """

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        h = hidden_dim
        self.hidden_dim = h
        self.input_dim = input_dim
        self.w_x = Tensor(xavier_uniform((4 * h, input_dim), input_dim, h, rng),
                          requires_grad=True, name="w_x")
        self.w_h = Tensor(xavier_uniform((4 * h, h), h, h, rng),
                          requires_grad=True, name="w_h")
        bias = np.zeros(4 * h)
        bias[h:2 * h] = 1.0
        self.bias = Tensor(bias, requires_grad=True, name="bias")

    def initial_state(self) -> tuple:
        z = np.zeros(self.hidden_dim)
        return Tensor(z), Tensor(z.copy())

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> tuple:
        if x.shape != (self.input_dim,) or h.shape != (self.hidden_dim,):
            raise ContractError(f"lstm_step shapes: x {x.shape} (want [{self.input_dim}]), "
                                f"h {h.shape} (want [{self.hidden_dim}])")
        hd = self.hidden_dim
        pre = T.matmul(self.w_x, x) + T.matmul(self.w_h, h) + self.bias
        i_gate = T.sigmoid(pre[0:hd])
        f_gate = T.sigmoid(pre[hd:2 * hd])
        candidate = T.tanh(pre[2 * hd:3 * hd])
        o_gate = T.sigmoid(pre[3 * hd:4 * hd])
        c_next = f_gate * c + i_gate * candidate
        h_next = o_gate * T.tanh(c_next)
        return h_next, c_next

    def params(self, prefix: str = "") -> dict:
        return {prefix + "w_x": self.w_x, prefix + "w_h": self.w_h, prefix + "bias": self.bias}


def softmax_cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label], computed via stable logsumexp."""
    if logits.data.ndim != 1 or logits.data.size < 2:
        raise ContractError(f"softmax_cross_entropy expects a logit vector [K>=2], got {logits.shape}")
    k = logits.data.size
    if not 0 <= label < k:
        raise ContractError(f"label {label} out of range [0,{k})")
    x = logits.data
    m = x.max()
    lse = m + np.log(np.exp(x - m).sum())
    out = np.asarray(lse - x[label], dtype=x.dtype)

    def bwd(g):
        p = np.exp(x - lse)
        p[label] -= 1.0
        return (g * p,)

    return T._make(out, (logits,), bwd)


class Adam:
    """Adam with bias correction; state keyed by parameter identity."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {name: np.zeros_like(p.data, dtype=np.float64) for name, p in self.params.items()}
        self._v = {name: np.zeros_like(p.data, dtype=np.float64) for name, p in self.params.items()}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data = p.data - (self.lr * update).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def accumulate_gradients(samples, loss_fn, optimizer: Adam, accumulation_size: int = 12):
    """Average per-sample gradients over virtual mini-batches of
    ``accumulation_size``, taking one optimizer step per batch.

    ``loss_fn(sample)`` must return a scalar loss tensor. A trailing
    remainder smaller than the batch still triggers a final averaged step.
    Returns the per-sample loss values.
    """
    if accumulation_size < 1:
        raise ContractError("accumulation_size must be >= 1")
    samples = list(samples)
    if not samples:
        warnings.warn("accumulate_gradients called with an empty batch; no step taken")
        return []
    losses = []
    pending = 0
    optimizer.zero_grad()
    for sample in samples:
        loss = loss_fn(sample)
        losses.append(loss.item())
        T.backward(loss)
        pending += 1
        if pending == accumulation_size:
            _apply_averaged_step(optimizer, pending)
            pending = 0
    if pending:
        _apply_averaged_step(optimizer, pending)
    return losses


def _apply_averaged_step(optimizer: Adam, count: int):
    for p in optimizer.params.values():
        if p.grad is not None:
            p.grad /= count
    optimizer.step()
    optimizer.zero_grad()
