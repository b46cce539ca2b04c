"""Minimal reverse-mode autodiff over dense numpy arrays.

Every trainable layer, loss and attention block in this package is built
from the primitives here. The recorded graph doubles as the tape: each
op-produced tensor keeps references to its parents and a closure that
scatters the incoming gradient back to them. ``backward`` replays that
tape once, in reverse topological order, then consumes it.

Two precisions are supported: float64 for finite-difference gradient
checking, float32 for training. Switch with :func:`use_dtype`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np


class ContractError(ValueError):
    """A caller violated an operation's documented precondition."""


class InternalError(RuntimeError):
    """The tape itself is inconsistent (should never happen via the public API)."""


_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_DEBUG_CHECK_FINITE = False


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily change the dtype newly created tensors default to."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; forward passes inside run tape-free."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def debug_checks(enabled: bool = True):
    """Assert every op output is finite (costly; for tests and debugging)."""
    global _DEBUG_CHECK_FINITE
    prev = _DEBUG_CHECK_FINITE
    _DEBUG_CHECK_FINITE = enabled
    try:
        yield
    finally:
        _DEBUG_CHECK_FINITE = prev


class Tensor:
    """A shaped real-valued array with optional gradient participation.

    ``data`` is always a numpy array. ``grad`` is filled by ``backward``
    for tensors with ``requires_grad`` and accumulates across calls until
    ``zero_grad`` (gradient accumulation relies on this).
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_bwd", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._bwd = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return narrow(self, idx)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def mean(self, axis=None):
        return reduce_mean(self, axis)

    def backward(self):
        return backward(self)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def _make(out_data: np.ndarray, parents: tuple, bwd) -> Tensor:
    """Record one primitive onto the tape (if grad is enabled anywhere upstream)."""
    if _DEBUG_CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise InternalError("non-finite value produced by a forward op")
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=requires, dtype=out_data.dtype)
    if requires:
        out._parents = parents
        out._bwd = bwd
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- tape --------------------------------------------------------------

def build_tape(loss: Tensor) -> list:
    """Topologically ordered list of recorded nodes reaching ``loss``.

    Parents always precede children; raises InternalError on a cycle.
    """
    order = []
    state = {}  # id -> 0 (visiting) / 1 (done)
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        nid = id(node)
        if processed:
            state[nid] = 1
            order.append(node)
            continue
        st = state.get(nid)
        if st == 1:
            continue
        if st == 0:
            raise InternalError("cycle in tape")
        state[nid] = 0
        stack.append((node, True))
        for p in node._parents:
            if p._bwd is not None or p.requires_grad:
                if state.get(id(p)) != 1:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Run reverse-mode accumulation from a scalar loss.

    Fills ``.grad`` on every ``requires_grad`` leaf (adding to any gradient
    already there) and returns ``{id(leaf): leaf}`` for the leaves reached.
    The tape is consumed: interior nodes drop their parent references.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not require grad (no recorded parameters reach it)")

    order = build_tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._bwd is not None:
            for parent, pg in zip(node._parents, node._bwd(g)):
                if pg is None or not (parent.requires_grad or parent._bwd is not None):
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
            node._parents = ()
            node._bwd = None
        elif node.requires_grad:
            _accum(node, g)
            leaves[id(node)] = node
    return leaves


# -- elementwise primitives ---------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    out = a.data * b.data

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype)
    out = a.data / b.data

    def bwd(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g / (2.0 * out),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # stable in both tails
    out = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                   np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    out = out.astype(a.data.dtype)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data).astype(a.data.dtype)

    def bwd(g):
        s = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                     np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
        return (g * s,)

    return _make(out, (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    a = _as_tensor(a)
    out = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), bwd)


# -- shape primitives ----------------------------------------------------

def reshape(a, *shape) -> Tensor:
    a = _as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), bwd)


def narrow(a, idx) -> Tensor:
    """Basic (slice/index) view as a differentiable op."""
    a = _as_tensor(a)
    out = a.data[idx]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _make(np.array(out, copy=True), (a,), bwd)


def reduce_sum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        ge = np.expand_dims(g, axis)
        return (np.broadcast_to(ge, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bwd)


def reduce_mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    out = a.data.mean(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, a.shape).copy(),)
        ge = np.expand_dims(g, axis) / n
        return (np.broadcast_to(ge, a.shape).copy(),)

    return _make(np.asarray(out), (a,), bwd)


def global_avg_pool(a) -> Tensor:
    """[B, C, H, W] -> [B, C], mean over the spatial dims."""
    a = _as_tensor(a)
    if a.data.ndim != 4:
        raise ContractError(f"global_avg_pool expects [B,C,H,W], got {a.shape}")
    hw = a.shape[2] * a.shape[3]
    out = a.data.mean(axis=(2, 3))

    def bwd(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, a.shape).copy(),)

    return _make(out, (a,), bwd)


# -- linear algebra -------------------------------------------------------

def matmul(a, b) -> Tensor:
    """2-D @ 2-D, 2-D @ 1-D or 1-D @ 2-D matrix product."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ContractError(f"matmul supports 1-D/2-D operands, got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return g @ bd.T, np.outer(ad, g)
        return g * bd, g * ad  # 1-D @ 1-D inner product

    return _make(np.asarray(out), (a, b), bwd)


def _im2col(xpad: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """[B, C, Hp, Wp] -> [B, C, k, k, oh, ow] gathered windows."""
    b, c = xpad.shape[:2]
    cols = np.empty((b, c, k, k, oh, ow), dtype=xpad.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xpad[:, :, ki:ki + stride * oh:stride,
                                      kj:kj + stride * ow:stride]
    return cols


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of [B,C,H,W] with [O,C,k,k] kernels plus bias."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ContractError(f"conv2d expects x [B,C,H,W] and weight [O,C,k,k], "
                            f"got {x.shape} and {weight.shape}")
    b, c, h, w = x.shape
    o, ci, k, k2 = weight.shape
    if ci != c or k != k2:
        raise ContractError(f"conv2d channel/kernel mismatch: x {x.shape} vs weight {weight.shape}")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ContractError(f"conv2d output would be {oh}x{ow} for input {h}x{w}, "
                            f"k={k} stride={stride} pad={padding}")

    xpad = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
        if padding else x.data
    cols = _im2col(xpad, k, stride, oh, ow)          # [B,C,k,k,oh,ow]
    cols2 = cols.reshape(b, c * k * k, oh * ow)
    wf = weight.data.reshape(o, c * k * k)
    out = np.einsum("oc,bcl->bol", wf, cols2, optimize=True)
    out = out.reshape(b, o, oh, ow)
    parents = [x, weight]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise ContractError(f"conv2d bias must be [{o}], got {bias.shape}")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def bwd(g):
        gf = g.reshape(b, o, oh * ow)
        gw = np.einsum("bol,bcl->oc", gf, cols2, optimize=True).reshape(weight.shape)
        gcols = np.einsum("oc,bol->bcl", wf, gf, optimize=True)
        gcols = gcols.reshape(b, c, k, k, oh, ow)
        gpad = np.zeros_like(xpad)
        for ki in range(k):
            for kj in range(k):
                gpad[:, :, ki:ki + stride * oh:stride,
                     kj:kj + stride * ow:stride] += gcols[:, :, ki, kj]
        gx = gpad[:, :, padding:padding + h, padding:padding + w] if padding else gpad
        if bias is not None:
            return gx, gw, g.sum(axis=(0, 2, 3))
        return gx, gw

    return _make(out, tuple(parents), bwd)


# -- gradient checking ----------------------------------------------------

def finite_diff_grad(f, x: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, coordinate by coordinate."""
    if h <= 0:
        raise ContractError("finite_diff_grad needs h > 0")
    base = x.data.copy()
    flat = base.reshape(-1)
    out = np.zeros_like(flat, dtype=np.float64)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            x.data = flat.reshape(base.shape)
            fp = float(f(x).data)
            flat[i] = orig - h
            x.data = flat.reshape(base.shape)
            fm = float(f(x).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                x.data = base
                raise ContractError(f"finite_diff_grad: non-finite f at coordinate {i}")
            out[i] = (fp - fm) / (2.0 * h)
    x.data = base
    return out.reshape(base.shape)


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_coord: int
    passed: bool
    coord_pass: np.ndarray

    def __bool__(self):
        return self.passed


def grad_check(f, x: Tensor, tol: float = 1e-4, h: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode against central finite differences at ``x``.

    Relative error per coordinate uses denominator max(|a|, |b|, 1e-8).
    """
    x.zero_grad()
    loss = f(x)
    backward(loss)
    if x.grad is None:
        analytic = np.zeros_like(x.data, dtype=np.float64)
    else:
        analytic = x.grad.astype(np.float64)
    x.zero_grad()
    numeric = finite_diff_grad(f, x, h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel))
    return GradCheckReport(
        max_rel_err=float(rel.reshape(-1)[worst]),
        worst_coord=worst,
        passed=bool(rel.max() <= tol),
        coord_pass=(rel <= tol),
    )
