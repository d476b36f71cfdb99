"""Reverse-mode automatic differentiation on float32 numpy arrays.

A small tape: each `Tensor` remembers its parents and a hand-written
vector-Jacobian product. `backward()` on a scalar walks the graph in
reverse topological order. Only the primitives this package needs are
implemented (matmul, conv1d, layernorm, softmax families, gelu, ...),
each one checked against central finite differences in the test suite.

All math is float32; gradients are float32. Graph recording can be
switched off with `no_grad()` for inference.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

F32 = np.float32

_grad_enabled = True
_f64_forward = False


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward-only, faster)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def float64_forward():
    """Evaluate forward passes in float64 (oracle mode).

    Parameters stay float32; operands and intermediates are upcast so no
    rounding happens after the stored parameter values. Used by the
    finite-difference checker so the probe is not limited by float32
    forward noise. Implies no_grad: this mode is for value oracles only.
    """
    global _f64_forward, _grad_enabled
    prev, prev_grad = _f64_forward, _grad_enabled
    _f64_forward, _grad_enabled = True, False
    try:
        yield
    finally:
        _f64_forward, _grad_enabled = prev, prev_grad


def grad_enabled() -> bool:
    return _grad_enabled


def _as_f32(x) -> np.ndarray:
    """Arrays are float32; 0-d scalars stay float64.

    Scalar outputs (losses) keep full precision so finite-difference
    probes are not quantized by a final float32 rounding; every array on
    the tape, including every gradient, remains float32.
    """
    a = np.asarray(x)
    if a.ndim == 0:
        return a.astype(np.float64) if a.dtype != np.float64 else a
    if _f64_forward:
        return a.astype(np.float64) if a.dtype != np.float64 else a
    if a.dtype != F32:
        a = a.astype(F32)
    return a


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float32 array plus the tape hooks needed for backprop.

    Parameters (leaves created with requires_grad=True) accumulate into
    `.grad`. `name` and `role` tag model parameters for checkpointing and
    the frozen/trainable bookkeeping; they are ignored by the math.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "role", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False,
                 name: str = "", role: str = ""):
        self.data = _as_f32(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.role = role
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    # -- plumbing ----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def backward(self) -> None:
        """Backpropagate from a scalar output.

        Accumulates into `.grad` of every reachable tensor with
        requires_grad=True.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


TensorLike = Tensor | np.ndarray | float | int


def _wrap(x: TensorLike) -> Tensor:
    if isinstance(x, Tensor):
        if _f64_forward and x.data.dtype == F32:
            return Tensor(x.data)   # upcast copy; oracle mode records no graph
        return x
    return Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor],
          vjp: Callable[[np.ndarray], tuple]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._vjp is not None for p in parents):
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# -- arithmetic --------------------------------------------------------------
#
# Python-number operands are kept as weak scalars (never wrapped into 0-d
# tensors), so multiplying a float32 array by a float stays float32.


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.integer, np.floating))


def add(a: TensorLike, b: TensorLike) -> Tensor:
    if _is_number(b):
        a = _wrap(a)
        return _make(a.data + b, (a,), lambda g: (g,))
    if _is_number(a):
        return add(b, a)
    a, b = _wrap(a), _wrap(b)
    data = a.data + b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                          _unbroadcast(g, b.shape)))


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    if _is_number(b):
        a = _wrap(a)
        return _make(a.data - b, (a,), lambda g: (g,))
    if _is_number(a):
        b = _wrap(b)
        return _make(a - b.data, (b,), lambda g: (-g,))
    a, b = _wrap(a), _wrap(b)
    data = a.data - b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                          _unbroadcast(-g, b.shape)))


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    if _is_number(b):
        a = _wrap(a)
        return _make(a.data * b, (a,), lambda g: (g * b,))
    if _is_number(a):
        return mul(b, a)
    a, b = _wrap(a), _wrap(b)
    data = a.data * b.data
    return _make(data, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                          _unbroadcast(g * a.data, b.shape)))


def div(a: TensorLike, b: TensorLike) -> Tensor:
    if _is_number(b):
        return mul(a, 1.0 / b)
    if _is_number(a):
        b = _wrap(b)
        data = a / b.data
        return _make(data, (b,), lambda g: (-g * a / (b.data * b.data),))
    a, b = _wrap(a), _wrap(b)
    data = a.data / b.data
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def pow_(a: TensorLike, p: float) -> Tensor:
    a = _wrap(a)
    data = a.data ** F32(p)
    return _make(data, (a,), lambda g: (g * F32(p) * a.data ** F32(p - 1),))


def exp(a: TensorLike) -> Tensor:
    a = _wrap(a)
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def log(a: TensorLike) -> Tensor:
    a = _wrap(a)
    data = np.log(a.data)
    return _make(data, (a,), lambda g: (g / a.data,))


def abs_(a: TensorLike) -> Tensor:
    a = _wrap(a)
    data = np.abs(a.data)
    return _make(data, (a,), lambda g: (g * np.sign(a.data),))


def relu(a: TensorLike) -> Tensor:
    a = _wrap(a)
    data = np.maximum(a.data, 0.0)
    return _make(data, (a,), lambda g: (g * (a.data > 0),))


_INV_SQRT2 = F32(1.0 / math.sqrt(2.0))
_INV_SQRT2PI = F32(1.0 / math.sqrt(2.0 * math.pi))


def gelu(a: TensorLike) -> Tensor:
    """Exact GELU x*Phi(x); derivative Phi(x) + x*phi(x)."""
    a = _wrap(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    if not _f64_forward:
        cdf = cdf.astype(F32)
    data = x * cdf

    def vjp(g):
        pdf = np.exp(F32(-0.5) * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _make(data, (a,), vjp)


# -- shape manipulation -------------------------------------------------------


def reshape(a: TensorLike, shape) -> Tensor:
    a = _wrap(a)
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: TensorLike, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = a.data.transpose(axes)
    return _make(data, (a,), lambda g: (g.transpose(inv),))


def take(a: TensorLike, idx) -> Tensor:
    """Basic slicing / integer indexing; backward scatter-adds."""
    a = _wrap(a)
    data = a.data[idx]

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(data, (a,), vjp)


def concat(parts: Iterable[TensorLike], axis: int = 0) -> Tensor:
    parts = [_wrap(p) for p in parts]
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        sl = [slice(None)] * g.ndim
        outs = []
        for i in range(len(parts)):
            sl[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return _make(data, tuple(parts), vjp)


# -- reductions ---------------------------------------------------------------


def sum_(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None and not keepdims:
        data = a.data.sum(dtype=np.float64)   # full-precision scalar
    else:
        data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(F32),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).astype(F32),)

    return _make(_as_f32(data), (a,), vjp)


def mean(a: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    count = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(sum_(a, axis, keepdims), 1.0 / float(count))


def mean_abs_error(a: TensorLike, b: TensorLike) -> Tensor:
    """Mean |a - b| over all elements."""
    return mean(abs_(sub(a, b)))


# -- linear algebra -----------------------------------------------------------


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """Matrix product with either operand optionally batched.

    Supported: (m,k)@(k,n), (...,m,k)@(k,n), (m,k)@(...,k,n), and equal
    leading batch dims on both sides.
    """
    a, b = _wrap(a), _wrap(b)
    data = a.data @ b.data

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return (_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape))

    return _make(data, (a, b), vjp)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather table[ids]; backward scatter-adds rows."""
    ids = np.asarray(ids)
    data = table.data[ids]

    def vjp(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids, g)
        return (out,)

    return _make(data, (table,), vjp)


# -- normalization / softmax --------------------------------------------------


def layer_norm(x: TensorLike, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale/shift.

    gamma/beta may be any shape broadcastable against the normalized x
    (e.g. (D,) for standard LN, (C,1) for per-channel norm over time).
    """
    x = _wrap(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + F32(eps))
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def vjp(g):
        ghat = g * gamma.data
        m1 = ghat.mean(axis=-1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
        dx = (ghat - m1 - xhat * m2) * inv
        dgamma = _unbroadcast(g * xhat, gamma.shape)
        dbeta = _unbroadcast(g, beta.shape)
        return (dx, dgamma, dbeta)

    return _make(data, (x, gamma, beta), vjp)


def softmax(x: TensorLike) -> Tensor:
    """Softmax over the last axis (shift-stable)."""
    x = _wrap(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (x,), vjp)


def log_softmax(x: TensorLike) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    data = z - lse
    sm = np.exp(data)

    def vjp(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _make(data, (x,), vjp)


# -- convolution --------------------------------------------------------------


def conv1d(x: TensorLike, w: Tensor, b: Tensor | None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution over the last axis.

    x: (B, C_in, T), w: (C_out, C_in, K), b: (C_out,) or None.
    Output (B, C_out, T_out) with T_out = floor((T + 2*padding - K)/stride) + 1.
    """
    x = _wrap(x)
    B, Cin, T = x.shape
    Cout, Cin_w, K = w.shape
    if Cin != Cin_w:
        raise ValueError(f"conv1d channel mismatch: {Cin} vs {Cin_w}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    Tp = xp.shape[-1]
    Tout = (Tp - K) // stride + 1
    if Tout < 1:
        raise ValueError(f"conv1d input too short: T={T}, K={K}, pad={padding}")
    win = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)  # (B,Cin,Tp-K+1,K)
    win = win[:, :, ::stride, :]                                   # (B,Cin,Tout,K)
    col = win.transpose(0, 2, 1, 3).reshape(B, Tout, Cin * K)
    wf = w.data.reshape(Cout, Cin * K)
    out = col @ wf.T                                               # (B,Tout,Cout)
    if b is not None:
        out = out + b.data
    data = np.ascontiguousarray(out.transpose(0, 2, 1))            # (B,Cout,Tout)

    def vjp(g):
        gt = g.transpose(0, 2, 1)                                  # (B,Tout,Cout)
        dw = np.tensordot(gt, col, axes=([0, 1], [0, 1]))          # (Cout,Cin*K)
        dcol = gt @ wf                                             # (B,Tout,Cin*K)
        dwin = dcol.reshape(B, Tout, Cin, K).transpose(0, 2, 1, 3)
        dxp = np.zeros((B, Cin, Tp), dtype=F32)
        for j in range(K):
            dxp[:, :, j:j + stride * Tout:stride] += dwin[:, :, :, j]
        dx = dxp[:, :, padding:Tp - padding] if padding else dxp
        grads = [dx, dw.reshape(w.shape)]
        if b is not None:
            grads.append(gt.sum(axis=(0, 1)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, vjp)


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adam with the repo-wide constants beta=(0.9, 0.98), eps=1e-9."""

    def __init__(self, params: Iterable[Tensor],
                 beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = F32(beta1), F32(beta2), F32(eps)
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = F32(1.0) - b1 ** self.t
        bc2 = F32(1.0) - b2 ** self.t
        lr = F32(lr)
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (F32(1.0) - b1) * g
            v *= b2
            v += (F32(1.0) - b2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
