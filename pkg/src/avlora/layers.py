"""Neural layers on the autodiff tape: linear (with a low-rank delta slot),
layer/channel norm, 1-D conv, multi-head attention, feed-forward.

Every parameter is a named, role-tagged `Tensor`; models assemble their
named-parameter tables from `params` lists in construction order.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Linear:
    """y = x @ W (+ b), with an optional low-rank delta applied per call.

    The delta (when given) contributes scale * (x @ A^T) @ B^T, i.e. the
    adapter path B(Ax) without touching W.
    """

    def __init__(self, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, role: str, bias: bool = True,
                 init_std: float | None = None):
        std = init_std if init_std is not None else 1.0 / math.sqrt(d_in)
        self.name = name
        self.d_in, self.d_out = d_in, d_out
        if std == 0.0:
            w = np.zeros((d_in, d_out), dtype=np.float32)
        else:
            w = rng.normal(0.0, std, (d_in, d_out))
        self.w = Tensor(w, requires_grad=True, name=f"{name}.w", role=role)
        self.b = None
        if bias:
            self.b = Tensor(np.zeros(d_out, dtype=np.float32),
                            requires_grad=True, name=f"{name}.b", role=role)

    @property
    def params(self) -> list[Tensor]:
        return [self.w] if self.b is None else [self.w, self.b]

    def __call__(self, x: Tensor, delta=None) -> Tensor:
        y = ad.matmul(x, self.w)
        if self.b is not None:
            y = ad.add(y, self.b)
        if delta is not None:
            lo = ad.matmul(x, ad.transpose(delta.a, (1, 0)))
            y = ad.add(y, ad.mul(ad.matmul(lo, ad.transpose(delta.b, (1, 0))),
                                 delta.scale))
        return y


class LayerNorm:
    """Normalize the last axis, learned scale/shift."""

    def __init__(self, name: str, dim: int, role: str):
        self.gamma = Tensor(np.ones(dim, dtype=np.float32),
                            requires_grad=True, name=f"{name}.g", role=role)
        self.beta = Tensor(np.zeros(dim, dtype=np.float32),
                           requires_grad=True, name=f"{name}.b", role=role)

    @property
    def params(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class ChannelNorm:
    """Per-channel normalization over time for (B, C, T) activations.

    Batch-free (statistics are per sample, per channel), so inference is
    deterministic regardless of batching.
    """

    def __init__(self, name: str, channels: int, role: str):
        self.gamma = Tensor(np.ones((channels, 1), dtype=np.float32),
                            requires_grad=True, name=f"{name}.g", role=role)
        self.beta = Tensor(np.zeros((channels, 1), dtype=np.float32),
                           requires_grad=True, name=f"{name}.b", role=role)

    @property
    def params(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta)


class Conv1d:
    """1-D convolution over (B, C, T) with kernel 3 defaults."""

    def __init__(self, name: str, c_in: int, c_out: int,
                 rng: np.random.Generator, role: str, kernel: int = 3,
                 stride: int = 1, padding: int = 1):
        std = 1.0 / math.sqrt(c_in * kernel)
        self.stride, self.padding = stride, padding
        self.w = Tensor(rng.normal(0.0, std, (c_out, c_in, kernel)),
                        requires_grad=True, name=f"{name}.w", role=role)
        self.b = Tensor(np.zeros(c_out, dtype=np.float32),
                        requires_grad=True, name=f"{name}.b", role=role)

    @property
    def params(self) -> list[Tensor]:
        return [self.w, self.b]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv1d(x, self.w, self.b, self.stride, self.padding)


class MultiHeadAttention:
    """Scaled dot-product attention with distinct named q/k/v/o linears.

    The four projections are the adapter injection sites; `deltas` maps a
    projection's layer name to its low-rank delta.
    """

    def __init__(self, name: str, d_model: int, n_heads: int,
                 rng: np.random.Generator, role: str):
        if d_model % n_heads:
            raise ValueError("d_model must divide evenly into heads")
        self.name = name
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.q = Linear(f"{name}.q", d_model, d_model, rng, role)
        self.k = Linear(f"{name}.k", d_model, d_model, rng, role, bias=False)
        self.v = Linear(f"{name}.v", d_model, d_model, rng, role)
        self.o = Linear(f"{name}.o", d_model, d_model, rng, role)
        self._scale = 1.0 / math.sqrt(self.d_head)

    @property
    def projections(self) -> tuple[Linear, Linear, Linear, Linear]:
        return (self.q, self.k, self.v, self.o)

    @property
    def params(self) -> list[Tensor]:
        return [p for lin in self.projections for p in lin.params]

    def _split(self, x: Tensor, B: int, T: int) -> Tensor:
        h, dh = self.n_heads, self.d_head
        return ad.transpose(ad.reshape(x, (B, T, h, dh)), (0, 2, 1, 3))

    def __call__(self, x_q: Tensor, x_kv: Tensor,
                 mask: np.ndarray | None = None, deltas=None) -> Tensor:
        deltas = deltas or {}
        B, Tq, D = x_q.shape
        Tk = x_kv.shape[1]
        q = self._split(self.q(x_q, deltas.get(self.q.name)), B, Tq)
        k = self._split(self.k(x_kv, deltas.get(self.k.name)), B, Tk)
        v = self._split(self.v(x_kv, deltas.get(self.v.name)), B, Tk)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), self._scale)
        if mask is not None:
            scores = ad.add(scores, mask)
        ctx = ad.matmul(ad.softmax(scores), v)                 # (B,h,Tq,dh)
        merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, Tq, D))
        return self.o(merged, deltas.get(self.o.name))


class FeedForward:
    """Position-wise GELU MLP."""

    def __init__(self, name: str, d_model: int, d_ff: int,
                 rng: np.random.Generator, role: str):
        self.w1 = Linear(f"{name}.w1", d_model, d_ff, rng, role)
        self.w2 = Linear(f"{name}.w2", d_ff, d_model, rng, role)

    @property
    def params(self) -> list[Tensor]:
        return self.w1.params + self.w2.params

    def __call__(self, x: Tensor) -> Tensor:
        return self.w2(ad.gelu(self.w1(x)))


def sinusoidal_positions(n: int, dim: int) -> np.ndarray:
    """Standard fixed sin/cos position table, (n, dim) float32."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (i // 2) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(np.float32)


def causal_mask(n: int) -> np.ndarray:
    """(1, 1, n, n) additive mask: -1e9 above the diagonal."""
    m = np.triu(np.full((n, n), -1e9, dtype=np.float32), k=1)
    return m[None, None]
