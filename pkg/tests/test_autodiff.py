"""Finite-difference checks for every autodiff primitive."""

import numpy as np
import pytest

from avlora import autodiff as ad
from avlora.autodiff import Tensor


def fd_grad(make_loss, param: Tensor, n_probe: int = 12, eps: float = 1e-2,
            rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference grads.

    `make_loss` rebuilds the scalar loss from current parameter data.
    Probes up to n_probe randomly chosen coordinates of `param`.
    """
    rng = rng or np.random.default_rng(0)
    param.grad = None
    loss = make_loss()
    loss.backward()
    g = np.zeros_like(param.data) if param.grad is None else param.grad.copy()

    flat = param.data.reshape(-1)
    idxs = rng.choice(flat.size, size=min(n_probe, flat.size), replace=False)
    worst = 0.0
    for i in idxs:
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(make_loss().data)
        flat[i] = orig - eps
        lo = float(make_loss().data)
        flat[i] = orig
        g_fd = (hi - lo) / (2 * eps)
        g_an = float(g.reshape(-1)[i])
        err = abs(g_fd - g_an) / max(1e-6, abs(g_fd) + abs(g_an))
        worst = max(worst, err)
    return worst


RNG = np.random.default_rng(42)


def randt(*shape, scale=1.0):
    return Tensor(RNG.normal(0, scale, shape), requires_grad=True)


def check(make_loss, param, tol=2e-2, **kw):
    assert fd_grad(make_loss, param, **kw) <= tol


class TestElementwise:
    def test_add_broadcast(self):
        x, b = randt(3, 4), randt(4)
        r = RNG.normal(0, 1, (3, 4))
        check(lambda: ad.sum_(ad.add(x, b) * r), x)
        check(lambda: ad.sum_(ad.add(x, b) * r), b)

    def test_mul_sub_div(self):
        x, y = randt(5), randt(5, scale=0.5)
        y.data += 2.0  # keep divisor away from zero
        check(lambda: ad.sum_(ad.mul(x, y)), x)
        check(lambda: ad.sum_(ad.sub(x, y)), y)
        check(lambda: ad.sum_(ad.div(x, y)), x)
        check(lambda: ad.sum_(ad.div(x, y)), y, tol=3e-2)

    def test_exp_log_pow(self):
        x = randt(6, scale=0.3)
        check(lambda: ad.sum_(ad.exp(x)), x)
        xp = Tensor(np.abs(RNG.normal(2, 0.3, 6)), requires_grad=True)
        check(lambda: ad.sum_(ad.log(xp)), xp, eps=1e-3)
        check(lambda: ad.sum_(ad.pow_(xp, 3.0)), xp, tol=3e-2)

    def test_abs_relu_gelu(self):
        x = randt(50)
        x.data += np.sign(x.data) * 0.2  # keep clear of the kinks
        check(lambda: ad.sum_(ad.abs_(x)), x, eps=1e-3)
        check(lambda: ad.sum_(ad.relu(x)), x, eps=1e-3)
        check(lambda: ad.sum_(ad.gelu(x)), x)


class TestShapes:
    def test_reshape_transpose(self):
        x = randt(2, 3, 4)
        r = RNG.normal(0, 1, (4, 6))
        check(lambda: ad.sum_(ad.reshape(x, (4, 6)) * r), x)
        r2 = RNG.normal(0, 1, (4, 2, 3))
        check(lambda: ad.sum_(ad.transpose(x, (2, 0, 1)) * r2), x)

    def test_slicing(self):
        x = randt(4, 8)
        r = RNG.normal(0, 1, (4, 4))
        check(lambda: ad.sum_(x[:, ::2] * r), x)
        r3 = RNG.normal(0, 1, (2, 8))
        check(lambda: ad.sum_(x[1:3] * r3), x)

    def test_concat(self):
        a, b = randt(2, 3), randt(2, 5)
        r = RNG.normal(0, 1, (2, 8))
        check(lambda: ad.sum_(ad.concat([a, b], axis=1) * r), a)
        check(lambda: ad.sum_(ad.concat([a, b], axis=1) * r), b)

    def test_embedding(self):
        table = randt(10, 4)
        ids = np.array([[1, 3, 3], [0, 9, 1]])
        r = RNG.normal(0, 1, (2, 3, 4))
        check(lambda: ad.sum_(ad.embedding(table, ids) * r), table)


class TestReductions:
    def test_sum_axes(self):
        x = randt(3, 4, 5)
        r = RNG.normal(0, 1, (3, 5))
        check(lambda: ad.sum_(ad.sum_(x, axis=1) * r), x)
        rk = RNG.normal(0, 1, (3, 1, 5))
        check(lambda: ad.sum_(ad.sum_(x, axis=1, keepdims=True) * rk), x)

    def test_mean(self):
        x = randt(7, 3)
        check(lambda: ad.mean(x), x, eps=1e-3, tol=3e-2)
        r = RNG.normal(0, 1, 7)
        check(lambda: ad.sum_(ad.mean(x, axis=1) * r), x)

    def test_mean_abs_error(self):
        a, b = randt(5, 6), randt(5, 6)
        check(lambda: ad.mean_abs_error(a, b), a, eps=1e-3, tol=3e-2)
        check(lambda: ad.mean_abs_error(a, b), b, eps=1e-3, tol=3e-2)


class TestMatmul:
    def test_2d(self):
        a, b = randt(3, 4), randt(4, 5)
        r = RNG.normal(0, 1, (3, 5))
        check(lambda: ad.sum_(ad.matmul(a, b) * r), a)
        check(lambda: ad.sum_(ad.matmul(a, b) * r), b)

    def test_batched_times_2d(self):
        a, w = randt(2, 3, 4), randt(4, 5)
        r = RNG.normal(0, 1, (2, 3, 5))
        check(lambda: ad.sum_(ad.matmul(a, w) * r), a)
        check(lambda: ad.sum_(ad.matmul(a, w) * r), w)

    def test_batched_both(self):
        a, b = randt(6, 3, 4), randt(6, 4, 2)
        r = RNG.normal(0, 1, (6, 3, 2))
        check(lambda: ad.sum_(ad.matmul(a, b) * r), a)
        check(lambda: ad.sum_(ad.matmul(a, b) * r), b)


class TestNormSoftmax:
    def test_layer_norm(self):
        x, g, b = randt(4, 6), randt(6), randt(6)
        g.data += 1.0
        r = RNG.normal(0, 1, (4, 6))
        for p in (x, g, b):
            check(lambda: ad.sum_(ad.layer_norm(x, g, b) * r), p)

    def test_channel_norm_shapes(self):
        # per-channel norm over time: x (B,C,T), gamma (C,1)
        x, g, b = randt(2, 3, 8), randt(3, 1), randt(3, 1)
        r = RNG.normal(0, 1, (2, 3, 8))
        for p in (x, g, b):
            check(lambda: ad.sum_(ad.layer_norm(x, g, b) * r), p)

    def test_softmax(self):
        x = randt(5, 7)
        r = RNG.normal(0, 1, (5, 7))
        check(lambda: ad.sum_(ad.softmax(x) * r), x, tol=3e-2)
        rows = ad.softmax(x).data.sum(axis=-1)
        np.testing.assert_allclose(rows, 1.0, atol=1e-6)

    def test_log_softmax(self):
        x = randt(4, 9)
        r = RNG.normal(0, 1, (4, 9))
        check(lambda: ad.sum_(ad.log_softmax(x) * r), x, eps=1e-3, tol=3e-2)
        np.testing.assert_allclose(
            np.exp(ad.log_softmax(x).data).sum(axis=-1), 1.0, atol=1e-5)


class TestConv1d:
    @pytest.mark.parametrize("stride,padding,T", [(1, 1, 9), (2, 1, 9),
                                                  (1, 0, 7), (2, 1, 8)])
    def test_grads(self, stride, padding, T):
        x, w, b = randt(2, 3, T), randt(4, 3, 3, scale=0.5), randt(4)
        out_shape = ad.conv1d(x, w, b, stride, padding).shape
        r = RNG.normal(0, 1, out_shape)
        for p in (x, w, b):
            check(lambda: ad.sum_(ad.conv1d(x, w, b, stride, padding) * r), p)

    def test_shape_law(self):
        # kernel 3 / pad 1 / stride 2 halves length, rounding up
        w = randt(1, 1, 3)
        for T in range(2, 12):
            x = randt(1, 1, T)
            assert ad.conv1d(x, w, None, 2, 1).shape[-1] == -(-T // 2)

    def test_matches_direct_convolution(self):
        x, w, b = randt(1, 2, 8), randt(3, 2, 3), randt(3)
        got = ad.conv1d(x, w, b, stride=1, padding=1).data
        xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1)))
        want = np.zeros((1, 3, 8), dtype=np.float32)
        for co in range(3):
            for t in range(8):
                want[0, co, t] = (xp[0, :, t:t + 3] * w.data[co]).sum() + b.data[co]
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)


class TestPlumbing:
    def test_no_grad_blocks_graph(self):
        x = randt(3)
        with ad.no_grad():
            y = ad.sum_(ad.mul(x, x))
        assert y._vjp is None and y._parents == ()

    def test_grad_accumulates_over_reuse(self):
        x = randt(4)
        loss = ad.sum_(ad.add(ad.mul(x, 2.0), ad.mul(x, 3.0)))
        loss.backward()
        np.testing.assert_allclose(x.grad, 5.0, atol=1e-6)

    def test_backward_requires_scalar(self):
        x = randt(3)
        with pytest.raises(ValueError):
            ad.mul(x, 2.0).backward()

    def test_adam_moves_toward_minimum(self):
        p = Tensor(np.array([5.0, -3.0]), requires_grad=True)
        opt = ad.Adam([p])
        for _ in range(400):
            opt.zero_grad()
            loss = ad.sum_(ad.mul(p, p))
            loss.backward()
            opt.step(lr=0.05)
        assert np.abs(p.data).max() < 0.05

    def test_arrays_f32_scalars_f64(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
        assert x.data.dtype == np.float32
        h = ad.gelu(ad.matmul(x, Tensor(np.ones((3, 2)))))
        assert h.data.dtype == np.float32
        assert ad.mul(h, 2.5).data.dtype == np.float32   # weak python scalar
        y = ad.mean(h)
        assert y.data.dtype == np.float64                # loss scalar
        y.backward()
        assert x.grad.dtype == np.float32
