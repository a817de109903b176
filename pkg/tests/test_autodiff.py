import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rmrouter import autodiff as ad
from rmrouter.autodiff import Tensor


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.standard_normal(shape).astype(np.float32) * scale, requires_grad=True)


def np_softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class TestForwardOracles:
    def test_softmax_matches_numpy(self):
        x = np.random.default_rng(0).standard_normal((3, 5)).astype(np.float32) * 10
        np.testing.assert_allclose(ad.softmax(Tensor(x)).data, np_softmax(x), atol=1e-6)

    def test_softmax_with_neg_inf(self):
        x = np.array([[1.0, -np.inf, 2.0]], dtype=np.float32)
        out = ad.softmax(Tensor(x)).data
        assert out[0, 1] == 0.0
        np.testing.assert_allclose(out[0, [0, 2]], np_softmax([1.0, 2.0]), atol=1e-6)

    def test_log_softmax(self):
        x = np.random.default_rng(1).standard_normal((4, 6)).astype(np.float32)
        np.testing.assert_allclose(ad.log_softmax(Tensor(x)).data, np.log(np_softmax(x)), atol=1e-5)

    def test_layer_norm(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 8)).astype(np.float32)
        g = rng.standard_normal(8).astype(np.float32)
        b = rng.standard_normal(8).astype(np.float32)
        x64 = x.astype(np.float64)
        mu = x64.mean(-1, keepdims=True)
        var = ((x64 - mu) ** 2).mean(-1, keepdims=True)
        ref = (x64 - mu) / np.sqrt(var + 1e-5) * g + b
        np.testing.assert_allclose(ad.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data, ref, atol=1e-5)

    def test_gelu_tanh_form(self):
        x = np.linspace(-5, 5, 41).astype(np.float32)
        ref = [0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v**3))) for v in x.astype(float)]
        np.testing.assert_allclose(ad.gelu(Tensor(x)).data, ref, atol=1e-6)

    def test_softplus_is_overflow_free(self):
        out = ad.softplus(Tensor(np.array([-1e4, 0.0, 1e4], dtype=np.float32))).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [0.0, math.log(2), 1e4], rtol=1e-6)

    def test_cross_entropy(self):
        logits = np.random.default_rng(3).standard_normal((5, 4)).astype(np.float32)
        targets = np.array([0, 3, 1, 1, 2])
        ref = -np.mean(np.log(np_softmax(logits))[np.arange(5), targets])
        assert ad.cross_entropy(Tensor(logits), targets).item() == pytest.approx(ref, abs=1e-6)

    def test_matmul_batched(self):
        rng = np.random.default_rng(4)
        a, b = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((2, 3, 5, 6))
        np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, a @ b, rtol=1e-5, atol=1e-5)

    def test_dropout_eval_is_identity_and_train_is_inverted(self):
        x = Tensor(np.ones((200, 50), dtype=np.float32))
        assert ad.dropout(x, 0.5, train=False, rng=None) is x
        out = ad.dropout(x, 0.25, train=True, rng=np.random.default_rng(0)).data
        kept = out[out > 0]
        np.testing.assert_allclose(kept, 1 / 0.75, rtol=1e-6)
        assert abs((out == 0).mean() - 0.25) < 0.02

    def test_masked_fill(self):
        x = Tensor(np.arange(4, dtype=np.float32), requires_grad=True)
        y = ad.masked_fill(x, np.array([True, False, True, False]), -7.0)
        np.testing.assert_array_equal(y.data, [-7, 1, -7, 3])
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, [0, 1, 0, 1])


class TestBackward:
    def test_broadcast_grad_reduces_to_shape(self):
        rng = np.random.default_rng(5)
        a, b = leaf(rng, 3, 4), leaf(rng, 4)
        (a * b).sum().backward()
        np.testing.assert_allclose(b.grad, a.data.sum(0), rtol=1e-6)
        np.testing.assert_allclose(a.grad, np.broadcast_to(b.data, (3, 4)), rtol=1e-6)

    def test_matmul_grad_formula(self):
        rng = np.random.default_rng(6)
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        (a @ b).sum().backward()
        g = np.ones((3, 2))
        np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-5)
        np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-5)

    def test_embedding_accumulates_repeated_ids(self):
        table = Tensor(np.zeros((5, 2), dtype=np.float32), requires_grad=True)
        ad.embedding(table, np.array([[1, 1, 3]])).sum().backward()
        np.testing.assert_array_equal(table.grad[:, 0], [0, 2, 0, 1, 0])

    def test_shared_subexpression(self):
        x = Tensor(np.array(3.0, dtype=np.float32), requires_grad=True)
        y = x * x + x
        y.backward()
        assert x.grad == pytest.approx(7.0)

    def test_backward_needs_scalar(self):
        with pytest.raises(ValueError):
            Tensor(np.ones(3), requires_grad=True).backward()

    def test_item_needs_single_element(self):
        with pytest.raises(ValueError):
            Tensor(np.ones(2)).item()

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with ad.no_grad():
            y = (x * 2).sum()
        assert not y.requires_grad
        assert ad.is_grad_enabled()

    def test_shape_error_names_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\)"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


OPS = {
    "exp": lambda a: ad.exp(a * 0.5),
    "log": lambda a: ad.log(ad.exp(a) + 1.0),
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "log_sigmoid": ad.log_sigmoid,
    "tanh": ad.tanh,
    "gelu": ad.gelu,
    "div": lambda a: a / (a * a + 2.0),
    "softmax": lambda a: ad.softmax(a) * Tensor(np.arange(a.shape[-1], dtype=np.float32)),
    "log_softmax": lambda a: ad.log_softmax(a) * Tensor(np.arange(a.shape[-1], dtype=np.float32)),
    "transpose": lambda a: a.transpose(1, 0) @ Tensor(np.ones((a.shape[0], 1), dtype=np.float32) * 0.3),
    "getitem": lambda a: a[1:, ::2] * 3.0,
    "mean": lambda a: a.mean(axis=0) * a[0],
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name):
    rng = np.random.default_rng(sum(map(ord, name)))
    x = leaf(rng, 3, 4)
    errs = ad.check_gradients(lambda: OPS[name](x).sum(), {"x": x})
    assert errs["x"] <= 2e-2


def test_layer_norm_gradient():
    rng = np.random.default_rng(9)
    x, g, b = leaf(rng, 2, 6), leaf(rng, 6), leaf(rng, 6)
    w = Tensor(rng.standard_normal((2, 6)).astype(np.float32))
    errs = ad.check_gradients(lambda: (ad.layer_norm(x, g, b) * w).sum(), {"x": x, "g": g, "b": b})
    assert max(errs.values()) <= 2e-2


def test_cross_entropy_gradient():
    rng = np.random.default_rng(10)
    z = leaf(rng, 4, 3)
    errs = ad.check_gradients(lambda: ad.cross_entropy(z, np.array([0, 2, 1, 2])), {"z": z})
    assert errs["z"] <= 2e-2


def test_numerical_grad_on_known_function():
    x = Tensor(np.array([0.5, -1.0, 2.0], dtype=np.float32), requires_grad=True)
    num = ad.numerical_grad(lambda: (x * x * x).sum(), x)
    np.testing.assert_allclose(num, 3 * x.data.astype(np.float64) ** 2, rtol=1e-3)


def test_adamw_matches_reference_loop():
    rng = np.random.default_rng(12)
    p0 = rng.standard_normal(4).astype(np.float32)
    grads = [rng.standard_normal(4).astype(np.float32) for _ in range(3)]
    p = Tensor(p0.copy(), requires_grad=True)
    state = ad.OptimizerState(lr=0.01, weight_decay=0.1)
    for g in grads:
        p.grad = g
        ad.adamw_step({"p": p}, state)
    ref, m, v = p0.astype(np.float64), np.zeros(4), np.zeros(4)
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat, vhat = m / (1 - 0.9**t), v / (1 - 0.999**t)
        ref = ref - 0.01 * (mhat / (np.sqrt(vhat) + 1e-8) + 0.1 * ref)
    np.testing.assert_allclose(p.data, ref, rtol=1e-5)


def test_adamw_rejects_missing_grad():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError, match="no gradient"):
        ad.adamw_step({"p": p}, ad.OptimizerState())


def test_adamw_zero_lr_keeps_weights():
    p = Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
    before = p.data.copy()
    p.grad = np.ones(2, dtype=np.float32)
    ad.adamw_step({"p": p}, ad.OptimizerState(lr=0.0, weight_decay=0.01))
    np.testing.assert_array_equal(p.data, before)


class TestRng:
    def test_same_stream_same_draws(self):
        a = ad.make_rng(3, "init", "w").standard_normal(5)
        b = ad.make_rng(3, "init", "w").standard_normal(5)
        np.testing.assert_array_equal(a, b)

    def test_streams_differ(self):
        a = ad.make_rng(3, "init", "w").standard_normal(5)
        b = ad.make_rng(3, "init", "v").standard_normal(5)
        c = ad.make_rng(4, "init", "w").standard_normal(5)
        assert not np.allclose(a, b) and not np.allclose(a, c)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_truncated_normal_bounds(self, seed):
        w = ad.truncated_normal(ad.make_rng(seed, "t"), (500,), std=0.02)
        assert w.dtype == np.float32
        assert np.abs(w).max() <= 0.04 + 1e-7


def test_precision_context():
    with ad.precision(np.float64):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * x).sum().backward()
        assert x.data.dtype == np.float64 and x.grad.dtype == np.float64
    assert ad.DTYPE is np.float32
    assert Tensor([1.0]).data.dtype == np.float32
    with pytest.raises(ValueError):
        with ad.precision(np.int32):
            pass
