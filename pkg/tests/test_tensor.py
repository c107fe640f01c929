import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from viigl.errors import ConfigError, ContractError, ShapeError
from viigl.nn import Layer, Mlp, forward
from viigl.optim import Ema, Optimizer, clip_grad_norm, ema_update, global_norm, step
from viigl.oracle import finite_diff_gradcheck
from viigl.tensor import Tensor, concat, parameter, where


def _loop_forward(layers, x):
    """Forward pass with explicit scalar loops, independent of numpy matmul."""
    rows = [list(r) for r in x]
    for w, b, act in layers:
        out = []
        for row in rows:
            vals = []
            for j in range(w.shape[1]):
                z = b[j]
                for i in range(w.shape[0]):
                    z += row[i] * w[i, j]
                if act == "relu":
                    z = max(z, 0.0)
                elif act == "sigmoid":
                    z = 1.0 / (1.0 + math.exp(-z))
                vals.append(z)
            out.append(vals)
        rows = out
    return np.array(rows)


class TestForward:
    def test_identity_layer(self):
        net = Mlp.from_layers([Layer(parameter(np.eye(3)), parameter(np.zeros(3)), "identity")])
        x = np.array([[1.0, -2.0, 3.5], [0.0, 4.0, -1.0]])
        np.testing.assert_array_equal(forward(net, x).data, x)

    def test_zero_sigmoid_layer(self):
        net = Mlp.from_layers([Layer(parameter(np.zeros((4, 2))), parameter(np.zeros(2)), "sigmoid")])
        out = net(np.random.default_rng(0).normal(size=(5, 4)))
        np.testing.assert_array_equal(out.data, 0.5)

    def test_matches_loop_arithmetic(self):
        rng = np.random.default_rng(7)
        net = Mlp([5, 4, 3], rng, output_activation="sigmoid")
        x = rng.normal(size=(6, 5))
        layers = [(l.weight.data, l.bias.data + rng.normal(size=l.out_dim), l.activation) for l in net.layers]
        for l, (_, b, _) in zip(net.layers, layers):
            l.bias.data[...] = b
        np.testing.assert_allclose(net(x).data, _loop_forward(layers, x), rtol=1e-12, atol=1e-14)

    def test_dimension_mismatch(self):
        net = Mlp([3, 2], np.random.default_rng(0))
        with pytest.raises(ShapeError):
            net(np.zeros((2, 4)))

    def test_layer_chaining_checked(self):
        with pytest.raises(ShapeError):
            Mlp.from_layers([Layer(parameter(np.zeros((2, 3))), parameter(np.zeros(3))),
                             Layer(parameter(np.zeros((4, 1))), parameter(np.zeros(1)))])

    def test_glorot_bounds_and_zero_bias(self):
        net = Mlp([30, 20, 10], np.random.default_rng(1))
        for layer in net.layers:
            limit = math.sqrt(6.0 / (layer.in_dim + layer.out_dim))
            assert np.all(np.abs(layer.weight.data) <= limit)
            assert np.all(layer.bias.data == 0)


class TestBackward:
    def test_sum_of_parameters(self):
        p = parameter(np.arange(6.0).reshape(2, 3))
        q = parameter(np.ones(4))
        (p.sum() + q.sum()).backward()
        np.testing.assert_array_equal(p.grad, 1.0)
        np.testing.assert_array_equal(q.grad, 1.0)

    def test_power_rule(self):
        w = parameter(3.0)
        (w * w).backward()
        assert w.grad == pytest.approx(6.0)

    def test_non_scalar_rejected(self):
        w = parameter(np.ones(3))
        with pytest.raises(ContractError):
            (w * 2.0).backward()

    def test_shared_subexpression_accumulates(self):
        w = parameter(2.0)
        y = w * w
        (y + y * w).backward()         # 2w^2... d/dw (w^2 + w^3) = 2w + 3w^2
        assert w.grad == pytest.approx(4.0 + 12.0)

    def test_mlp_mse_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        net = Mlp([4, 6, 2], rng, hidden_activation="tanh")
        x = rng.normal(size=(8, 4))
        target = rng.normal(size=(8, 2))
        err = finite_diff_gradcheck(lambda: ((net(x) - target) ** 2).mean(), net.parameters())
        assert err < 1e-4


OPS = {
    "add": lambda a, b: (a + b).sum(),
    "sub": lambda a, b: (a - b * 0.7).sum(),
    "mul": lambda a, b: (a * b).sum(),
    "div": lambda a, b: (a / (b * b + 1.0)).sum(),
    "matmul": lambda a, b: (a @ b.T).sum(),
    "exp": lambda a, b: (a * 0.3).exp().sum(),
    "log": lambda a, b: (a * a + 0.5).log().sum(),
    "sigmoid": lambda a, b: (a * b).sigmoid().sum(),
    "tanh": lambda a, b: (a - b).tanh().sum(),
    "pow": lambda a, b: (a ** 3).sum(),
    "mean_axis": lambda a, b: ((a * b).mean(axis=0) ** 2).sum(),
    "sum_axis": lambda a, b: ((a + b).sum(axis=1, keepdims=True) * a).sum(),
    "broadcast_bias": lambda a, b: ((a + b[0]) ** 2).sum(),
    "concat": lambda a, b: (concat([a, b * 2.0], axis=1) ** 2).sum(),
    "index": lambda a, b: (a[np.array([0, 2, 2]), np.array([1, 0, 1])] * 3.0).sum() + (b[1:] ** 2).sum(),
    "transpose_reshape": lambda a, b: (a.T.reshape(-1) * b.reshape(-1)).sum(),
    "where": lambda a, b: where(a.data > 0, a * a, b * 3.0).sum(),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_at_100_points(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    fn = OPS[name]
    worst = 0.0
    for _ in range(100):
        a = parameter(rng.normal(size=(3, 2)))
        b = parameter(rng.normal(size=(3, 2)))
        worst = max(worst, finite_diff_gradcheck(lambda: fn(a, b), [a, b], floor=1e-2))
    assert worst < 1e-4


def test_relu_and_clip_gradients_away_from_kinks():
    rng = np.random.default_rng(11)
    for _ in range(100):
        a = parameter(rng.normal(size=(4, 3)))
        a.data[np.abs(a.data) < 1e-3] = 0.5
        assert finite_diff_gradcheck(lambda: (a.relu() * a).sum(), [a]) < 1e-4
        b = parameter(rng.uniform(-2, 2, size=5))
        b.data[np.abs(np.abs(b.data) - 1.0) < 1e-3] = 0.2
        assert finite_diff_gradcheck(lambda: (b.clip(-1.0, 1.0) ** 2).sum(), [b]) < 1e-4


class TestOptimizer:
    def test_sgd_descent_and_ascent(self):
        p = parameter([1.0])
        opt = Optimizer([p], "sgd", lr=0.1)
        opt.step([np.array([2.0])], "descent")
        assert p.data[0] == pytest.approx(0.8)
        q = parameter([1.0])
        Optimizer([q], "sgd", lr=0.1).step([np.array([2.0])], "ascent")
        assert q.data[0] == pytest.approx(1.2)

    @pytest.mark.parametrize("g", [1e-4, 0.3, 50.0, -7.0])
    def test_adam_first_step_is_lr_sized(self, g):
        p = parameter([0.0])
        Optimizer([p], "adam", lr=0.01).step([np.array([g])])
        # m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps)
        expected = -0.01 * g / (abs(g) + 1e-8)
        assert p.data[0] == pytest.approx(expected, rel=1e-9)
        assert abs(p.data[0]) == pytest.approx(0.01, rel=1e-3)

    def test_zero_gradients_leave_params(self):
        p = parameter(np.arange(4.0))
        before = p.data.copy()
        opt = Optimizer([p], "adam", lr=0.1)
        for _ in range(3):
            opt.step([np.zeros(4)])
        np.testing.assert_array_equal(p.data, before)

    def test_functional_step(self):
        p = parameter([1.0])
        opt = Optimizer([p], "sgd", lr=0.5)
        step(opt, [p], [np.array([1.0])], "descent")
        assert p.data[0] == 0.5

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            Optimizer([], "rmsprop")
        with pytest.raises(ConfigError):
            Optimizer([], "sgd", lr=0.0)

    def test_shape_checked(self):
        p = parameter(np.zeros(3))
        with pytest.raises(ShapeError):
            Optimizer([p], "sgd").step([np.zeros(2)])

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(5)
            net = Mlp([3, 5, 1], rng)
            opt = Optimizer(net.parameters(), "adam", lr=1e-2)
            x = rng.normal(size=(16, 3))
            for _ in range(20):
                ((net(x) - 1.0) ** 2).mean().backward()
                opt.step()
                opt.zero_grad()
            return [p.data.copy() for p in net.parameters()]

        for a, b in zip(run(), run()):
            np.testing.assert_array_equal(a, b)


class TestClipping:
    def test_below_threshold_unchanged(self):
        g = [np.array([0.3, 0.4])]
        np.testing.assert_array_equal(clip_grad_norm(g, 1.0)[0], g[0])

    def test_three_four_five(self):
        np.testing.assert_allclose(clip_grad_norm([np.array([3.0, 4.0])], 1.0)[0], [0.6, 0.8])

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.01, 10.0))
    def test_norm_bounded_and_idempotent(self, seed, max_norm):
        rng = np.random.default_rng(seed)
        grads = [rng.normal(scale=5.0, size=s) for s in [(3, 2), (4,), (1,)]]
        once = clip_grad_norm(grads, max_norm)
        assert global_norm(once) <= max_norm * (1 + 1e-12)
        twice = clip_grad_norm(once, max_norm)
        for a, b in zip(once, twice):
            np.testing.assert_allclose(a, b, rtol=1e-12)


class TestEma:
    def test_rate_zero_copies(self):
        shadow = [np.zeros(3)]
        ema_update(shadow, [parameter([1.0, 2.0, 3.0])], 0.0)
        np.testing.assert_array_equal(shadow[0], [1.0, 2.0, 3.0])

    def test_single_step(self):
        shadow = [np.zeros(1)]
        ema_update(shadow, [parameter([1.0])], 0.99)
        assert shadow[0][0] == pytest.approx(0.01)

    def test_geometric_convergence(self):
        shadow = [np.zeros(1)]
        p = parameter([2.0])
        for n in range(1, 200):
            ema_update(shadow, [p], 0.9)
            assert 2.0 - shadow[0][0] == pytest.approx(2.0 * 0.9 ** n)

    def test_rate_validated(self):
        with pytest.raises(ConfigError):
            ema_update([np.zeros(1)], [parameter([0.0])], 1.0)
        with pytest.raises(ConfigError):
            Ema([], rate=-0.1)

    def test_swap_roundtrip(self):
        p = parameter([1.0, 2.0])
        ema = Ema([p], 0.5)
        p.data[...] = [3.0, 4.0]
        ema.update()
        ema.swap()
        np.testing.assert_array_equal(p.data, [2.0, 3.0])
        ema.swap()
        np.testing.assert_array_equal(p.data, [3.0, 4.0])


def test_tensor_item_and_repr():
    t = Tensor([[2.5]])
    assert t.item() == 2.5
    with pytest.raises(ContractError):
        Tensor([1.0, 2.0]).item()
    assert "shape=(1, 1)" in repr(t)
