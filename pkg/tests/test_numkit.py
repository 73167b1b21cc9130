import math

import numpy as np
import pytest

from ctxasr import numkit
from ctxasr.numkit import (
    GraphError,
    ShapeError,
    Tensor,
    add_rowvec,
    concat,
    finite_diff_check,
    layer_norm,
    log_softmax,
    matmul,
    outer_add,
    rows,
    softmax,
)


class TestMatmul:
    def test_identity(self):
        m = Tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = Tensor(np.eye(2))
        np.testing.assert_array_equal(matmul(eye, m).data, m.data)

    def test_hand_product(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal(matmul(a, b).data, [[3.0], [7.0]])

    def test_grad_of_sum_is_ones_bt(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)))
        matmul(a, b).sum().backward()
        expected = np.ones((3, 2)) @ b.data.T
        np.testing.assert_allclose(a.grad, expected, atol=1e-12)
        err = finite_diff_check(lambda x: matmul(x, b).sum(), a)
        assert err < 1e-8

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        assert "(2, 3)" in str(exc.value)


class TestLogSoftmax:
    def test_uniform_logits(self):
        out = log_softmax(Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, math.log(0.25), atol=1e-15)

    def test_closed_form(self):
        out = log_softmax(Tensor([0.0, math.log(3.0)]))
        np.testing.assert_allclose(out.data, [math.log(0.25), math.log(0.75)], atol=1e-15)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 5))
        a = log_softmax(Tensor(x)).data
        b = log_softmax(Tensor(x + 123.456)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_normalization(self):
        rng = np.random.default_rng(2)
        out = log_softmax(Tensor(rng.normal(size=(4, 7)) * 10))
        np.testing.assert_allclose(np.exp(out.data).sum(axis=-1), 1.0, atol=1e-12)

    def test_empty_axis(self):
        with pytest.raises(ShapeError):
            log_softmax(Tensor(np.zeros((3, 0))))


class TestElementwise:
    def test_additive_identity(self):
        h = Tensor(np.arange(6.0).reshape(2, 3))
        np.testing.assert_array_equal((h + 0.0).data, h.data)

    def test_analytic_points(self):
        assert math.tanh(0.0) == Tensor([0.0]).tanh().item() == 0.0
        assert Tensor([0.0]).sigmoid().item() == 0.5

    def test_sigmoid_grad_at_zero(self):
        x = Tensor([0.0], requires_grad=True)
        x.sigmoid().sum().backward()
        np.testing.assert_allclose(x.grad, [0.25], atol=1e-15)

    def test_incompatible_shapes(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((3,)))
        with pytest.raises(ShapeError):
            Tensor(np.zeros((2, 3))) * Tensor(np.zeros((2, 4)))

    def test_scalar_broadcast_allowed(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        s = Tensor([2.0], requires_grad=True)
        (x * s).sum().backward()
        np.testing.assert_allclose(x.grad, 2.0 * np.ones((2, 2)))
        np.testing.assert_allclose(s.grad, [4.0])


class TestBackward:
    def test_sum_grads_ones(self):
        x = Tensor(np.arange(5.0), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones(5))

    def test_square_grads_2x(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2.0 * x.data, atol=1e-15)

    def test_double_backward_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = x.sum()
        y.backward()
        with pytest.raises(GraphError):
            y.backward()

    def test_non_scalar_root_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            (x * x).backward()

    def test_fanout_accumulates(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        y = x * 2.0 + x * 5.0
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [7.0])

    def test_grad_accumulates_across_graphs_until_zeroed(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        x.sum().backward()
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])
        x.zero_grad()
        assert x.grad is None


class TestFiniteDiffCheck:
    def test_linear_near_machine_precision(self):
        rng = np.random.default_rng(3)
        w = Tensor(rng.normal(size=(4, 1)))
        x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        err = finite_diff_check(lambda t: matmul(t, w).sum(), x)
        assert err < 1e-10

    def test_log_softmax_cross_entropy(self):
        rng = np.random.default_rng(4)
        target = rng.integers(0, 6, size=3)
        onehot = np.zeros((3, 6))
        onehot[np.arange(3), target] = 1.0
        mask = Tensor(onehot)

        def xent(logits):
            return (log_softmax(logits) * mask).sum() * -1.0

        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        assert finite_diff_check(xent, x, eps=1e-5) < 1e-6

    def test_constant_function_zero_grad(self):
        x = Tensor(np.ones(3), requires_grad=True)
        err = finite_diff_check(lambda t: Tensor(5.0), x)
        assert err == 0.0
        assert x.grad is None


OPS = {
    "tanh": lambda x: x.tanh().sum(),
    "sigmoid": lambda x: x.sigmoid().sum(),
    "mul_self": lambda x: (x * x).sum(),
    "softmax": lambda x: (softmax(x) * softmax(x)).sum(),
    "log_softmax": lambda x: (log_softmax(x) * log_softmax(x)).sum(),
    "reshape": lambda x: (x.reshape(6, 2) * x.reshape(6, 2)).sum(),
    "transpose": lambda x: (x.T * x.T).sum(),
}


class TestGradientProperty:
    @pytest.mark.parametrize("name", sorted(OPS))
    def test_ops_pass_gradient_check(self, name):
        rng = np.random.default_rng(hash(name) % (2**32))
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        assert finite_diff_check(OPS[name], x, eps=1e-5) < 1e-6

    def test_structural_ops_pass_gradient_check(self):
        rng = np.random.default_rng(7)
        other = Tensor(rng.normal(size=(2, 4)))
        vec = Tensor(rng.normal(size=4), requires_grad=True)
        mat = Tensor(rng.normal(size=(2, 4)), requires_grad=True)

        assert finite_diff_check(lambda v: add_rowvec(other, v).tanh().sum(), vec) < 1e-6
        assert finite_diff_check(lambda m: concat([m, other], axis=0).tanh().sum(), mat) < 1e-6
        assert finite_diff_check(lambda m: outer_add(m, other).tanh().sum(), mat) < 1e-6
        assert (
            finite_diff_check(lambda m: rows(m, np.array([0, 1, 1, 0])).tanh().sum(), mat) < 1e-6
        )

    def test_layer_norm_gradient_all_inputs(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        g = Tensor(rng.normal(size=5), requires_grad=True)
        b = Tensor(rng.normal(size=5), requires_grad=True)
        assert finite_diff_check(lambda t: layer_norm(t, g, b).tanh().sum(), x) < 1e-6
        assert finite_diff_check(lambda t: layer_norm(x, t, b).tanh().sum(), g) < 1e-6
        assert finite_diff_check(lambda t: layer_norm(x, g, t).tanh().sum(), b) < 1e-6


class TestDeterminism:
    def test_replay_bit_identical(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 4)))
            y = log_softmax(matmul(x, w).tanh())
            loss = (y * y).sum()
            loss.backward()
            return loss.item(), x.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(g1, g2)


class TestNoGrad:
    def test_no_recording(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with numkit.no_grad():
            y = (x * x).sum()
        assert not y.requires_grad
        y.backward()
        assert x.grad is None
