"""Tensor engine: forward ops against naive loop oracles, gradients against
central finite differences."""

import numpy as np
import pytest

from slotkit import tensor as tt
from slotkit.tensor import (ContractError, DimensionError, GradCheckError,
                            Tensor, backward, grad_check)


from oracles import conv_naive, matmul_triple_loop


class TestMatmul:
    def test_identity(self):
        out = tt.matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        assert np.array_equal(out.data, [[3.0, 4.0], [5.0, 6.0]])

    def test_inner_product(self):
        out = tt.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert np.array_equal(out.data, [[11.0]])

    def test_matches_triple_loop_oracle_exactly(self, f64):
        # integer-valued entries keep every product and sum exact in float64,
        # so the BLAS result must agree with the loop oracle bit for bit
        rng = np.random.default_rng(3)
        a = rng.integers(-9, 10, size=(4, 5)).astype(np.float64)
        b = rng.integers(-9, 10, size=(5, 3)).astype(np.float64)
        out = tt.matmul(Tensor(a), Tensor(b)).data
        assert np.array_equal(out, matmul_triple_loop(a, b))

    def test_float_case_tight(self, f64):
        rng = np.random.default_rng(4)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        out = tt.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(out, matmul_triple_loop(a, b), rtol=1e-13, atol=0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            tt.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_batched_gradients(self, f64):
        rng = np.random.default_rng(5)
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        proj = Tensor(rng.normal(size=(2, 3, 5)))
        err = grad_check(lambda a, b: tt.tsum(tt.matmul(a, b) * proj), [a, b])
        assert err < 1e-6


class TestSoftmax:
    def test_uniform(self):
        out = tt.softmax(Tensor([0.0, 0.0, 0.0]), axis=0).data
        np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-7)

    def test_stabilized_no_overflow(self):
        out = tt.softmax(Tensor([1000.0, 0.0]), axis=0).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-12)

    def test_matches_direct_formula(self, f64):
        rng = np.random.default_rng(6)
        x = rng.normal(size=7)
        out = tt.softmax(Tensor(x), axis=0).data
        ref = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_sums_to_one_along_axis(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            x = rng.normal(size=(3, 5, 4)) * rng.uniform(0.1, 50)
            out = tt.softmax(Tensor(x.astype(np.float32)), axis=1).data
            np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)

    def test_gradient(self, f64):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        proj = Tensor(rng.normal(size=(3, 4)))
        err = grad_check(lambda x: tt.tsum(tt.softmax(x, axis=1) * proj), x)
        assert err < 1e-7


class TestConv2d:
    def test_identity_kernel(self):
        x = np.arange(9.0).reshape(1, 1, 3, 3)
        out = tt.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
        assert np.array_equal(out.data, x)

    def test_counting_ones(self):
        x = np.ones((1, 1, 4, 4))
        w = np.ones((1, 1, 3, 3))
        out = tt.conv2d(Tensor(x), Tensor(w), stride=1, pad=0)
        assert out.shape == (1, 1, 2, 2)
        assert np.array_equal(out.data, np.full((1, 1, 2, 2), 9.0))

    @pytest.mark.parametrize("stride,pad,hw,k", [
        (1, 0, (6, 7), 3), (2, 1, (8, 8), 3), (2, 2, (9, 10), 5), (3, 0, (11, 9), 4),
    ])
    def test_matches_naive_oracle(self, f64, stride, pad, hw, k):
        rng = np.random.default_rng(hash((stride, pad, k)) % 2 ** 31)
        x = rng.integers(-5, 6, size=(2, 3, *hw)).astype(np.float64)
        w = rng.integers(-5, 6, size=(4, 3, k, k)).astype(np.float64)
        out = tt.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data
        assert np.array_equal(out, conv_naive(x, w, stride, pad))

    def test_extent_formula(self):
        out = tt.conv2d(Tensor(np.zeros((1, 2, 13, 9))), Tensor(np.zeros((4, 2, 5, 5))),
                        stride=2, pad=2)
        assert out.shape == (1, 4, (13 + 4 - 5) // 2 + 1, (9 + 4 - 5) // 2 + 1)

    def test_invalid_stride_pad(self):
        x, w = Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3)))
        with pytest.raises(DimensionError):
            tt.conv2d(x, w, stride=0)
        with pytest.raises(DimensionError):
            tt.conv2d(x, w, pad=-1)

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            tt.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))

    def test_gradients(self, f64):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(2, 2, 6, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        proj = Tensor(rng.normal(size=(2, 3, 3, 3)))
        err = grad_check(lambda x, w, b: tt.tsum(tt.conv2d(x, w, b, stride=2, pad=1) * proj),
                         [x, w, b])
        assert err < 1e-6


class TestConvTranspose2d:
    def test_extent_and_adjoint(self, f64):
        rng = np.random.default_rng(10)
        y = tt.conv_transpose2d(Tensor(np.zeros((2, 3, 4, 5))),
                                Tensor(np.zeros((3, 2, 4, 4))), stride=2, pad=1)
        assert y.shape == (2, 2, 8, 10)
        # <conv(x), y> == <x, conv_transpose(y)> with a shared kernel
        x = rng.normal(size=(1, 2, 7, 7))
        w = rng.normal(size=(3, 2, 3, 3))
        yv = rng.normal(size=(1, 3, 4, 4))
        lhs = (tt.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data * yv).sum()
        rhs = (tt.conv_transpose2d(Tensor(yv), Tensor(w), stride=2, pad=1).data * x).sum()
        assert np.isclose(lhs, rhs, rtol=1e-12)

    def test_gradients(self, f64):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, 4, 4)), requires_grad=True)
        proj = Tensor(rng.normal(size=(2, 2, 8, 10)))
        err = grad_check(
            lambda x, w: tt.tsum(tt.conv_transpose2d(x, w, stride=2, pad=1) * proj), [x, w])
        assert err < 1e-6


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(x.sum())
        assert np.array_equal(x.grad, np.ones((2, 3), dtype=x.dtype))

    def test_square_gives_two_x(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward((x * x).sum())
        np.testing.assert_allclose(x.grad, 2 * x.data, atol=1e-6)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.ones(4), requires_grad=True)
        backward((x + x).sum())
        assert np.array_equal(x.grad, np.full(4, 2.0, dtype=x.dtype))

    def test_composite_slot_attention_style_step(self, f64):
        # one attention read-update cycle over a toy feature set
        rng = np.random.default_rng(12)
        feats = Tensor(rng.normal(size=(2, 6, 4)))
        wq = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        slots = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        proj = Tensor(rng.normal(size=(2, 3, 4)))

        def step(wq, slots):
            q = tt.matmul(slots, wq)
            logits = tt.matmul(q, tt.transpose(feats, (0, 2, 1)))
            attn = tt.softmax(logits, axis=1)
            weights = attn / (attn.sum(axis=2, keepdims=True) + 1e-8)
            updates = tt.matmul(weights, feats)
            return tt.tsum(tt.tanh(updates) * proj)

        assert grad_check(step, [wq, slots]) < 1e-4

    def test_elementwise_op_gradients(self, f64):
        rng = np.random.default_rng(13)
        x = Tensor(rng.uniform(0.2, 2.0, (3, 4)), requires_grad=True)
        proj = Tensor(rng.normal(size=(3, 4)))

        def f(x):
            y = tt.exp(x) + tt.log(x) + tt.sqrt(x) + tt.tanh(x) + tt.sigmoid(x)
            y = y + tt.relu(x - 1.0) + tt.silu(x) + x ** 1.5 + 1.0 / x
            return tt.tsum(y * proj)

        assert grad_check(f, x) < 1e-6

    def test_shape_op_gradients(self, f64):
        rng = np.random.default_rng(14)
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        proj = Tensor(rng.normal(size=(3, 2, 2)))

        def f(x):
            y = tt.transpose(x, (1, 0, 2))
            y = tt.concat([y[:, :, :2], y[:, :, 2:] * 0.5], axis=2)
            y = y.reshape(3, 2, 2, 2).sum(axis=3)
            return tt.tsum(y * proj) + tt.tmean(x) + tt.tsum(tt.expand(
                x.sum(axis=(1, 2), keepdims=True), (2, 3, 4)))

        assert grad_check(f, x) < 1e-6

    def test_gather_rows_gradient(self, f64):
        rng = np.random.default_rng(15)
        table = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        idx = np.array([[0, 2], [5, 0]])
        proj = Tensor(rng.normal(size=(2, 2, 3)))
        err = grad_check(lambda t: tt.tsum(tt.gather_rows(t, idx) * proj), table)
        assert err < 1e-7

    def test_stop_gradient_blocks(self):
        x = Tensor(np.ones(3), requires_grad=True)
        backward((x * tt.stop_gradient(x * 2.0)).sum())
        # d/dx of x * const(2x) is just the constant
        np.testing.assert_allclose(x.grad, 2.0)

    def test_norm_gradients(self, f64):
        rng = np.random.default_rng(16)
        x = Tensor(rng.normal(size=(2, 4, 3, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=4), requires_grad=True)
        b = Tensor(rng.normal(size=4), requires_grad=True)
        proj = Tensor(rng.normal(size=(2, 4, 3, 3)))
        err = grad_check(
            lambda x, w, b: tt.tsum(tt.group_norm(x, w, b, groups=2) * proj), [x, w, b])
        assert err < 1e-6
        x2 = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
        proj2 = Tensor(rng.normal(size=(5, 4)))
        err = grad_check(
            lambda x2, w, b: tt.tsum(tt.layer_norm(x2, w, b) * proj2), [x2, w, b])
        assert err < 1e-6


class TestGradCheck:
    def test_sum_exact(self, f64):
        # integer data with a power-of-two eps keeps every FD sum exact, so
        # the reported error is literally zero
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        assert grad_check(lambda x: x.sum(), x, eps=0.25) == 0.0

    def test_softmax_then_sum_constant(self, f64):
        # softmax rows always sum to 1, so the map is constant and both
        # gradient estimates vanish
        x = Tensor(np.random.default_rng(17).normal(size=(2, 4)), requires_grad=True)
        assert grad_check(lambda x: tt.softmax(x, axis=1).sum(), x) < 1e-9

    def test_requires_f64(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(ContractError):
            grad_check(lambda x: x.sum(), x)

    def test_nonfinite_reports_coordinate(self, f64):
        # perturbing the tiny coordinate downward makes log() blow up
        x = Tensor(np.array([0.5, 1e-300]), requires_grad=True)

        def f(x):
            return tt.tsum(tt.log(x))

        with pytest.raises(GradCheckError) as exc:
            grad_check(f, x, eps=1e-2)
        assert exc.value.coordinate == (0, 1)


class TestFiniteness:
    def test_forward_ops_finite_on_finite_inputs(self):
        rng = np.random.default_rng(18)
        x = Tensor(rng.normal(size=(3, 4)) * 30.0)
        for out in (tt.softmax(x, axis=1), tt.tanh(x), tt.sigmoid(x), tt.silu(x),
                    tt.exp(x * 0.01), x * x, x + x, x.mean()):
            assert np.isfinite(out.data).all()


class TestDtypeSwitch:
    def test_default_dtype_controls_tensor_creation(self, f64):
        assert Tensor([1.0]).dtype == np.float64
        tt.set_default_dtype(np.float32)
        assert Tensor([1.0]).dtype == np.float32
        tt.set_default_dtype(np.float64)

    def test_rejects_unknown(self):
        with pytest.raises(ContractError):
            tt.set_default_dtype("f16")
