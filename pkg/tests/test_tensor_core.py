"""Autodiff tape, elementary ops and their gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csunet import gradsuite, ops
from csunet.tensor import ConfigError, ShapeError, Tensor, UsageError, debug_nan, no_grad

from oracles import conv2d_naive, conv_transpose2d_naive


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng.standard_normal((3, 4)))
        ops.sum(x).backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_square(self, rng):
        x = leaf(rng.standard_normal(5))
        ops.sum(ops.mul(x, x)).backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_repeated_calls_accumulate(self):
        x = leaf([1.0, 2.0])
        ops.sum(ops.scalar_mul(x, 3.0)).backward()
        ops.sum(ops.scalar_mul(x, 3.0)).backward()
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_shared_subexpression(self):
        # y = x*x feeds two branches; both contributions must arrive
        x = leaf([3.0])
        y = ops.mul(x, x)
        ops.sum(ops.add(y, ops.scalar_mul(y, 2.0))).backward()
        np.testing.assert_allclose(x.grad, [18.0])

    def test_non_scalar_loss_is_usage_error(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(UsageError):
            ops.scalar_mul(x, 2.0).backward()

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with no_grad():
            y = ops.mul(x, x)
        assert y.node is None and not y.requires_grad

    def test_constants_get_no_grad(self):
        x = leaf([1.0, 2.0])
        c = Tensor(np.array([5.0, 5.0]))
        ops.sum(ops.mul(x, c)).backward()
        assert c.grad is None

    def test_debug_nan(self):
        x = leaf([-1.0])
        with np.errstate(invalid="ignore"), debug_nan(), pytest.raises(FloatingPointError):
            ops.log(x)


class TestMatmul:
    def test_identity(self):
        out = ops.matmul(Tensor(np.eye(2)), Tensor(np.array([[5.0, 6.0], [7.0, 8.0]])))
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_hand_computed(self):
        assert ops.matmul(Tensor(np.array([[1.0, 2.0]])), Tensor(np.array([[3.0], [4.0]]))).data[0, 0] == 11

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_batch_broadcast(self, rng):
        a, b = rng.standard_normal((2, 1, 3, 4)), rng.standard_normal((5, 4, 2))
        np.testing.assert_allclose(ops.matmul(Tensor(a), Tensor(b)).data, a @ b)


class TestConv2d:
    def test_ones_counting(self):
        out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0, 0]
        assert out[1, 1] == 9 and out[0, 0] == 4 and out[2, 2] == 4 and out[0, 1] == 6

    def test_depthwise_groups_are_separate(self):
        x = np.stack([np.full((3, 3), 1.0), np.full((3, 3), 10.0)])[None]
        w = np.array([2.0, 3.0]).reshape(2, 1, 1, 1)
        out = ops.conv2d(Tensor(x), Tensor(w), groups=2).data
        np.testing.assert_array_equal(out[0, 0], 2.0)
        np.testing.assert_array_equal(out[0, 1], 30.0)

    @pytest.mark.parametrize("stride,pad,groups", [(2, 1, 1), (1, 0, 1), (1, 2, 3), (3, 1, 1)])
    def test_matches_loop_reference(self, rng, stride, pad, groups):
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((6 if groups > 1 else 4, 3 // groups, 3, 3))
        b = rng.standard_normal(w.shape[0])
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad, groups=groups).data
        np.testing.assert_allclose(out, conv2d_naive(x, w, b, stride, pad, groups), atol=1e-6)

    def test_depthwise_channels_last_matches_grouped(self, rng):
        x = rng.standard_normal((2, 5, 6, 4))
        w = rng.standard_normal((4, 1, 3, 3))
        b = rng.standard_normal(4)
        out = ops.depthwise_conv2d(Tensor(x), Tensor(w), Tensor(b), padding=1).data
        ref = conv2d_naive(x.transpose(0, 3, 1, 2), w, b, 1, 1, 4).transpose(0, 2, 3, 1)
        np.testing.assert_allclose(out, ref, atol=1e-10)

    def test_indivisible_groups(self):
        with pytest.raises(ConfigError):
            ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 1, 1, 1))), groups=2)

    def test_empty_output_extent(self):
        with pytest.raises(ShapeError):
            ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 5, 5))))


class TestConvTranspose:
    def test_single_pixel_broadcast(self):
        out = ops.conv_transpose2d(Tensor(np.full((1, 1, 1, 1), 2.5)), Tensor(np.ones((1, 1, 2, 2))), stride=2)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.5))

    def test_gram_on_single_pixel(self, rng):
        w = rng.standard_normal((1, 1, 2, 2))
        up = ops.conv_transpose2d(Tensor(np.full((1, 1, 1, 1), 3.0)), Tensor(w), stride=2)
        down = ops.conv2d(up, Tensor(w), stride=2)
        np.testing.assert_allclose(down.data.ravel(), [3.0 * np.sum(w * w)])

    def test_adjoint_of_conv(self, rng):
        x = rng.standard_normal((2, 3, 6, 6))
        y = rng.standard_normal((2, 4, 3, 3))
        w = rng.standard_normal((4, 3, 2, 2))
        lhs = np.sum(ops.conv2d(Tensor(x), Tensor(w), stride=2).data * y)
        rhs = np.sum(x * ops.conv_transpose2d(Tensor(y), Tensor(w), stride=2).data)
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_matches_loop_reference(self, rng):
        x, w = rng.standard_normal((2, 3, 3, 4)), rng.standard_normal((3, 2, 3, 3))
        np.testing.assert_allclose(ops.conv_transpose2d(Tensor(x), Tensor(w), stride=2).data,
                                   conv_transpose2d_naive(x, w, 2), atol=1e-10)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ops.conv_transpose2d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((3, 1, 2, 2))), stride=2)


class TestNormAndActivations:
    def test_layer_norm_constant_gives_beta(self):
        beta = np.array([0.5, -1.0, 2.0, 0.25])
        out = ops.layer_norm(Tensor(np.full((2, 4), 3.0)), Tensor(np.ones(4)), Tensor(beta))
        np.testing.assert_array_equal(out.data, np.broadcast_to(beta, (2, 4)))

    def test_layer_norm_unit_input(self):
        out = ops.layer_norm(Tensor(np.array([1.0, -1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_allclose(out.data, [1.0, -1.0])

    def test_softmax_uniform(self):
        np.testing.assert_allclose(ops.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3)

    def test_softmax_no_overflow(self):
        out = ops.softmax(Tensor(np.array([1000.0, 0.0]))).data
        assert np.all(np.isfinite(out)) and out[0] == 1.0 and out[1] == 0.0

    def test_softmax_sums_to_one(self, rng):
        out = ops.softmax(Tensor(rng.standard_normal((4, 9)) * 10)).data
        np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)

    def test_gelu_values(self):
        out = ops.gelu(Tensor(np.array([0.0, 10.0, -10.0]))).data
        assert out[0] == 0.0
        assert abs(out[1] - 10.0) < 1e-4 and abs(out[2]) < 1e-4

    def test_gelu_is_exact_not_tanh(self):
        # at x=1 the two forms differ by ~1.5e-4
        assert ops.gelu(Tensor(np.array([1.0]))).data[0] == pytest.approx(0.8413447460685429, abs=1e-12)

    def test_cross_entropy_uniform(self):
        loss = ops.cross_entropy_with_logits(Tensor(np.zeros((1, 2, 2, 2))), np.array([[[0, 1], [1, 0]]]))
        assert float(loss.data) == pytest.approx(np.log(2), abs=1e-15)


class TestShapeOps:
    def test_concat_mismatch(self):
        with pytest.raises(ShapeError):
            ops.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 3)))], axis=1)

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.randoms())
    def test_permute_inverse(self, shape, r):
        axes = list(range(len(shape)))
        r.shuffle(axes)
        x = Tensor(np.arange(np.prod(shape), dtype=np.float64).reshape(shape))
        back = ops.permute(ops.permute(x, axes), np.argsort(axes))
        np.testing.assert_array_equal(back.data, x.data)


ELEMENTARY = [n for n, (tier, _) in gradsuite.CASES.items() if tier == "elementary"]


class TestGradients:
    @pytest.mark.parametrize("name", ELEMENTARY)
    def test_elementary(self, name):
        res = gradsuite.run_case(name)
        assert res.error < gradsuite.TOLERANCES["elementary"], f"{name}: {res.error:.2e}"

    def test_accepts_float32_forward(self, rng):
        x = Tensor(rng.standard_normal((2, 3)).astype(np.float32), requires_grad=True)
        ops.sum(ops.gelu(x)).backward()
        assert x.grad.dtype == np.float32
