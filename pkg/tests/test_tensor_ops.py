import numpy as np
import pytest

from src.tensor import ops
from src.tensor.gradcheck import check_gradients
from src.tensor.tensor import Tape, Tensor, backward, precision

TOLERANCE = 1e-4


def weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, weights))


class TestConv2d:
    def test_delta_kernel_is_identity(self):
        x = Tensor(np.arange(9.0).reshape(1, 1, 3, 3))
        kernel = np.zeros((1, 1, 3, 3))
        kernel[0, 0, 1, 1] = 1.0
        out = ops.conv2d(x, Tensor(kernel), padding=1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_all_ones_counts_overlap(self):
        out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), padding=1)
        assert out.data[0, 0, 1, 1] == 9.0
        assert out.data[0, 0, 0, 0] == 4.0

    def test_output_extent(self):
        out = ops.conv2d(Tensor(np.zeros((2, 3, 8, 8))), Tensor(np.zeros((5, 3, 3, 3))), stride=2, padding=1)
        assert out.shape == (2, 5, 4, 4)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError, match="channel mismatch"):
            ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    @pytest.mark.parametrize("stride,padding,k", [(1, 1, 3), (2, 1, 3), (1, 0, 1)])
    def test_gradients(self, rng, stride, padding, k):
        with precision("float64"):
            x = Tensor(rng.standard_normal((2, 3, 8, 8)), requires_grad=True, name="x")
            kernel = Tensor(rng.standard_normal((4, 3, k, k)), requires_grad=True, name="kernel")
            bias = Tensor(rng.standard_normal(4), requires_grad=True, name="bias")
            out_shape = ops.conv2d(x, kernel, bias, stride, padding).shape
            weights = rng.standard_normal(out_shape)
            errors = check_gradients(
                lambda: weighted_sum(ops.conv2d(x, kernel, bias, stride, padding), weights),
                [x, kernel, bias], max_entries=40, rng=rng,
            )
        assert max(errors.values()) < TOLERANCE


class TestGroupNorm:
    def test_constant_input_gives_zero(self):
        out = ops.group_norm(Tensor(np.full((1, 4, 3, 3), 5.0)), 2, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-6)

    def test_groups_are_standardized(self, rng):
        with precision("float64"):
            out = ops.group_norm(Tensor(rng.standard_normal((2, 8, 4, 4)) * 3 + 1), 4)
        slabs = out.data.reshape(2, 4, -1)
        assert np.abs(slabs.mean(axis=-1)).max() < 1e-6
        variance = slabs.var(axis=-1)
        assert np.all((variance > 1 - 1e-3) & (variance < 1 + 1e-3))

    def test_groups_must_divide_channels(self):
        with pytest.raises(ValueError, match="do not divide"):
            ops.group_norm(Tensor(np.zeros((1, 6, 2, 2))), 4)

    @pytest.mark.parametrize("shape,groups", [((2, 8, 4, 4), 4), ((1, 4, 3, 5), 2), ((3, 6, 2, 2), 3)])
    def test_gradients(self, rng, shape, groups):
        with precision("float64"):
            x = Tensor(rng.standard_normal(shape), requires_grad=True, name="x")
            scale = Tensor(rng.standard_normal(shape[1]), requires_grad=True, name="scale")
            shift = Tensor(rng.standard_normal(shape[1]), requires_grad=True, name="shift")
            weights = rng.standard_normal(shape)
            errors = check_gradients(
                lambda: weighted_sum(ops.group_norm(x, groups, scale, shift), weights),
                [x, scale, shift], max_entries=40, rng=rng, per_tensor=True,
            )
        assert max(errors.values()) < TOLERANCE


class TestSoftmax:
    def test_equal_row_is_uniform(self):
        out = ops.softmax_rows(Tensor(np.full((2, 5), 3.0)))
        np.testing.assert_allclose(out.data, 0.2, atol=1e-7)

    def test_closed_form(self):
        with precision("float64"):
            out = ops.softmax_rows(Tensor([[0.0, np.log(3.0)]]))
        np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    def test_rows_sum_to_one_for_large_inputs(self, rng):
        with precision("float64"):
            out = ops.softmax_rows(Tensor(rng.uniform(-1e4, 1e4, size=(6, 7))))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-6)
        assert np.all(out.data >= 0)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            ops.softmax_rows(Tensor([[0.0, np.inf]]))

    @pytest.mark.parametrize("shape", [(4,), (3, 5), (2, 3, 4)])
    def test_gradients(self, rng, shape):
        with precision("float64"):
            x = Tensor(rng.standard_normal(shape), requires_grad=True, name="x")
            weights = rng.standard_normal(shape)
            errors = check_gradients(lambda: weighted_sum(ops.softmax_rows(x), weights), [x])
        assert errors["x"] < TOLERANCE


class TestElementwiseGradients:
    @pytest.mark.parametrize("op", [ops.silu, ops.square])
    def test_unary(self, rng, op):
        with precision("float64"):
            x = Tensor(rng.standard_normal((3, 4)), requires_grad=True, name="x")
            weights = rng.standard_normal((3, 4))
            errors = check_gradients(lambda: weighted_sum(op(x), weights), [x])
        assert errors["x"] < TOLERANCE

    def test_broadcast_add_and_mul(self, rng):
        with precision("float64"):
            a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True, name="a")
            b = Tensor(rng.standard_normal((1, 3, 1)), requires_grad=True, name="b")
            weights = rng.standard_normal((2, 3, 4))
            errors = check_gradients(lambda: weighted_sum(ops.mul(ops.add(a, b), b), weights), [a, b])
        assert max(errors.values()) < TOLERANCE

    def test_matmul_transpose_reshape(self, rng):
        with precision("float64"):
            a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True, name="a")
            b = Tensor(rng.standard_normal((2, 5, 4)), requires_grad=True, name="b")

            def loss():
                product = ops.matmul(a, ops.transpose(b, (0, 2, 1)))
                return ops.sum(ops.square(ops.reshape(product, (6, 5))))

            errors = check_gradients(loss, [a, b])
        assert max(errors.values()) < TOLERANCE

    def test_layer_norm_concat_slice(self, rng):
        with precision("float64"):
            x = Tensor(rng.standard_normal((3, 6)), requires_grad=True, name="x")
            y = Tensor(rng.standard_normal((3, 2)), requires_grad=True, name="y")
            scale = Tensor(rng.standard_normal(8), requires_grad=True, name="scale")
            weights = rng.standard_normal((3, 5))

            def loss():
                joined = ops.layer_norm(ops.concat([x, y], axis=1), scale)
                return weighted_sum(ops.slice_axis(joined, 1, 6, axis=1), weights)

            errors = check_gradients(loss, [x, y, scale])
        assert max(errors.values()) < TOLERANCE

    def test_upsample(self, rng):
        with precision("float64"):
            x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True, name="x")
            weights = rng.standard_normal((1, 2, 6, 6))
            errors = check_gradients(lambda: weighted_sum(ops.upsample_nearest2x(x), weights), [x])
        assert errors["x"] < TOLERANCE


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 2)), requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(x)
        np.testing.assert_array_equal(backward(loss, tape)[x], np.ones((3, 2)))

    def test_square_gives_two_x(self, rng):
        with precision("float64"):
            x = Tensor(rng.standard_normal(5), requires_grad=True)
            with Tape() as tape:
                loss = ops.sum(ops.mul(x, x))
            np.testing.assert_allclose(backward(loss, tape)[x], 2 * x.data)

    def test_fan_out_accumulates(self):
        with precision("float64"):
            x = Tensor([1.0, 2.0], requires_grad=True)
            with Tape() as tape:
                loss = ops.sum(ops.add(ops.mul(x, 3.0), ops.mul(x, 4.0)))
            np.testing.assert_allclose(backward(loss, tape)[x], [7.0, 7.0])

    def test_off_path_tensor_gets_zero(self):
        x = Tensor([1.0], requires_grad=True)
        unused = Tensor([[1.0, 2.0]], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum(ops.square(x))
        gradients = backward(loss, tape, wrt=[unused])
        np.testing.assert_array_equal(gradients[unused], 0.0)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            out = ops.square(x)
        with pytest.raises(ValueError, match="scalar"):
            backward(out, tape)

    def test_nothing_recorded_without_tape(self):
        x = Tensor([1.0], requires_grad=True)
        out = ops.square(x)
        assert not out.requires_grad

    def test_zero_extent_rejected(self):
        with pytest.raises(ValueError, match="extents"):
            Tensor(np.zeros((2, 0)))

    def test_precision_context_restores(self):
        with precision("float64"):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32
