import numpy as np
import pytest

from protopipe import autodiff as ad
from protopipe.autodiff import AdamState, Tensor, adam_step, backward, grad_check, zero_grads


def tensor(data, grad=True):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(tensor([[1, 0], [0, 1]]), tensor([[5, 6], [7, 8]]))
        np.testing.assert_array_equal(out.data, [[5, 6], [7, 8]])

    def test_hand_arithmetic(self):
        out = ad.matmul(tensor([[1, 2]]), tensor([[3], [4]]))
        assert out.data.tolist() == [[11.0]]

    def test_dimension_error_names_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(tensor(np.zeros((2, 3))), tensor(np.zeros((2, 3))))


class TestL2Normalize:
    def test_three_four_five(self):
        out = ad.l2_normalize(tensor([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-15)

    def test_zero_row_stays_zero(self):
        out = ad.l2_normalize(tensor([[0.0, 0.0]]))
        np.testing.assert_array_equal(out.data, [[0.0, 0.0]])

    def test_unit_row_unchanged(self):
        out = ad.l2_normalize(tensor([[1.0, 0.0]]))
        np.testing.assert_array_equal(out.data, [[1.0, 0.0]])

    def test_row_norms_unit_or_zero(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((20, 6))
        x[7] = 0.0
        norms = np.linalg.norm(ad.l2_normalize(tensor(x)).data, axis=1)
        assert norms[7] == 0.0
        keep = np.delete(norms, 7)
        assert np.all(np.abs(keep - 1.0) <= 1e-9)


class TestSoftmaxCrossEntropy:
    def test_uniform_two_way(self):
        loss = ad.softmax_cross_entropy(tensor([[0.0, 0.0]]), [0])
        assert loss.item() == pytest.approx(np.log(2), abs=1e-12)

    def test_stabilized_no_overflow(self):
        loss = ad.softmax_cross_entropy(tensor([[1000.0, 0.0]]), [0])
        assert np.isfinite(loss.item())
        assert loss.item() == pytest.approx(0.0, abs=1e-12)

    def test_uniform_five_way(self):
        loss = ad.softmax_cross_entropy(tensor([[0.0] * 5]), [3])
        assert loss.item() == pytest.approx(np.log(5), abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError, match="labels"):
            ad.softmax_cross_entropy(tensor([[0.0, 1.0]]), [2])

    def test_nonnegative_and_ln_k_at_uniform(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            n, k = rng.integers(1, 6), rng.integers(2, 7)
            logits = tensor(rng.standard_normal((n, k)))
            labels = rng.integers(0, k, size=n)
            assert ad.softmax_cross_entropy(logits, labels).item() >= 0.0
            uniform = ad.softmax_cross_entropy(tensor(np.zeros((n, k))), labels)
            assert uniform.item() == pytest.approx(np.log(k), abs=1e-12)


class TestBackward:
    def test_sum_gives_ones(self):
        x = tensor([1.0, 2.0, 3.0])
        backward(ad.sum_all(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_sum_of_squares(self):
        x = tensor([1.0, 2.0])
        backward(ad.sum_all(ad.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_accumulation_without_zero(self):
        x = tensor([1.0, 2.0, 3.0])
        loss = ad.sum_all(x)
        backward(loss)
        backward(loss)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])

    def test_purity_with_zero_grads(self):
        x = tensor(np.random.default_rng(0).standard_normal((4, 3)))
        loss = ad.sum_all(ad.mul(x, x))
        backward(loss)
        first = x.grad.copy()
        zero_grads([x])
        backward(loss)
        np.testing.assert_array_equal(x.grad, first)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ad.GraphError, match="scalar"):
            backward(ad.relu(tensor([[1.0, 2.0]])))

    def test_diamond_graph(self):
        x = tensor([2.0])
        y = ad.mul(x, x)
        loss = ad.sum_all(ad.mul(y, y))  # x^4, d/dx = 4 x^3 = 32
        backward(loss)
        np.testing.assert_allclose(x.grad, [32.0])


class TestSimpleOps:
    def test_relu(self):
        out = ad.relu(tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_mean_rows(self):
        out = ad.mean_rows(tensor([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(out.data, [[2.0, 3.0]])

    def test_conv_zero_kernels_annihilate(self):
        x = tensor(np.random.default_rng(0).standard_normal((1, 2, 4, 4)))
        out = ad.conv2d_3x3(x, tensor(np.zeros((3, 2, 3, 3))))
        np.testing.assert_array_equal(out.data, np.zeros((1, 3, 4, 4)))

    def test_conv_shape_errors(self):
        with pytest.raises(ad.ShapeError):
            ad.conv2d_3x3(tensor(np.zeros((2, 4, 4))), tensor(np.zeros((3, 2, 3, 3))))
        with pytest.raises(ad.ShapeError):
            ad.conv2d_3x3(tensor(np.zeros((1, 2, 4, 4))), tensor(np.zeros((3, 5, 3, 3))))

    def test_conv_small_maps_supported(self):
        # the conv4 backbone feeds 2x2 maps to its last block at 16x16 input
        out = ad.conv2d_3x3(tensor(np.ones((1, 1, 2, 2))), tensor(np.ones((1, 1, 3, 3))))
        np.testing.assert_array_equal(out.data, [[[[4.0, 4.0], [4.0, 4.0]]]])

    def test_maxpool_odd_size_rejected(self):
        with pytest.raises(ad.ShapeError):
            ad.maxpool_2x2(tensor(np.zeros((1, 1, 3, 4))))

    def test_add_bias_channel_broadcast(self):
        x = tensor(np.zeros((2, 3, 2, 2)))
        out = ad.add_bias(x, tensor([1.0, 2.0, 3.0]))
        assert out.data[:, 1].min() == out.data[:, 1].max() == 2.0

    def test_forward_outputs_finite(self):
        rng = np.random.default_rng(5)
        x = tensor(rng.standard_normal((4, 6)))
        out = ad.l2_normalize(ad.relu(ad.matmul(x, tensor(rng.standard_normal((6, 3))))))
        assert np.isfinite(out.data).all()


class TestGradCheck:
    def test_matmul_tight(self):
        rng = np.random.default_rng(0)
        err = grad_check(ad.matmul, [tensor(rng.standard_normal((3, 4))),
                                     tensor(rng.standard_normal((4, 2)))])
        assert err <= 1e-6

    def test_l2_normalize_tight(self):
        err = grad_check(ad.l2_normalize,
                         tensor(np.random.default_rng(1).standard_normal((5, 8))))
        assert err <= 1e-6

    def test_softmax_cross_entropy_tight(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 5, size=4)
        err = grad_check(lambda z: ad.softmax_cross_entropy(z, labels),
                         tensor(rng.standard_normal((4, 5))))
        assert err <= 1e-6

    def test_h_domain(self):
        with pytest.raises(ValueError):
            grad_check(ad.relu, tensor([1.0]), h=1e-2)


class TestAdam:
    def test_zero_lr_is_bitwise_noop(self):
        rng = np.random.default_rng(0)
        params = [tensor(rng.standard_normal((3, 3)))]
        before = params[0].data.copy()
        state = AdamState.for_params(params)
        adam_step(params, [rng.standard_normal((3, 3))], state, lr=0.0)
        assert params[0].data.tobytes() == before.tobytes()
        assert state.step_count == 1

    def test_first_step_moves_by_lr_sign(self):
        g = np.array([0.5, -2.0, 3.0])
        params = [tensor(np.zeros(3))]
        adam_step(params, [g], AdamState.for_params(params), lr=0.01)
        np.testing.assert_allclose(params[0].data, -0.01 * np.sign(g), atol=1e-9)

    def test_zero_grads_forever_fixed_point(self):
        params = [tensor([1.0, -2.0])]
        before = params[0].data.copy()
        state = AdamState.for_params(params)
        for _ in range(10):
            adam_step(params, [np.zeros(2)], state, lr=0.1)
        assert params[0].data.tobytes() == before.tobytes()
        assert state.step_count == 10

    def test_shape_mismatch_rejected(self):
        params = [tensor(np.zeros(3))]
        with pytest.raises(ad.ShapeError):
            adam_step(params, [np.zeros(4)], AdamState.for_params(params), lr=0.1)
