import numpy as np
import pytest

from cmanet.errors import ContractError, DimensionError, NumericError
from cmanet.numeric import (
    ComputeGraph,
    Tensor,
    add_bias,
    backward,
    columns,
    grad_check,
    layer_norm,
    matmul,
    mul,
    permute,
    relu,
    reshape,
    row_l2_norm,
    scale_rows,
    sigmoid,
    softmax_rows,
    stack,
    tanh,
    total,
    transpose,
)


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestForward:
    def test_matmul_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), a).data, a.data)

    def test_matmul_by_hand(self):
        out = Tensor([[1.0, 0.0], [0.0, 0.0]]) @ Tensor([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_array_equal(out.data, [[0.0, 1.0], [0.0, 0.0]])

    def test_matmul_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_softmax_symmetric_row(self):
        np.testing.assert_allclose(softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])

    def test_softmax_large_logits_stay_finite(self):
        out = softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)

    def test_softmax_rejects_nan(self):
        with pytest.raises(NumericError):
            softmax_rows(Tensor([[np.nan, 0.0]]))

    def test_softmax_rows_sum_to_one(self, rng):
        for _ in range(100):
            out = softmax_rows(Tensor(rng.normal(scale=10.0, size=(4, 7)))).data
            np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
            assert np.all((out >= 0) & (out <= 1))

    def test_layer_norm_by_hand(self):
        np.testing.assert_allclose(layer_norm(Tensor([1.0, 3.0]), eps=0.0).data, [-1.0, 1.0])

    def test_layer_norm_constant_vector(self):
        np.testing.assert_array_equal(layer_norm(Tensor([5.0, 5.0, 5.0])).data, [0.0, 0.0, 0.0])

    def test_layer_norm_scale_invariant(self, rng):
        x = rng.normal(size=16)
        np.testing.assert_allclose(
            layer_norm(Tensor(3.0 * x), eps=0.0).data, layer_norm(Tensor(x), eps=0.0).data, atol=1e-12
        )

    def test_layer_norm_moments(self, rng):
        for _ in range(100):
            out = layer_norm(Tensor(rng.normal(scale=5.0, size=32))).data
            assert abs(out.mean()) < 1e-10
            assert abs(out.var() - 1.0) < 1e-6

    def test_fixed_points(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5
        assert tanh(Tensor(0.0)).item() == 0.0

    def test_row_l2_norm(self):
        np.testing.assert_array_equal(row_l2_norm(Tensor([[3.0, 4.0]])).data, [5.0])

    def test_stack_and_columns(self):
        a, b = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
        np.testing.assert_array_equal(stack([a, b], axis=1).data, [[1.0, 3.0], [2.0, 4.0]])
        np.testing.assert_array_equal(columns(Tensor(np.arange(6.0).reshape(2, 3)), 1, 3).data, [[1, 2], [4, 5]])

    def test_reshape_size_mismatch(self):
        with pytest.raises(DimensionError):
            reshape(Tensor(np.ones(6)), (4, 2))


class TestGradients:
    def test_matmul_gradient_matches_finite_differences(self, rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
        assert grad_check(lambda: total(matmul(a, b)), [a, b]) < 1e-7

    @pytest.mark.parametrize(
        "build",
        [
            lambda t: total(mul(sigmoid(t), t)),
            lambda t: total(mul(tanh(t), t)),
            lambda t: total(mul(relu(t), t)),
            lambda t: total(row_l2_norm(t)),
            lambda t: total(mul(softmax_rows(t), t)),
            lambda t: total(mul(transpose(t), transpose(t))),
            lambda t: total(mul(reshape(t, (12,))[2:5], Tensor([1.0, -2.0, 3.0]))),
            lambda t: total(mul(permute(reshape(t, (3, 2, 2)), (2, 0, 1)), permute(reshape(t, (3, 2, 2)), (2, 0, 1)))),
            lambda t: total(mul(layer_norm(t[0]), Tensor([0.3, -1.0, 2.0, 0.5]))),
        ],
    )
    def test_op_gradients(self, rng, build):
        for _ in range(20):
            x = leaf(rng, 3, 4)
            # keep relu away from its kink
            x.data[np.abs(x.data) < 1e-3] = 0.5
            assert grad_check(lambda: build(x), [x]) < 1e-5

    def test_bias_and_row_scaling(self, rng):
        x, b, w = leaf(rng, 5, 3), leaf(rng, 3), leaf(rng, 5)
        assert grad_check(lambda: total(mul(scale_rows(add_bias(x, b), w), x)), [x, b, w]) < 1e-6

    def test_shared_subgraph_accumulates(self, rng):
        x = leaf(rng, 2, 2)
        shared = tanh(x)
        out = total(mul(shared, shared))
        backward(out)
        expected = 2 * np.tanh(x.data) * (1 - np.tanh(x.data) ** 2)
        np.testing.assert_allclose(x.grad, expected, rtol=1e-12)
        assert grad_check(lambda: total(mul(tanh(x), tanh(x))), [x]) < 1e-6

    def test_linear_function_is_exact(self, rng):
        x = leaf(rng, 4, 3)
        assert grad_check(lambda: total(x), [x]) < 1e-8
        np.testing.assert_array_equal(x.grad, np.ones((4, 3)))

    def test_grad_check_rejects_non_scalar(self, rng):
        x = leaf(rng, 2, 2)
        with pytest.raises(ContractError):
            grad_check(lambda: tanh(x), [x])

    def test_backward_needs_a_seed_for_non_scalars(self, rng):
        with pytest.raises(ContractError):
            ComputeGraph.from_output(tanh(leaf(rng, 2, 2))).backward()


class TestComputeGraph:
    def test_topological_order_and_single_visit(self, rng):
        x = leaf(rng, 2, 2)
        y = tanh(x)
        out = total(mul(y, y))
        graph = ComputeGraph.from_output(out)
        ids = graph.node_ids()
        assert len(graph.nodes) == len(ids) == 4
        for node_id, _, inputs in graph.describe():
            assert all(i < node_id for i in inputs)
        assert graph.leaves() == [x]

    def test_every_leaf_receives_a_gradient(self, rng):
        a, b, c = leaf(rng, 2, 3), leaf(rng, 3, 2), leaf(rng, 2)
        backward(total(add_bias(a @ b, c)))
        assert all(t.grad is not None and t.grad.shape == t.shape for t in (a, b, c))

    def test_deep_chain_does_not_recurse(self):
        x = Tensor([0.1], requires_grad=True)
        y = x
        for _ in range(5000):
            y = tanh(y)
        backward(total(y))
        assert x.grad is not None
