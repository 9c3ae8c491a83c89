import threading

import numpy as np
import pytest

from svlb.errors import (
    ContractError, DimensionError, NormalizationError, NumericInputError, TargetIndexError,
)
from svlb.gradcheck import gradcheck
from svlb.tensor import (
    Tensor, add, backward, cross_entropy, default_dtype, l2_normalize, matmul, mul, no_grad, precision, softmax,
    sum_, take,
)
from svlb.verify import GRADIENT_CASES


@pytest.mark.parametrize("name", sorted(GRADIENT_CASES))
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng([7, len(name)])
    for _ in range(20):
        fn, inputs = GRADIENT_CASES[name](rng)
        ok, worst = gradcheck(fn, inputs)
        assert ok, f"{name}: worst relative error {worst:.2e}"


def test_every_differentiable_op_has_a_gradient_case():
    ops = {
        "add", "sub", "mul", "div", "neg", "exp", "log", "gelu", "log_sigmoid", "matmul", "transpose", "swapaxes",
        "reshape", "take_slice", "take_index", "concat", "stack", "sum", "mean", "softmax", "log_softmax",
        "cross_entropy", "mse", "layer_norm", "l2_normalize", "embedding", "rope1d", "rope2d", "encoder_block",
    }
    assert ops <= set(GRADIENT_CASES)


def test_broadcast_add_reduces_gradient_to_operand_shape():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    backward(sum_(add(a, b)))
    assert a.grad.shape == (3, 4)
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_gradient_accumulates_over_shared_subexpressions():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = mul(x, x)
    backward(sum_(add(y, y)))
    np.testing.assert_allclose(x.grad, [8.0])


def test_take_scatters_gradient_for_repeated_indices():
    x = Tensor(np.arange(4.0), requires_grad=True)
    backward(sum_(take(x, np.array([1, 1, 3]))))
    np.testing.assert_array_equal(x.grad, [0.0, 2.0, 0.0, 1.0])


def test_softmax_rows_sum_to_one_and_mask_is_exact():
    x = Tensor(np.random.default_rng(0).standard_normal((3, 5)))
    mask = np.array([True, True, False, True, False])
    p = softmax(x, mask=mask).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p[:, ~mask] == 0.0)


def test_softmax_rejects_non_finite_input():
    with pytest.raises(NumericInputError):
        softmax(Tensor([[1.0, np.inf]]))


def test_softmax_rejects_fully_masked_row():
    with pytest.raises(ContractError):
        softmax(Tensor([[1.0, 2.0]]), mask=np.array([False, False]))


def test_cross_entropy_all_ignored_is_zero_with_zero_gradient():
    logits = Tensor(np.random.default_rng(1).standard_normal((3, 4)), requires_grad=True)
    loss = cross_entropy(logits, [-100, -100, -100])
    assert loss.item() == 0.0
    backward(loss)
    assert np.all(logits.grad == 0.0)


def test_cross_entropy_matches_log_softmax():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 6))
    t = np.array([0, 5, 2, 2])
    expected = -np.mean([x[i, t[i]] - np.log(np.exp(x[i]).sum()) for i in range(4)])
    assert cross_entropy(Tensor(x), t).item() == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_target_out_of_range_is_index_error():
    with pytest.raises(IndexError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(TargetIndexError):
        cross_entropy(Tensor(np.zeros((2, 3))), [-1, 0])


def test_l2_normalize_zero_row_fails():
    with pytest.raises(NormalizationError):
        l2_normalize(Tensor([[0.0, 0.0], [1.0, 0.0]]))


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))


def test_backward_requires_scalar_connected_loss():
    with pytest.raises(ContractError):
        backward(Tensor(np.ones(2), requires_grad=True))
    with pytest.raises(ContractError):
        backward(Tensor(1.0))


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = mul(x, 2.0)
    assert not y.requires_grad and y.is_leaf


def test_precision_selects_dtype():
    assert Tensor(1.0).dtype == np.float64
    with precision("train"):
        assert Tensor(1.0).dtype == np.float32
        assert default_dtype() == np.float32
    assert default_dtype() == np.float64
    with pytest.raises(ContractError):
        with precision("half"):
            pass


def test_precision_is_thread_local():
    seen = []
    with precision("train"):
        worker = threading.Thread(target=lambda: seen.append(default_dtype()))
        worker.start()
        worker.join()
    assert seen == [np.dtype(np.float64)]


def test_gradcheck_refuses_single_precision():
    with precision("train"):
        x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError):
        gradcheck(lambda t: sum_(t), [x])
