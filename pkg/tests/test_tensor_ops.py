"""Tensor, tape and primitive op behaviour."""

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings as hyp_settings, strategies as st
from hypothesis.extra.numpy import arrays

from app.core.error_handling import BackwardError, ContractError, NonFiniteError, ShapeError
from app.engine import ops
from app.engine.tensor import Tensor, backward, default_dtype, no_grad, parameter, reset_tape

pytestmark = pytest.mark.unit


def test_default_storage_is_float32():
    assert Tensor([1.0, 2.0]).dtype == np.float32
    with default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_non_finite_input_is_rejected():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])


def test_matmul_shape_mismatch_names_both_shapes():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((4, 5)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(a, b)


def test_add_broadcast_gradient_reduces_to_operand_shape():
    x = parameter(np.ones((3, 4)))
    b = parameter(np.zeros(4))
    backward(ops.sum(ops.add(x, b)))
    assert b.grad.shape == (4,)
    np.testing.assert_allclose(b.grad, np.full(4, 3.0))
    np.testing.assert_allclose(x.grad, np.ones((3, 4)))


def test_shared_input_accumulates_gradient():
    x = parameter([2.0])
    backward(ops.sum(ops.add(ops.mul(x, x), x)))
    np.testing.assert_allclose(x.grad, [5.0])


def test_backward_twice_raises():
    x = parameter([1.0, 2.0])
    loss = ops.sum(ops.mul(x, x))
    backward(loss)
    with pytest.raises(BackwardError):
        backward(loss)


def test_backward_needs_scalar():
    x = parameter([1.0, 2.0])
    with pytest.raises(ShapeError):
        backward(ops.mul(x, 2.0))


def test_no_grad_records_nothing():
    x = parameter([1.0])
    with no_grad():
        y = ops.mul(x, 3.0)
    assert not y.requires_grad
    with pytest.raises(BackwardError):
        backward(y)


def test_retain_grad_keeps_intermediate_gradient():
    x = parameter([1.0, 2.0, 3.0])
    hidden = ops.mul(x, 2.0).retain_grad()
    backward(ops.sum(ops.mul(hidden, hidden)))
    np.testing.assert_allclose(hidden.grad, 2 * hidden.data)


def test_log_of_nonpositive_is_a_contract_error():
    with pytest.raises(ContractError):
        ops.log(Tensor([0.0, 1.0]))


def test_division_by_zero_is_a_contract_error():
    with pytest.raises(ContractError):
        ops.div(Tensor([1.0]), Tensor([0.0]))


def test_dropout_is_identity_outside_training():
    x = Tensor(np.ones((4, 4)))
    assert ops.dropout(x, 0.5, None, training=False) is x


def test_dropout_needs_generator_when_training():
    with pytest.raises(ContractError):
        ops.dropout(Tensor(np.ones(3)), 0.5, None, training=True)


def test_dropout_keeps_expected_scale():
    rng = np.random.default_rng(0)
    out = ops.dropout(Tensor(np.ones(20000)), 0.25, rng, training=True)
    kept = out.data[out.data > 0]
    np.testing.assert_allclose(kept, 1.0 / 0.75, rtol=1e-6)
    assert abs(kept.size / 20000 - 0.75) < 0.02


def test_take_scatters_gradient_back():
    table = parameter(np.arange(6.0).reshape(3, 2))
    backward(ops.sum(ops.take(table, np.array([0, 2, 2]))))
    np.testing.assert_allclose(table.grad, [[1, 1], [0, 0], [2, 2]])


def test_take_out_of_range():
    with pytest.raises(ShapeError):
        ops.take(Tensor(np.ones((2, 2))), np.array([2]))


def test_concat_splits_gradient():
    a = parameter(np.ones((2, 1)))
    b = parameter(np.ones((2, 3)))
    out = ops.concat([a, b], axis=1)
    assert out.shape == (2, 4)
    backward(ops.sum(ops.mul(out, np.arange(4.0))))
    np.testing.assert_allclose(a.grad, [[0.0], [0.0]])
    np.testing.assert_allclose(b.grad, [[1, 2, 3], [1, 2, 3]])


def test_order_invariant_mean_is_bit_exact_under_permutation(rng):
    values = rng.standard_normal((2, 7, 5)).astype(np.float32)
    perm = rng.permutation(7)
    first = ops.order_invariant_mean(Tensor(values), axis=1).data
    second = ops.order_invariant_mean(Tensor(values[:, perm]), axis=1).data
    assert np.array_equal(first, second)


def test_layer_norm_output_statistics(rng):
    x = Tensor(rng.standard_normal((3, 16)) * 5 + 2, dtype=np.float64)
    out = ops.layer_norm(x, Tensor(np.ones(16), dtype=np.float64), Tensor(np.zeros(16), dtype=np.float64))
    np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(out.data.std(axis=-1), 1.0, atol=1e-5)


def test_bce_matches_direct_formula():
    logits = Tensor([[0.5, -1.0]], dtype=np.float64)
    labels = np.array([[1, 0]])
    p = 1.0 / (1.0 + np.exp(-logits.data))
    expected = -np.mean(labels * np.log(p) + (1 - labels) * np.log(1 - p))
    assert ops.bce_with_logits(logits, labels).item() == pytest.approx(expected, rel=1e-12)


def test_bce_is_stable_for_large_logits():
    loss = ops.bce_with_logits(Tensor([[80.0, -80.0]], dtype=np.float64), np.array([[1, 0]]))
    assert loss.item() == pytest.approx(0.0, abs=1e-30)


def test_bce_rejects_non_binary_labels():
    with pytest.raises(ContractError):
        ops.bce_with_logits(Tensor([[0.0]]), np.array([[2]]))


@hyp_settings(max_examples=50, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(arrays(np.float64, (3, 6), elements=st.floats(-30, 30, allow_nan=False)))
def test_softmax_rows_are_stochastic(values):
    reset_tape()
    out = ops.softmax_lastdim(Tensor(values, dtype=np.float64)).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


@hyp_settings(max_examples=50, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(arrays(np.float64, (2, 5), elements=st.floats(-10, 10, allow_nan=False)),
       st.floats(-50, 50, allow_nan=False))
def test_softmax_is_shift_invariant(values, shift):
    reset_tape()
    base = ops.softmax_lastdim(Tensor(values, dtype=np.float64)).data
    shifted = ops.softmax_lastdim(Tensor(values + shift, dtype=np.float64)).data
    np.testing.assert_allclose(base, shifted, atol=1e-9)
