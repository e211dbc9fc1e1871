import numpy as np
import pytest

from amber import tensor as T
from amber.tensor import (ComputationTape, GraphError, Tensor, backward,
                          default_tape, no_grad, unbroadcast)


def test_default_dtype_is_float32():
    t = Tensor([1.0, 2.0])
    assert t.dtype == np.float32


def test_float64_array_preserved():
    t = Tensor(np.zeros(3, dtype=np.float64))
    assert t.dtype == np.float64


def test_integer_input_rejected_as_dtype():
    with pytest.raises(TypeError):
        Tensor([1, 2], dtype=np.int32)


def test_add_broadcast_values_and_grads():
    a = Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
    b = Tensor(np.array([10.0, 20.0, 30.0], dtype=np.float32), requires_grad=True)
    out = (a + b).sum()
    backward(out)
    assert np.allclose((a + b).data, a.data + b.data)
    assert np.array_equal(a.grad, np.ones((2, 3), dtype=np.float32))
    assert np.array_equal(b.grad, np.full(3, 2.0, dtype=np.float32))


def test_scalar_ops():
    a = Tensor([2.0, 4.0], requires_grad=True)
    out = ((a * 3.0 + 1.0) / 2.0 - 0.5).sum()
    backward(out)
    assert np.allclose(out.item(), (2.0 * 3 + 1) / 2 - 0.5 + (4.0 * 3 + 1) / 2 - 0.5)
    assert np.allclose(a.grad, [1.5, 1.5])


def test_mul_grads():
    a = Tensor([2.0, 3.0], requires_grad=True)
    b = Tensor([5.0, 7.0], requires_grad=True)
    backward((a * b).sum())
    assert np.allclose(a.grad, b.data)
    assert np.allclose(b.grad, a.data)


def test_sub_and_neg():
    a = Tensor([3.0], requires_grad=True)
    b = Tensor([1.0], requires_grad=True)
    backward((a - b).sum())
    assert a.grad[0] == 1.0
    assert b.grad[0] == -1.0
    assert (-a).data[0] == -3.0


def test_mixed_dtype_rejected():
    a = Tensor(np.zeros(2, dtype=np.float32))
    b = Tensor(np.zeros(2, dtype=np.float64))
    with pytest.raises(TypeError):
        a + b


def test_tensor_division_by_tensor_rejected():
    a = Tensor([1.0])
    with pytest.raises(TypeError):
        a / a


def test_matmul_values_match_numpy():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((3, 4)).astype(np.float32)
    b = rng.standard_normal((4, 5)).astype(np.float32)
    out = Tensor(a) @ Tensor(b)
    assert np.allclose(out.data, a @ b, atol=1e-6)


def test_matmul_batch_broadcast_grad_shapes():
    a = Tensor(np.ones((3, 4), dtype=np.float32), requires_grad=True)
    b = Tensor(np.ones((2, 4, 5), dtype=np.float32), requires_grad=True)
    backward(T.matmul(a, b).sum())
    assert a.grad.shape == (3, 4)
    assert b.grad.shape == (2, 4, 5)
    # d/da sum(a@b) broadcast over 2 batches: each entry sees 5 columns twice
    assert np.allclose(a.grad, 10.0)


def test_matmul_requires_2d():
    with pytest.raises(ValueError):
        T.matmul(Tensor([1.0]), Tensor([1.0]))


def test_reshape_round_trip_grad():
    x = Tensor(np.arange(6, dtype=np.float32), requires_grad=True)
    w = np.arange(6, dtype=np.float32).reshape(2, 3)
    backward((x.reshape((2, 3)) * Tensor(w)).sum())
    assert np.array_equal(x.grad, w.reshape(6))


def test_transpose_inverse_permutation():
    x = Tensor(np.arange(24, dtype=np.float32).reshape(2, 3, 4), requires_grad=True)
    w = np.random.default_rng(1).standard_normal((4, 2, 3)).astype(np.float32)
    backward((T.transpose(x, (2, 0, 1)) * Tensor(w)).sum())
    assert np.allclose(x.grad, w.transpose(1, 2, 0))


def test_sum_axis_keepdims():
    x = Tensor(np.ones((2, 3, 4), dtype=np.float32), requires_grad=True)
    out = x.sum(axis=1, keepdims=True)
    assert out.shape == (2, 1, 4)
    backward(out.sum())
    assert np.array_equal(x.grad, np.ones((2, 3, 4), dtype=np.float32))


def test_mean_divides_by_count():
    x = Tensor(np.ones((2, 5), dtype=np.float32), requires_grad=True)
    backward(x.mean(axis=1).sum())
    assert np.allclose(x.grad, 0.2)


def test_concat_splits_gradient():
    a = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    b = Tensor(np.ones((2, 5), dtype=np.float32), requires_grad=True)
    out = T.concat([a, b], axis=1)
    assert out.shape == (2, 8)
    w = np.arange(16, dtype=np.float32).reshape(2, 8)
    backward((out * Tensor(w)).sum())
    assert np.array_equal(a.grad, w[:, :3])
    assert np.array_equal(b.grad, w[:, 3:])


def test_pad_axis_zero_fill_and_grad():
    x = Tensor(np.ones((2, 3), dtype=np.float32), requires_grad=True)
    out = T.pad_axis(x, 1, 1, 2)
    assert out.shape == (2, 6)
    assert np.array_equal(out.data[:, 0], [0.0, 0.0])
    assert np.array_equal(out.data[:, 4:], np.zeros((2, 2), dtype=np.float32))
    w = np.arange(12, dtype=np.float32).reshape(2, 6)
    backward((out * Tensor(w)).sum())
    assert np.array_equal(x.grad, w[:, 1:4])


def test_pad_axis_noop_returns_same_tensor():
    x = Tensor(np.ones(3))
    assert T.pad_axis(x, 0, 0, 0) is x


def test_exp_log_inverse():
    x = Tensor(np.array([0.5, 1.0, 2.0], dtype=np.float64), requires_grad=True)
    backward(T.log(T.exp(x)).sum())
    assert np.allclose(T.log(T.exp(x)).data, x.data, atol=1e-12)
    assert np.allclose(x.grad, 1.0, atol=1e-12)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        backward(x + 1.0)


def test_backward_rejects_detached_loss():
    x = Tensor(np.ones(()))  # requires_grad=False, never recorded
    with pytest.raises(GraphError):
        backward(x)


def test_backward_on_bare_leaf_sets_unit_grad():
    x = Tensor(np.float32(3.0), requires_grad=True)
    backward(x)
    assert x.grad == 1.0
    backward(x)
    assert x.grad == 2.0


def test_repeated_backward_accumulates():
    x = Tensor([2.0], requires_grad=True)
    loss = (x * x).sum()
    backward(loss)
    first = x.grad.copy()
    backward(loss)
    assert np.allclose(x.grad, 2 * first)


def test_zero_grad_clears():
    x = Tensor([2.0], requires_grad=True)
    backward((x * 3.0).sum())
    x.zero_grad()
    assert x.grad is None


def test_scalar_tensor_sum_keeps_float64():
    # 0-d numpy results collapse to scalar types; the wrapper must keep
    # the dtype instead of falling back to the float32 default.
    a = Tensor(np.float64(1.0) + np.zeros((), dtype=np.float64), requires_grad=True)
    b = Tensor(np.zeros((), dtype=np.float64), requires_grad=True)
    s = a.sum() + b.sum()
    assert s.dtype == np.float64
    assert isinstance(s.data, np.ndarray)


def test_grad_flows_through_shared_input():
    x = Tensor([3.0], requires_grad=True)
    backward((x * x + x).sum())  # d/dx (x^2 + x) = 2x + 1
    assert np.allclose(x.grad, 7.0)


def test_diamond_graph_accumulates_paths():
    x = Tensor([1.0], requires_grad=True)
    y = x * 2.0
    z = x * 3.0
    backward((y + z).sum())
    assert np.allclose(x.grad, 5.0)


def test_no_grad_suppresses_recording():
    tape = ComputationTape()
    with tape:
        with no_grad():
            x = Tensor([1.0], requires_grad=True)
            y = x * 2.0
    assert len(tape) == 0
    assert not y.requires_grad


def test_untracked_inputs_record_nothing():
    tape = ComputationTape()
    with tape:
        out = Tensor([1.0]) * Tensor([2.0])
    assert len(tape) == 0
    assert not out.requires_grad


def test_tape_context_isolates_recording():
    outer_len = len(default_tape())
    x = Tensor([1.0], requires_grad=True)
    with ComputationTape() as tape:
        backward((x * 2.0).sum())
    assert len(default_tape()) == outer_len
    assert len(tape) == 2  # mul, sum
    assert np.allclose(x.grad, 2.0)


def test_backward_only_touches_requested_loss_subgraph():
    x = Tensor([1.0], requires_grad=True)
    y = Tensor([1.0], requires_grad=True)
    loss_x = (x * 2.0).sum()
    (y * 3.0).sum()  # recorded but never differentiated
    backward(loss_x)
    assert np.allclose(x.grad, 2.0)
    assert y.grad is None


def test_detach_stops_gradient():
    x = Tensor([2.0], requires_grad=True)
    d = x.detach()
    assert not d.requires_grad
    y = Tensor([5.0], requires_grad=True)
    backward((d * y).sum())
    assert x.grad is None
    assert np.allclose(y.grad, 2.0)


def test_intermediate_nodes_keep_no_grad():
    x = Tensor([1.0], requires_grad=True)
    mid = x * 2.0
    backward((mid * 3.0).sum())
    assert mid.grad is None  # only leaves receive .grad
    assert np.allclose(x.grad, 6.0)


def test_unbroadcast_sums_leading_and_kept_axes():
    g = np.ones((4, 2, 3))
    assert unbroadcast(g, (2, 3)).shape == (2, 3)
    assert np.all(unbroadcast(g, (2, 3)) == 4.0)
    g2 = np.ones((2, 3))
    assert unbroadcast(g2, (1, 3)).shape == (1, 3)
    assert np.all(unbroadcast(g2, (1, 3)) == 2.0)


def test_debug_checks_flag_raises_on_nan():
    with np.errstate(invalid="ignore"):
        T.set_debug_checks(True)
        try:
            x = Tensor([-1.0], requires_grad=True)
            with pytest.raises(FloatingPointError):
                T.log(x)
        finally:
            T.set_debug_checks(False)
        out = T.log(Tensor([-1.0]))  # no raise without the flag
    assert np.isnan(out.data).all()
