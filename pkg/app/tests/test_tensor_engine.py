import threading

import numpy as np
import pytest

from app.core.errors import ContractError, NumericFaultError, ShapeMismatchError
from app.services import tensor_engine as te
from app.services.tensor_engine import AdamState, Tensor, adam_step


def test_add_broadcast_gradient():
    """Broadcast operands get gradients reduced back to their own shape"""
    a = Tensor(np.ones((3, 2)), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = (a + b).sum()
    te.backward(loss)

    np.testing.assert_allclose(a.grad, np.ones((3, 2)))
    np.testing.assert_allclose(b.grad, [3.0, 3.0])


def test_multiply_and_subtract_gradients():
    a = Tensor([2.0, 3.0], requires_grad=True)
    b = Tensor([5.0, 7.0], requires_grad=True)
    te.backward((a * b - a).sum())

    np.testing.assert_allclose(a.grad, [4.0, 6.0])
    np.testing.assert_allclose(b.grad, [2.0, 3.0])


def test_matmul_gradient():
    a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    w = Tensor(np.ones((3, 4)), requires_grad=True)
    te.backward((a @ w).sum())

    np.testing.assert_allclose(a.grad, np.full((2, 3), 4.0))
    np.testing.assert_allclose(w.grad, np.tile(a.values.sum(axis=0)[:, None], (1, 4)))


def test_matmul_rejects_vectors():
    with pytest.raises(ShapeMismatchError):
        te.matmul(Tensor([1.0, 2.0]), Tensor(np.ones((2, 2))))


def test_matmul_inner_mismatch():
    with pytest.raises(ShapeMismatchError):
        te.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_unary_gradients():
    """Derivatives of the elementwise primitives at a few points"""
    x = np.array([0.3, 1.2, 2.0])
    cases = {
        "square": (lambda t: t.square(), 2 * x),
        "sqrt": (lambda t: t.sqrt(), 0.5 / np.sqrt(x)),
        "exp": (lambda t: t.exp(), np.exp(x)),
        "sin": (lambda t: t.sin(), np.cos(x)),
        "cos": (lambda t: t.cos(), -np.sin(x)),
        "tanh": (lambda t: t.tanh(), 1 - np.tanh(x) ** 2),
    }
    for name, (fn, expected) in cases.items():
        t = Tensor(x, requires_grad=True)
        te.backward(fn(t).sum())
        np.testing.assert_allclose(t.grad, expected, rtol=1e-12, err_msg=name)


def test_mean_and_reductions():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    te.backward(x.mean(axis=0).sum())
    np.testing.assert_allclose(x.grad, np.full((2, 3), 0.5))

    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    te.backward(x.sum(axis=1, keepdims=True).mean())
    np.testing.assert_allclose(x.grad, np.full((2, 3), 0.5))


def test_concatenate_and_slice_gradients():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 1)), requires_grad=True)
    joined = te.concatenate([a, b], axis=-1)
    assert joined.shape == (2, 3)

    te.backward((joined[..., 1:] * 3.0).sum())
    np.testing.assert_allclose(a.grad, [[0.0, 3.0], [0.0, 3.0]])
    np.testing.assert_allclose(b.grad, [[3.0], [3.0]])


def test_reshape_swap_and_broadcast_gradients():
    x = Tensor(np.arange(6.0), requires_grad=True)
    y = x.reshape(2, 3).swapaxes()
    assert y.shape == (3, 2)
    te.backward((y * np.arange(6.0).reshape(3, 2)).sum())
    # y[i, j] = x[j * 3 + i]
    np.testing.assert_allclose(x.grad, [0.0, 2.0, 4.0, 1.0, 3.0, 5.0])

    v = Tensor([1.0, 2.0], requires_grad=True)
    te.backward(v.broadcast_to((4, 2)).sum())
    np.testing.assert_allclose(v.grad, [4.0, 4.0])


def test_shared_subexpression_accumulates():
    """A node used twice sums both contributions"""
    x = Tensor([3.0], requires_grad=True)
    y = x * 2.0
    te.backward((y * y).sum())
    np.testing.assert_allclose(x.grad, [24.0])


def test_gradients_accumulate_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    te.backward(x.sum())
    te.backward(x.sum())
    np.testing.assert_allclose(x.grad, [2.0, 2.0])

    te.zero_grad([x])
    assert x.grad is None


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with te.no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert len(te.get_tape()) == 0


def test_tape_is_per_thread():
    x = Tensor([1.0], requires_grad=True)
    _ = x * 2.0
    sizes = []

    def worker():
        sizes.append(len(te.get_tape()))

    thread = threading.Thread(target=worker)
    thread.start()
    thread.join()

    assert sizes == [0]
    assert len(te.get_tape()) == 1


def test_backward_contract_errors():
    with pytest.raises(ContractError):
        te.backward(Tensor([1.0, 2.0], requires_grad=True) * 1.0)

    te.clear_tape()
    with pytest.raises(ContractError):
        te.backward(Tensor([1.0]))


def test_non_finite_results_fault():
    with pytest.raises(NumericFaultError):
        Tensor([np.nan])
    with pytest.raises(NumericFaultError):
        Tensor([-1.0]).sqrt()
    with pytest.raises(NumericFaultError):
        Tensor([1000.0]).exp()


def test_division_only_by_scalars():
    x = Tensor([2.0, 4.0])
    np.testing.assert_allclose((x / 2).values, [1.0, 2.0])
    with pytest.raises(ContractError):
        x / np.array([1.0, 2.0])


def test_adam_first_step_moves_by_learning_rate():
    """The bias-corrected first update has magnitude close to the learning rate"""
    p = Tensor([1.0, -1.0], requires_grad=True)
    state = AdamState([p], learning_rate=0.1)
    adam_step([p], [np.array([2.0, -2.0])], state)

    np.testing.assert_allclose(p.values, [0.9, -0.9], atol=1e-6)
    assert state.step == 1


def test_adam_none_gradient_is_zero():
    p = Tensor([1.0], requires_grad=True)
    state = AdamState([p])
    adam_step([p], [None], state)
    np.testing.assert_array_equal(p.values, [1.0])


def test_adam_non_finite_gradient_leaves_every_parameter_untouched():
    """A NaN in the last gradient must not let the earlier parameters move"""
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0], requires_grad=True)
    state = AdamState([a, b], learning_rate=0.1)
    with pytest.raises(NumericFaultError):
        adam_step([a, b], [np.array([1.0, 1.0]), np.array([np.nan])], state)

    np.testing.assert_array_equal(a.values, [1.0, 2.0])
    np.testing.assert_array_equal(b.values, [3.0])
    np.testing.assert_array_equal(state.m[0], [0.0, 0.0])
    assert state.step == 0


def test_adam_overflowing_update_is_atomic():
    a = Tensor([1.0], requires_grad=True)
    b = Tensor([np.finfo(np.float64).max], requires_grad=True)
    state = AdamState([a, b], learning_rate=np.finfo(np.float64).max)
    with pytest.raises(NumericFaultError):
        adam_step([a, b], [np.array([1.0]), np.array([-1.0])], state)
    np.testing.assert_array_equal(a.values, [1.0])
    assert state.step == 0


def test_adam_decoupled_decay_only_on_flagged_parameters():
    decayed = Tensor([2.0, -4.0], requires_grad=True)
    plain = Tensor([2.0], requires_grad=True)
    state = AdamState([decayed, plain], learning_rate=0.1, weight_decay=0.5, decayed=[decayed])
    adam_step([decayed, plain], [None, None], state)

    # zero gradient: only the decay term 0.1 * 0.5 * p acts
    np.testing.assert_allclose(decayed.values, [1.9, -3.8])
    np.testing.assert_array_equal(plain.values, [2.0])


def test_adam_state_roundtrip_and_shape_check():
    p = Tensor(np.ones(3), requires_grad=True)
    state = AdamState([p], learning_rate=0.01)
    adam_step([p], [np.ones(3)], state)

    restored = AdamState([Tensor(np.ones(3))], learning_rate=0.01)
    restored.load_state_dict(state.state_dict())
    assert restored.step == 1
    np.testing.assert_array_equal(restored.m[0], state.m[0])

    wrong = AdamState([Tensor(np.ones(2))])
    with pytest.raises(ShapeMismatchError):
        wrong.load_state_dict(state.state_dict())


def test_adam_rejects_mismatched_lists():
    p = Tensor(np.ones(2), requires_grad=True)
    state = AdamState([p])
    with pytest.raises(ContractError):
        adam_step([p], [], state)
    with pytest.raises(ShapeMismatchError):
        adam_step([p], [np.ones(3)], state)


def test_backward_is_linear_in_the_loss():
    x = Tensor([0.5, -1.5, 2.0], requires_grad=True)
    te.backward(x.square().sum())
    first = x.grad.copy()
    te.zero_grad([x])
    te.backward(x.tanh().sum())
    second = x.grad.copy()
    te.zero_grad([x])

    te.backward(x.square().sum() + x.tanh().sum())
    np.testing.assert_allclose(x.grad, first + second, rtol=1e-12)


def test_adam_zero_gradient_leaves_parameters():
    p = Tensor([0.3, -0.7], requires_grad=True)
    state = AdamState([p], learning_rate=0.1)
    for _ in range(5):
        adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.values, [0.3, -0.7])
    assert state.step == 5


def test_adam_minimizes_quadratic():
    w = Tensor([0.0], requires_grad=True)
    state = AdamState([w], learning_rate=0.1)
    for _ in range(100):
        te.backward((w - 3.0).square().sum())
        adam_step([w], [w.grad], state)
        te.zero_grad([w])
    assert abs(w.values[0] - 3.0) < 0.5
