import numpy as np
import pytest

from fewdet.errors import ShapeError
from fewdet.optim import AdamState, adam_step, collect_grads, zero_grads
from fewdet.tensor import Tensor, tsum


def test_zero_gradient_leaves_parameters_unchanged():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState()
    adam_step({"p": p}, {"p": np.zeros(2)}, state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step_count == 1


def test_first_step_magnitude_is_learning_rate():
    # On f(x) = x the gradient is 1; bias correction makes the first step
    # equal to the learning rate (up to epsilon).
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = AdamState(learning_rate=0.1)
    adam_step({"p": p}, {"p": np.ones(1)}, state)
    assert p.data[0] == pytest.approx(0.9, abs=1e-6)


def test_quadratic_descent_monotone_after_warmup():
    target = np.array([0.3, -1.2, 2.0])
    p = Tensor(np.zeros(3), requires_grad=True)
    state = AdamState(learning_rate=0.01)
    losses = []
    for _ in range(200):
        zero_grads({"p": p})
        diff = p - Tensor(target)
        loss = tsum(diff * diff)
        losses.append(loss.item())
        loss.backward()
        adam_step({"p": p}, collect_grads({"p": p}), state)
    for k in range(10, len(losses) - 1):
        assert losses[k + 1] < losses[k]


def test_shape_mismatch_rejected():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ShapeError):
        adam_step({"p": p}, {"p": np.zeros(4)}, AdamState())


def test_step_count_increments_once_per_update():
    p = Tensor(np.zeros(2), requires_grad=True)
    state = AdamState()
    for expected in range(1, 5):
        adam_step({"p": p}, {"p": np.ones(2)}, state)
        assert state.step_count == expected


def test_skipped_parameters_keep_moments_untouched():
    p = Tensor(np.zeros(2), requires_grad=True)
    q = Tensor(np.zeros(2), requires_grad=True)
    state = AdamState()
    adam_step({"p": p, "q": q}, {"p": np.ones(2)}, state)
    assert "q" not in state.first_moment
    np.testing.assert_array_equal(q.data, np.zeros(2))
