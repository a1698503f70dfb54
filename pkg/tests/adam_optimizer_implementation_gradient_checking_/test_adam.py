import numpy as np
import pytest

from oneshot_tkg.autodiff import AdamState, Tensor, adam_step, precision
from oneshot_tkg.errors import ShapeMismatch


def reference_adam(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    """Plain loop over steps, straight from the textbook update."""
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_first_step_with_unit_gradient():
    p = Tensor(np.full(4, 0.5), requires_grad=True)
    adam_step({"p": p}, {"p": np.ones(4)}, AdamState(lr=1e-3))
    # m_hat = v_hat = 1 so the step is lr / (1 + eps)
    np.testing.assert_allclose(0.5 - p.data, 1e-3, atol=1e-6)


def test_zero_gradient_leaves_parameters():
    with precision(np.float64):
        p = Tensor(np.arange(3.0), requires_grad=True)
    adam_step({"p": p}, {"p": np.zeros(3)}, AdamState())
    np.testing.assert_array_equal(p.data, np.arange(3.0))


def test_missing_gradient_is_skipped():
    p = Tensor(np.ones(2), requires_grad=True)
    state = AdamState()
    adam_step({"p": p}, {"p": None}, state)
    np.testing.assert_array_equal(p.data, np.ones(2))
    assert "p" not in state.m


def test_matches_reference_over_many_steps(rng):
    init = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(25)]
    with precision(np.float64):
        p = Tensor(init.copy(), requires_grad=True)
    state = AdamState(lr=0.01)
    for g in grads:
        adam_step({"w": p}, {"w": g}, state)
    np.testing.assert_allclose(p.data, reference_adam(init, grads, lr=0.01), atol=1e-12)
    assert state.step == 25


def test_bit_identical_runs(rng):
    grads = [rng.normal(size=5) for _ in range(100)]

    def run():
        p = Tensor(np.linspace(-1, 1, 5), requires_grad=True)
        state = AdamState()
        for g in grads:
            adam_step({"p": p}, {"p": g}, state)
        return p.data.tobytes()
    assert run() == run()


def test_gradient_shape_checked():
    p = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeMismatch):
        adam_step({"p": p}, {"p": np.ones(4)}, AdamState())


def test_minimizes_quadratic():
    with precision(np.float64):
        p = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    state = AdamState(lr=0.05)
    for _ in range(2000):
        adam_step({"p": p}, {"p": 2 * p.data}, state)
    np.testing.assert_allclose(p.data, 0.0, atol=1e-3)
