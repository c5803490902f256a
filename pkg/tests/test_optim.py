"""Adam and SGD step checks against a scalar reference implementation."""

import numpy as np
import pytest

from mobicast.errors import ShapeError
from mobicast.optim import (ADAM_BETA1, ADAM_BETA2, ADAM_EPS, AdamState,
                            adam_init, adam_step, sgd_step)
from mobicast.rng import Rng


def adam_reference(p0, grads, lr):
    """Independent scalar Adam loop."""
    m = v = 0.0
    p = p0
    for t, g in enumerate(grads, start=1):
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        mhat = m / (1 - ADAM_BETA1 ** t)
        vhat = v / (1 - ADAM_BETA2 ** t)
        p -= lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
    return p


class TestAdam:
    def test_first_step_unit_gradient(self):
        # with bias correction the very first step moves by almost exactly lr
        params = {"w": np.array([[1.0]])}
        state = adam_init(params)
        out = adam_step(params, {"w": np.array([[1.0]])}, state, 1e-3)
        assert abs(out["w"][0, 0] - 0.999) < 1e-9

    def test_matches_scalar_reference_over_many_steps(self):
        rng = Rng(0)
        grads = rng.normal(40)
        params = {"w": np.array([[0.7]])}
        state = adam_init(params)
        for g in grads:
            params = adam_step(params, {"w": np.array([[g]])}, state, 0.01)
        want = adam_reference(0.7, grads, 0.01)
        np.testing.assert_allclose(params["w"][0, 0], want, rtol=1e-12)

    def test_elementwise_independence(self):
        # a 2-vector must update exactly like two scalars
        rng = Rng(1)
        g1, g2 = rng.normal(10), rng.normal(10)
        params = {"w": np.array([[0.5, -0.3]])}
        state = adam_init(params)
        for a, b in zip(g1, g2):
            params = adam_step(params, {"w": np.array([[a, b]])}, state, 0.02)
        np.testing.assert_allclose(params["w"][0, 0], adam_reference(0.5, g1, 0.02), rtol=1e-12)
        np.testing.assert_allclose(params["w"][0, 1], adam_reference(-0.3, g2, 0.02), rtol=1e-12)

    def test_functional_inputs_untouched(self):
        params = {"w": np.array([[1.0]])}
        state = adam_init(params)
        adam_step(params, {"w": np.array([[2.0]])}, state, 0.1)
        assert params["w"][0, 0] == 1.0
        assert state.step == 1

    def test_key_mismatch_raises(self):
        params = {"w": np.zeros((1, 1))}
        with pytest.raises(ShapeError, match="keys"):
            adam_step(params, {"b": np.zeros((1, 1))}, adam_init(params), 0.1)

    def test_shape_mismatch_raises(self):
        params = {"w": np.zeros((2, 2))}
        with pytest.raises(ShapeError, match="w"):
            adam_step(params, {"w": np.zeros((1, 2))}, adam_init(params), 0.1)


class TestSgd:
    def test_exact_update(self):
        params = {"w": np.array([[1.0, 2.0]]), "b": np.array([[0.5]])}
        grads = {"w": np.array([[10.0, -4.0]]), "b": np.array([[1.0]])}
        out = sgd_step(params, grads, 0.1)
        np.testing.assert_allclose(out["w"], [[0.0, 2.4]])
        np.testing.assert_allclose(out["b"], [[0.4]])
        assert params["w"][0, 0] == 1.0  # untouched

    def test_zero_lr_is_identity_but_fresh_arrays(self):
        params = {"w": np.ones((2, 2))}
        out = sgd_step(params, {"w": np.full((2, 2), 9.0)}, 0.0)
        np.testing.assert_array_equal(out["w"], params["w"])
        assert out["w"] is not params["w"]
