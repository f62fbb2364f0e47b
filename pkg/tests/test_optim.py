"""Adam update arithmetic and global-norm clipping."""

import numpy as np
import pytest

from miles.autodiff import Tensor
from miles.errors import DimensionError
from miles.optim import BETA1, BETA2, EPS, AdamState, adam_step, clip_global_norm


def _params(**arrays):
    return {k: Tensor(np.asarray(v, dtype=np.float32), requires_grad=True)
            for k, v in arrays.items()}


def test_first_step_matches_hand_formula():
    params = _params(w=[1.0, 2.0])
    grads = {"w": np.array([0.5, -0.5], dtype=np.float32)}
    state = AdamState.for_params(params)
    adam_step(params, grads, state, lr=0.1)
    # bias correction makes the first update lr * g / (|g| + eps), sign(g) scaled
    m_hat = (1 - BETA1) * grads["w"] / (1 - BETA1)
    v_hat = (1 - BETA2) * grads["w"] ** 2 / (1 - BETA2)
    want = np.array([1.0, 2.0]) - 0.1 * m_hat / (np.sqrt(v_hat) + EPS)
    np.testing.assert_allclose(params["w"].data, want, rtol=1e-6)


def test_step_counter_advances_even_without_grads():
    params = _params(w=[1.0])
    state = AdamState.for_params(params)
    adam_step(params, {}, state, lr=0.1)
    assert state.step_count == 1
    np.testing.assert_allclose(params["w"].data, [1.0])


def test_param_rebinds_not_inplace():
    params = _params(w=[1.0])
    before = params["w"].data
    state = AdamState.for_params(params)
    adam_step(params, {"w": np.array([1.0], dtype=np.float32)}, state, lr=0.1)
    assert params["w"].data is not before
    np.testing.assert_allclose(before, [1.0])  # original buffer untouched


def test_shape_mismatch_raises():
    params = _params(w=np.ones((2, 2)))
    state = AdamState.for_params(params)
    with pytest.raises(DimensionError):
        adam_step(params, {"w": np.ones(3, dtype=np.float32)}, state, lr=0.1)


def test_quadratic_convergence():
    # minimize |w - target|^2; Adam's step size is capped near lr, so give it
    # enough steps to travel the ~5.8 unit gap and settle
    target = np.array([0.3, -0.7])
    params = _params(w=[5.0, 5.0])
    state = AdamState.for_params(params)
    for _ in range(400):
        g = 2.0 * (params["w"].data - target)
        adam_step(params, {"w": g.astype(np.float32)}, state, lr=0.05)
    assert np.linalg.norm(params["w"].data - target) < 1e-3


def test_clip_noop_below_threshold():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}  # norm 5
    norm = clip_global_norm(grads, 10.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(grads["a"], [3.0])


def test_clip_scales_to_max_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = clip_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)  # returns the pre-clip norm
    total = np.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))
    assert total == pytest.approx(1.0)


def test_clip_disabled_for_nonpositive_max():
    grads = {"a": np.array([30.0, 40.0])}
    clip_global_norm(grads, 0.0)
    np.testing.assert_allclose(grads["a"], [30.0, 40.0])
