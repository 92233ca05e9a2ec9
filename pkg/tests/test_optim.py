import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ReferenceAdam
from smalcap.optim import AdamConfig, AdamState, adam_step


def test_zero_gradient_leaves_params():
    p = {"x": np.array([1.0, -2.0])}
    out, st_ = adam_step(p, {"x": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(out["x"], p["x"])
    assert st_.t == 1


@settings(max_examples=30)
@given(st.floats(-1e3, 1e3).filter(lambda g: abs(g) > 1e-3), st.integers(1, 50))
def test_constant_gradient_moves_lr_times_sign(g, steps):
    hyper = AdamConfig(lr=0.01)
    p, s = {"x": np.zeros(1)}, AdamState()
    for k in range(steps):
        prev = p["x"].copy()
        p, s = adam_step(p, {"x": np.full(1, g)}, s, hyper)
        # bias correction makes every step exactly lr * sign(g) (up to eps)
        np.testing.assert_allclose(prev - p["x"], 0.01 * np.sign(g), rtol=1e-6)


def test_matches_reference_over_random_steps(rng):
    hyper = AdamConfig(lr=3e-3, beta1=0.85, beta2=0.995, eps=1e-7)
    x = rng.normal(size=7)
    ref = ReferenceAdam(hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)
    p, s, y = {"x": x.copy()}, AdamState(), x.copy()
    for _ in range(100):
        g = rng.normal(size=7) * rng.uniform(0.01, 10)
        p, s = adam_step(p, {"x": g}, s, hyper)
        y = ref.step(y, g)
    assert np.abs(p["x"] - y).max() < 1e-10


def test_per_name_learning_rates_and_partial_updates():
    p = {"a": np.ones(2), "b": np.ones(2), "c": np.ones(2)}
    g = {"a": np.ones(2), "b": np.ones(2)}
    out, s = adam_step(p, g, AdamState(), AdamConfig(), lr={"a": 0.1, "b": 0.01})
    np.testing.assert_allclose(out["a"], 0.9, rtol=1e-6)
    np.testing.assert_allclose(out["b"], 0.99, rtol=1e-6)
    assert out["c"] is p["c"] and "c" not in s.m
    np.testing.assert_array_equal(p["a"], 1.0)            # inputs untouched


def test_validation():
    with pytest.raises(ValueError):
        AdamConfig(lr=0.0)
    with pytest.raises(ValueError):
        AdamConfig(beta1=1.0)
    with pytest.raises(ValueError):
        adam_step({"x": np.zeros(2)}, {"x": np.zeros(3)}, AdamState())
