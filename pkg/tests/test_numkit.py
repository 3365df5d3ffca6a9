import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bamlab.model import init_model
from bamlab.numkit import (InvalidInputError, NumericError, OptimizerState, ce_logit_gradient,
                           cross_entropy, forward_backward, sgd_step, sgd_update, softmax)

from .oracles import fd_check_model, random_instance


def test_softmax_symmetric():
    np.testing.assert_array_equal(softmax([0.0, 0.0]), [0.5, 0.5])


def test_softmax_stable_for_huge_logits():
    p = softmax([1000.0, 0.0])
    assert np.all(np.isfinite(p))
    assert p[0] == pytest.approx(1.0)
    assert p[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_matches_extended_precision():
    mpmath.mp.dps = 50
    logits = [1, 2, 3]
    denom = sum(mpmath.exp(v) for v in logits)
    expected = [float(mpmath.exp(v) / denom) for v in logits]
    np.testing.assert_allclose(softmax(logits), expected, rtol=1e-14)


def test_softmax_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        softmax([0.0, np.nan])
    with pytest.raises(InvalidInputError):
        softmax([np.inf, 0.0])


@given(st.lists(st.floats(-15, 15), min_size=2, max_size=8))
def test_softmax_is_a_distribution(logits):
    # spreads beyond ~36 round the top probability to exactly 1.0 in float64
    p = softmax(logits)
    assert np.all(p > 0) and np.all(p < 1)
    assert abs(p.sum() - 1.0) <= 1e-12


def test_cross_entropy_closed_forms():
    assert cross_entropy([1 - 1e-15, 5e-16, 5e-16], 0) == pytest.approx(0.0, abs=1e-14)
    assert cross_entropy([0.5, 0.5], 1) == pytest.approx(math.log(2))


def test_cross_entropy_clamps_zero_probability():
    assert cross_entropy([1.0, 0.0], 1) == pytest.approx(-math.log(1e-300))


def test_cross_entropy_matches_extended_precision():
    rng = np.random.default_rng(3)
    mpmath.mp.dps = 50
    for _ in range(20):
        logits = rng.normal(size=4) * 3
        label = int(rng.integers(4))
        denom = sum(mpmath.exp(mpmath.mpf(float(v))) for v in logits)
        expected = float(-mpmath.log(mpmath.exp(mpmath.mpf(float(logits[label]))) / denom))
        assert cross_entropy(softmax(logits), label) == pytest.approx(expected, rel=1e-12)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(InvalidInputError):
        cross_entropy([0.5, 0.5], 2)
    with pytest.raises(InvalidInputError):
        ce_logit_gradient([0.0, 0.0], -1)


def test_ce_gradient_closed_forms():
    np.testing.assert_allclose(ce_logit_gradient([0.0, 0.0], 0), [-0.5, 0.5])
    np.testing.assert_allclose(ce_logit_gradient([0.0, 0.0, 0.0], 2), [1 / 3, 1 / 3, -2 / 3])


def test_ce_gradient_matches_central_differences():
    rng = np.random.default_rng(0)
    h = 1e-5
    for _ in range(50):
        c = int(rng.integers(2, 6))
        z = rng.normal(size=c) * 2
        y = int(rng.integers(c))
        g = ce_logit_gradient(z, y)
        for k in range(c):
            e = np.zeros(c)
            e[k] = h
            fd = (cross_entropy(softmax(z + e), y) - cross_entropy(softmax(z - e), y)) / (2 * h)
            assert abs(g[k] - fd) <= 1e-6 * max(abs(fd), 1e-2)


def test_zero_offset_matches_no_offset_bit_for_bit():
    rng = np.random.default_rng(1)
    model = init_model((5, 7, 3), 4)
    x = rng.normal(size=(6, 5))
    y = rng.integers(3, size=6)
    l1, g1, o1 = forward_backward(model, x, y)
    l2, g2, o2 = forward_backward(model, x, y, np.zeros((6, 3)))
    assert o1 is None and o2.shape == (6, 3)
    assert l1 == l2
    for a, b in zip(g1.arrays(), g2.arrays()):
        assert np.array_equal(a, b)


def test_single_example_zero_model_loss_is_ln2():
    model = init_model((3, 2), 0)
    model.weights[0][:] = 0
    loss, _, _ = forward_backward(model, np.ones((1, 3)), [1], np.zeros((1, 2)))
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_forward_backward_shape_errors():
    model = init_model((3, 4, 2), 0)
    with pytest.raises(InvalidInputError):
        forward_backward(model, np.ones((2, 4)), [0, 1])
    with pytest.raises(InvalidInputError):
        forward_backward(model, np.ones((2, 3)), [0, 1, 1])
    with pytest.raises(InvalidInputError):
        forward_backward(model, np.ones((2, 3)), [0, 1], np.zeros((2, 3)))


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(20):
        dims = tuple(int(d) for d in rng.integers(1, 9, size=int(rng.integers(2, 5))))
        dims = dims[:-1] + (max(2, dims[-1]),)
        model, x = random_instance(rng, dims, int(rng.integers(1, 6)))
        n = x.shape[0]
        y = rng.integers(dims[-1], size=n)
        offset = rng.normal(size=(n, dims[-1]))
        assert fd_check_model(model, x, y, offset) == []


def test_forward_backward_deterministic():
    rng = np.random.default_rng(2)
    model = init_model((4, 6, 2), 9)
    x, y = rng.normal(size=(5, 4)), rng.integers(2, size=5)
    a = forward_backward(model, x, y)
    b = forward_backward(model, x, y)
    assert a[0] == b[0]
    assert all(np.array_equal(p, q) for p, q in zip(a[1].arrays(), b[1].arrays()))


def test_optimizer_state_starts_at_zero():
    model = init_model((3, 4, 2), 0)
    st_ = OptimizerState.for_arrays(model.arrays(), 0.1, 0.9, 0.0)
    assert [v.shape for v in st_.velocity] == [a.shape for a in model.arrays()]
    assert all(not v.any() for v in st_.velocity)


def test_optimizer_state_validation():
    with pytest.raises(InvalidInputError):
        OptimizerState(0.0, 0.9, 0.0)
    with pytest.raises(InvalidInputError):
        OptimizerState(0.1, 1.0, 0.0)
    with pytest.raises(InvalidInputError):
        OptimizerState(0.1, 0.5, -1.0)


def test_sgd_plain_step():
    p = [np.array([1.0, -2.0])]
    g = [np.array([0.5, 0.25])]
    sgd_update(p, g, OptimizerState.for_arrays(p, 0.1))
    np.testing.assert_array_equal(p[0], [1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25])


def test_sgd_zero_grad_no_change():
    model = init_model((3, 2), 5)
    before = model.copy()
    _, grads, _ = forward_backward(model, np.zeros((1, 3)), [0])
    zero = type(grads)([np.zeros_like(w) for w in grads.weights],
                       [np.zeros_like(b) for b in grads.biases])
    sgd_step(model, zero, OptimizerState.for_arrays(model.arrays(), 0.5, 0.9))
    assert model.equals(before)


def test_sgd_momentum_on_quadratic_matches_scalar_recurrence():
    # f(x) = 0.5 * a * x^2 + c*x, grad = a*x + c
    a, c, lr, m, wd = 3.0, -1.0, 0.1, 0.9, 0.01
    x = [np.array([2.0])]
    state = OptimizerState.for_arrays(x, lr, m, wd)
    xs, v = 2.0, 0.0
    for _ in range(2):
        sgd_update(x, [a * x[0] + c], state)
        v = m * v + (a * xs + c + wd * xs)
        xs = xs - lr * v
        assert x[0][0] == pytest.approx(xs, abs=1e-15)
    # by hand: v1 = 5.02, x1 = 1.498; v2 = 0.9*5.02 + 3.50898 = 8.02698, x2 = 0.695302
    assert x[0][0] == pytest.approx(0.695302, abs=1e-12)


def test_sgd_rejects_non_finite_gradient():
    p = [np.zeros(2)]
    with pytest.raises(NumericError):
        sgd_update(p, [np.array([np.nan, 0.0])], OptimizerState.for_arrays(p, 0.1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_sgd_deterministic(seed):
    rng = np.random.default_rng(seed)
    model = init_model((3, 4, 2), seed)
    x, y = rng.normal(size=(4, 3)), rng.integers(2, size=4)
    results = []
    for _ in range(2):
        m = model.copy()
        st_ = OptimizerState.for_arrays(m.arrays(), 0.05, 0.9, 1e-3)
        for _ in range(3):
            sgd_step(m, forward_backward(m, x, y)[1], st_)
        results.append(m)
    assert results[0].equals(results[1])
