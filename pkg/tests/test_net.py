import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepregionlets import net
from deepregionlets.gradcheck import layer_checks
from deepregionlets.net import Parameter
from deepregionlets.rng import Rng
from oracles import central_diff, rel_err


def test_every_layer_passes_fd():
    rng = Rng(0)
    for _ in range(3):
        for name, err in layer_checks(rng).items():
            assert err < 1e-5, name


def test_conv_matches_direct_loops():
    rng = Rng(1)
    x = rng.normal_array((1, 2, 5, 6))
    w = rng.normal_array((3, 2, 3, 3))
    b = rng.normal_array(3)
    for stride in (1, 2):
        y, _ = net.conv2d_forward(x, w, b, stride)
        Ho, Wo = (5 - 3) // stride + 1, (6 - 3) // stride + 1
        ref = np.zeros((1, 3, Ho, Wo))
        for o in range(3):
            for i in range(Ho):
                for j in range(Wo):
                    patch = x[0, :, i * stride:i * stride + 3, j * stride:j * stride + 3]
                    ref[0, o, i, j] = (patch * w[o]).sum() + b[o]
        np.testing.assert_allclose(y, ref, rtol=1e-13)


def test_conv_input_grad_against_test_oracle():
    rng = Rng(2)
    x = rng.normal_array((1, 1, 5, 5))
    w = rng.normal_array((2, 1, 3, 3))
    b = np.zeros(2)
    y, cache = net.conv2d_forward(x, w, b, 2)
    G = rng.normal_array(y.shape)
    gx, _, _ = net.conv2d_backward(cache, G)
    numeric = central_diff(lambda v: float((net.conv2d_forward(v, w, b, 2)[0] * G).sum()), x, 1e-5)
    assert rel_err(gx, numeric) < 1e-6


def test_softmax_ce_uniform_two_class():
    loss, grad = net.softmax_ce(np.zeros(2), 0)
    assert loss == pytest.approx(math.log(2), abs=1e-15)
    np.testing.assert_allclose(grad, [-0.5, 0.5])


def test_softmax_ce_batch_is_mean():
    rng = Rng(3)
    logits = rng.normal_array((4, 3))
    labels = np.array([0, 2, 1, 1])
    loss, grad = net.softmax_ce(logits, labels)
    singles = [net.softmax_ce(logits[i], labels[i]) for i in range(4)]
    assert loss == pytest.approx(np.mean([s[0] for s in singles]), rel=1e-14)
    np.testing.assert_allclose(grad, np.stack([s[1] for s in singles]) / 4, rtol=1e-14)


def test_softmax_ce_is_stable_for_large_logits():
    loss, grad = net.softmax_ce(np.array([1000.0, 0.0]), 1)
    assert loss == pytest.approx(1000.0)
    assert np.all(np.isfinite(grad))


def test_softmax_ce_rejects_bad_label():
    with pytest.raises(ValueError):
        net.softmax_ce(np.zeros(3), 3)


def test_smooth_l1_branches():
    loss, grad = net.smooth_l1(np.array([0.5, 3.0, -2.0]), np.zeros(3))
    assert loss == pytest.approx(0.125 + 2.5 + 1.5)
    np.testing.assert_array_equal(grad, [0.5, 1.0, -1.0])


def test_sigmoid_extremes():
    s = net.sigmoid(np.array([-800.0, 0.0, 800.0]))
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


def test_sgd_plain_step():
    p = Parameter(np.array([1.0, 2.0]))
    p.grad[:] = [0.5, -1.0]
    net.sgd_step([p], lr=1.0, momentum=0.0)
    np.testing.assert_array_equal(p.value, [0.5, 3.0])
    np.testing.assert_array_equal(p.grad, 0.0)


def test_sgd_momentum_recurrence():
    p = Parameter(np.array([0.0]))
    lr, m = 0.1, 0.9
    v = 0.0
    value = 0.0
    for g in (1.0, 2.0, -0.5):
        p.grad[:] = g
        net.sgd_step([p], lr, m)
        v = m * v + g
        value -= lr * v
        assert p.value[0] == pytest.approx(value, abs=1e-15)
    assert p.velocity[0] == pytest.approx(v)


def test_sgd_zero_grad_is_noop():
    p = Parameter(np.array([1.5, -2.0]))
    net.sgd_step([p], 0.3, 0.9)
    np.testing.assert_array_equal(p.value, [1.5, -2.0])


def test_fd_check_detects_wrong_gradient():
    f = lambda x: float((x ** 2).sum())
    x0 = np.array([1.0, -2.0, 0.5])
    assert net.fd_check(f, x0, 2 * x0) < 1e-8
    assert net.fd_check(f, x0, 2 * x0 + np.array([0.0, 0.1, 0.0])) > 1e-3


def test_fd_check_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        net.fd_check(lambda x: float(x.sum()), np.zeros(3), np.zeros(2))


def test_shape_mismatch_errors():
    with pytest.raises(ValueError):
        net.fc_forward(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))
    with pytest.raises(ValueError):
        net.conv2d_forward(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 3, 3)), np.zeros(1))
    with pytest.raises(ValueError):
        net.conv2d_forward(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)), np.zeros(1))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=6), st.data())
def test_softmax_ce_grad_sums_to_zero(logits, data):
    label = data.draw(st.integers(0, len(logits) - 1))
    loss, grad = net.softmax_ce(np.array(logits), label)
    assert loss >= 0.0
    assert abs(grad.sum()) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_fc_backward_is_adjoint(seed):
    rng = Rng(seed)
    x = rng.normal_array((3, 4))
    w = rng.normal_array((4, 5))
    dx = rng.normal_array((3, 4))
    G = rng.normal_array((3, 5))
    _, cache = net.fc_forward(x, w, np.zeros(5))
    gx, _, _ = net.fc_backward(cache, w, G)
    assert float((dx @ w * G).sum()) == pytest.approx(float((gx * dx).sum()), rel=1e-10, abs=1e-12)
