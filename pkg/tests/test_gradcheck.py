"""The finite-difference checker itself: accuracy and bug detection."""

import numpy as np
import pytest

from volfuse import ops
from volfuse.errors import NonFiniteError
from volfuse.gradcheck import grad_check, nudge_from_kinks
from volfuse.rng import Rng
from volfuse.tensor import Tensor, result_tensor


def test_dense_under_1e6():
    rng = Rng(0)
    inputs = [Tensor(rng.uniform(-1, 1, s)) for s in [(3, 5), (4, 5), (4,)]]
    err = grad_check(lambda ts: ops.dense(*ts), inputs, eps=1e-5, rng=Rng(1))
    assert err < 1e-6


def test_sigmoid_chain_under_1e6():
    rng = Rng(2)
    inputs = [Tensor(rng.uniform(-1, 1, s)) for s in [(3, 4), (2, 4), (2,)]]
    err = grad_check(
        lambda ts: ops.sigmoid(ops.dense(ts[0], ts[1], ts[2])), inputs, eps=1e-5, rng=Rng(3)
    )
    assert err < 1e-6


def test_conv2d_under_1e5():
    rng = Rng(4)
    inputs = [
        Tensor(rng.uniform(-1, 1, (1, 2, 5, 5))),
        Tensor(rng.uniform(-1, 1, (3, 2, 3, 3))),
        Tensor(rng.uniform(-1, 1, (3,))),
    ]
    err = grad_check(lambda ts: ops.conv2d(*ts, pad=1), inputs, eps=1e-5, rng=Rng(5))
    assert err < 1e-5


def test_broken_backward_is_caught():
    def broken_scale(ts):
        x = ts[0]
        out = x.data * 3.0

        def backward(g):
            x._accumulate(g * 2.0)  # wrong on purpose: true jacobian is 3

        return result_tensor(out, "broken", (x,), backward)

    err = grad_check(broken_scale, [Tensor(np.ones(4))], rng=Rng(6))
    assert err > 0.3  # |3-2|/3


def test_nonfinite_gradient_errors():
    def bad(ts):
        x = ts[0]
        out = x.data * 1.0

        def backward(g):
            x._accumulate(g * np.nan)

        return result_tensor(out, "bad", (x,), backward)

    with pytest.raises(NonFiniteError):
        grad_check(bad, [Tensor(np.ones(3))], rng=Rng(7))


def test_nudge_from_kinks():
    arr = np.array([-1e-7, 0.0, 1e-7, 0.5])
    out = nudge_from_kinks(arr, 1e-3)
    assert np.all(np.abs(out[:3]) == 1e-3)
    assert out[3] == 0.5


def test_relu_input_gradient_after_nudge():
    rng = Rng(8)
    x = Tensor(nudge_from_kinks(rng.uniform(-1, 1, (6, 6)), 1e-3))
    err = grad_check(lambda ts: ops.relu(ts[0]), [x], eps=1e-5, rng=Rng(9))
    assert err < 1e-6


def test_sampled_coordinates_deterministic():
    rng = Rng(10)
    x = Tensor(rng.uniform(-1, 1, (40,)))
    w = rng.uniform(-1, 1, (40,))
    a = grad_check(lambda ts: ops.weighted_sum_over_axis(ts[0], w, 0), [x],
                   rng=Rng(11), max_elements=5)
    b = grad_check(lambda ts: ops.weighted_sum_over_axis(ts[0], w, 0), [x],
                   rng=Rng(11), max_elements=5)
    assert a == b
