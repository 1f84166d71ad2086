import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from invoxel import diffcore as dc
from invoxel.diffcore import GraphError, Tensor


def test_leaf_grads_accumulate_across_backward_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    dc.backward(dc.sum(x * x))
    dc.backward(dc.sum(x * 3.0))
    np.testing.assert_allclose(x.grad, [2 + 3, 4 + 3])


def test_shared_subexpression_sums_both_paths():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * x
    dc.backward(y + y)        # d/dx 2x^2 = 4x
    assert x.grad == pytest.approx(12.0)


def test_nonscalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        dc.backward(x * 2.0)


def test_consumed_graph_cannot_be_reused():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 2.0
    dc.backward(dc.sum(y))
    with pytest.raises(GraphError):
        dc.backward(dc.sum(y))
    with pytest.raises(GraphError):
        dc.add(y, x)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with dc.no_grad():
        y = dc.exp(x)
    assert not y.requires_grad
    assert len(dc.current_graph().nodes) == 0


def test_float32_default_and_float64_context():
    assert Tensor([1.0]).data.dtype == np.float32
    with dc.default_dtype(np.float64):
        assert Tensor([1.0]).data.dtype == np.float64
    assert dc.get_dtype() == np.float32


def test_shape_errors_name_the_op_and_shapes():
    with pytest.raises(ValueError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ValueError, match=r"add"):
        dc.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_forward_op_dispatch():
    a = Tensor(np.array([1.0, 2.0]))
    assert dc.forward_op("mul", a, a).data.tolist() == [1.0, 4.0]
    with pytest.raises(KeyError, match="unknown op"):
        dc.forward_op("conv3d", a)


def test_max_routes_gradient_to_first_maximum():
    x = Tensor(np.array([[1.0, 5.0, 5.0, 0.0]]), requires_grad=True)
    dc.backward(dc.sum(dc.max(x, axis=-1)))
    np.testing.assert_array_equal(x.grad, [[0, 1, 0, 0]])


def test_log_and_exp_saturate_outside_debug():
    assert np.isfinite(dc.exp(Tensor([1000.0])).data).all()
    assert np.isfinite(dc.log(Tensor([0.0])).data).all()


def test_logsumexp_stable_for_large_inputs():
    x = Tensor(np.array([1000.0, 1000.0]))
    assert dc.logsumexp(x).item() == pytest.approx(1000.0 + math.log(2.0))


def _adam_reference(grads, lr0, decay, b1=0.9, b2=0.999, eps=1e-8, x=0.0):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        lr = lr0 * decay ** (t - 1)
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


def test_adam_matches_scalar_reference():
    grads = [0.3, -1.2, 0.7, 2.0, -0.1]
    with dc.default_dtype(np.float64):
        p = Tensor(np.array([0.0]), requires_grad=True)
        decay = dc.exp_decay_factor(1e-2, 1e-3, 10)
        st_ = dc.init_adam([p], 1e-2, decay)
        for g in grads:
            dc.adam_step(st_, [p], [np.array([g])])
    assert p.data[0] == pytest.approx(_adam_reference(grads, 1e-2, decay), abs=1e-12)
    assert st_.step == len(grads)


def test_adam_first_step_has_learning_rate_magnitude():
    p = Tensor(np.zeros(3), requires_grad=True)
    st_ = dc.init_adam([p], 0.05)
    dc.adam_step(st_, [p], [np.array([2.0, -7.0, 0.1], dtype=np.float32)])
    np.testing.assert_allclose(p.data, [-0.05, 0.05, -0.05], rtol=1e-5)


def test_adam_skips_none_and_rejects_bad_shapes():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    st_ = dc.init_adam([a, b], 0.1)
    dc.adam_step(st_, [a, b], [np.ones(2, np.float32), None])
    assert np.all(b.data == 1.0) and np.all(st_.m[1] == 0)
    with pytest.raises(ValueError, match="shape mismatch"):
        dc.adam_step(st_, [a, b], [np.ones(3), None])


def test_decay_reaches_final_rate():
    f = dc.exp_decay_factor(5e-4, 5e-5, 5000)
    assert 5e-4 * f ** 5000 == pytest.approx(5e-5, rel=1e-9)
    assert dc.exp_decay_factor(1.0, 0.5, 0) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_softmax_rows_are_distributions(vals):
    s = dc.softmax(Tensor(np.array(vals, dtype=np.float64))).data
    assert np.all(s >= 0)
    assert s.sum() == pytest.approx(1.0, abs=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_unbroadcast_gradient_shapes(a, b, c):
    x = Tensor(np.ones((a, 1, c)), requires_grad=True)
    y = Tensor(np.ones((b, 1)), requires_grad=True)
    dc.backward(dc.sum(x * y))
    assert x.grad.shape == x.shape and y.grad.shape == y.shape
    np.testing.assert_allclose(x.grad, b)
    np.testing.assert_allclose(y.grad, a * c)


def test_cast_changes_dtype_and_casts_gradient_back():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    with dc.default_dtype(np.float64):
        y = dc.cast(x)
        assert y.data.dtype == np.float64
        loss = dc.sum(y * y)
    dc.backward(dc.cast(loss))
    assert x.grad.dtype == np.float32
    np.testing.assert_allclose(x.grad, [3.0, -4.0])
