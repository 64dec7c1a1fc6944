import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mkgc import autograd as ag
from mkgc import numerics
from mkgc.autograd import Parameter
from mkgc.errors import ShapeError, StateError


def fd_check(loss, params, tol=1e-6):
    for p in params:
        p.zero_grad()
    loss().backward()

    def f():
        with ag.no_grad():
            return float(loss())

    numeric = numerics.finite_difference_gradient(f, params, h=1e-6)
    for p, n in zip(params, numeric):
        assert numerics.relative_error(p.grad, n) < tol, p.name


def test_quadratic_probe_matches_closed_form(rng):
    w = Parameter(rng.normal(size=(3, 4)), "w")
    x = rng.normal(size=(4, 1))
    y = w @ x
    (0.5 * ag.sum(y * y)).backward()
    np.testing.assert_allclose(w.grad, (w.data @ x) @ x.T, atol=1e-12)


def test_frozen_parameters_get_zero_grad(rng):
    w = Parameter(rng.normal(size=(2, 2)), "w", frozen=True)
    b = Parameter(rng.normal(size=(2, 2)), "b")
    ag.sum(w * b).backward()
    assert np.all(w.grad == 0)
    np.testing.assert_allclose(b.grad, w.data)


def test_backward_without_recording_is_a_state_error():
    with pytest.raises(StateError):
        ag.Tensor(np.array(1.0)).backward()
    with pytest.raises(ShapeError):
        ag.sum(Parameter(np.ones((2, 2)), "a"), axis=0).backward()


def test_no_grad_records_nothing():
    a = Parameter(np.ones((2, 2)), "a")
    with ag.no_grad():
        out = ag.sum(a * a)
    with pytest.raises(StateError):
        out.backward()


def test_parameters_must_be_matrices():
    with pytest.raises(ShapeError):
        Parameter(np.ones(3), "v")


@pytest.mark.parametrize("op", ["softmax", "log_softmax", "logsumexp", "relu_exp_log", "where_concat", "index"])
def test_op_gradients(op, rng):
    a = Parameter(rng.normal(size=(3, 4)), "a")
    b = Parameter(rng.normal(size=(3, 4)), "b")
    probe = rng.normal(size=(3, 4))
    cond = rng.random((3, 4)) < 0.5

    losses = {
        "softmax": lambda: ag.sum(ag.softmax(a * b) * probe),
        "log_softmax": lambda: ag.sum(ag.log_softmax(a) * probe),
        "logsumexp": lambda: ag.sum(ag.logsumexp(a + b, axis=0)),
        "relu_exp_log": lambda: ag.sum(ag.log(ag.exp(a) + 1.0) * ag.relu(b + 0.05) * probe),
        "where_concat": lambda: ag.sum(ag.concat([ag.where(cond, a, b), a], axis=0) * np.vstack([probe, probe])),
        "index": lambda: ag.sum(a[np.array([0, 0, 2]), 1:] * b[:3, :3]),
    }
    fd_check(losses[op], [a, b])


def test_layer_norm_and_losses_gradients(rng):
    x = Parameter(rng.normal(size=(3, 5)), "x")
    g = Parameter(rng.normal(size=(1, 5)), "g")
    b = Parameter(rng.normal(size=(1, 5)), "b")
    probe = rng.normal(size=(3, 5))
    fd_check(lambda: ag.sum(ag.layer_norm(x, g, b) * probe), [x, g, b])
    fd_check(lambda: ag.cross_entropy(x @ ag.swap_last(g * b), np.zeros(3, int)) + ag.cross_entropy(x, np.array([0, 4, 2])), [x, g])
    fd_check(lambda: ag.binary_cross_entropy(x * 3.0, (probe > 0).astype(float)), [x])


def test_batched_matmul_and_reshape_gradients(rng):
    a = Parameter(rng.normal(size=(4, 6)), "a")
    w = Parameter(rng.normal(size=(2, 3)), "w")
    probe = rng.normal(size=(2, 2, 2, 3))

    def loss():
        x = ag.reshape(a, (2, 2, 3, 2))
        y = ag.transpose(x, (0, 1, 3, 2)) @ x
        return ag.mean(y @ w * probe)

    fd_check(loss, [a, w])


@given(st.floats(0.1, 3.0))
def test_scale_grad_scales_only_backward(factor):
    a = Parameter(np.array([[2.0]]), "a")
    out = ag.sum(ag.scale_grad(a * a, factor))
    assert float(out) == 4.0
    out.backward()
    assert a.grad[0, 0] == pytest.approx(4.0 * factor)


def test_gradients_accumulate_across_uses(rng):
    a = Parameter(rng.normal(size=(2, 2)), "a")
    (ag.sum(a) + ag.sum(a)).backward()
    np.testing.assert_allclose(a.grad, 2.0)
