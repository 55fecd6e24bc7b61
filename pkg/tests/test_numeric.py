import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from numeric import Adam, InvalidArgumentError, Tape, Tensor, backward, grad_check
from numeric import tensor as nt

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)


def test_ops_outside_tape_do_not_record():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = nt.exp(x)
    assert not y.requires_grad
    with Tape() as tape:
        z = nt.sum(x * x)
    assert len(tape) == 2
    assert z.requires_grad


def test_constants_are_not_recorded():
    with Tape() as tape:
        nt.add(Tensor([1.0]), Tensor([2.0]))
    assert len(tape) == 0


def test_backward_of_sum_of_squares():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = nt.sum(x * x)
    grads = backward(tape, loss)
    np.testing.assert_allclose(grads[x], [2.0, -4.0, 6.0])
    np.testing.assert_allclose(x.grad, grads[x])


def test_tape_supports_one_backward_pass():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        loss = x * x
    backward(tape, loss)
    with pytest.raises(InvalidArgumentError):
        backward(tape, loss)
    tape.reset()
    assert len(tape) == 0


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(InvalidArgumentError):
        backward(tape, y)


def test_shared_input_accumulates():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        loss = x * x + x
    assert backward(tape, loss)[x] == pytest.approx(7.0)


def test_broadcast_rules():
    a = Tensor(np.ones((3, 2)))
    nt.add(a, Tensor([1.0, 2.0]))
    nt.mul(a, Tensor(2.0))
    with pytest.raises(InvalidArgumentError):
        nt.add(a, Tensor([1.0, 2.0, 3.0]))


def test_matmul_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        nt.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_cross_entropy_range_checks():
    logits = Tensor(np.zeros((2, 3)))
    assert nt.cross_entropy(logits, [0, 2]).item() == pytest.approx(np.log(3))
    with pytest.raises(InvalidArgumentError):
        nt.cross_entropy(logits, [0, 3])


def test_segment_mean_handles_empty_segments():
    x = Tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    out = nt.segment_mean(x, [0, 0, 2], 3).numpy()
    np.testing.assert_allclose(out, [[2.0, 3.0], [0.0, 0.0], [5.0, 6.0]])


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (4,), elements=finite))
def test_softmax_is_a_distribution(values):
    s = nt.softmax(Tensor(values)).numpy()
    assert s.sum() == pytest.approx(1.0)
    assert (s >= 0).all()


@settings(max_examples=20, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite))
def test_grad_check_composite(values):
    w = Tensor(np.array([[0.5, -1.0, 0.25], [1.5, 0.3, -0.7]]))

    def fn(x):
        return nt.sum(nt.log_softmax(nt.tanh(x) @ w, axis=1) * Tensor(np.full((3, 3), -1.0)))

    assert grad_check(fn, Tensor(values), eps=1e-5, floor=1e-3) < 1e-4


@pytest.mark.parametrize("op", [nt.sigmoid, nt.relu, nt.exp, nt.row_norm, nt.amax])
def test_grad_check_unary(op):
    point = Tensor([[0.3, -0.8, 1.2], [0.9, 0.4, -1.5]])
    assert grad_check(lambda x: nt.sum(op(x) * op(x)), point, eps=1e-6, floor=1e-3) < 1e-4


def test_grad_check_gather_and_scale():
    point = Tensor([[0.3, -0.8], [1.2, 0.9], [0.4, -1.5]])
    rows = Tensor([1.0, 2.0, -0.5])

    def fn(x):
        picked = nt.take(nt.scale_rows(x, rows), [2, 0, 2])
        return nt.sum(nt.sum(picked * picked, axis=1))

    assert grad_check(fn, point, floor=1e-3) < 1e-4


def test_grad_check_rejects_bad_eps():
    with pytest.raises(InvalidArgumentError):
        grad_check(lambda x: nt.sum(x), Tensor([1.0]), eps=0.0)


def test_adam_replaces_params_and_descends():
    params = {"w": Tensor([4.0, -3.0], requires_grad=True)}
    opt = Adam(params, lr=0.1)
    original = params["w"]
    for _ in range(100):
        with Tape() as tape:
            loss = nt.sum(params["w"] * params["w"])
        opt.step(backward(tape, loss))
    assert params["w"] is not original
    np.testing.assert_allclose(original.numpy(), [4.0, -3.0])
    assert np.abs(params["w"].numpy()).max() < 0.5


def test_adam_clips_gradient_norm():
    params = {"w": Tensor([0.0], requires_grad=True)}
    opt = Adam(params, lr=1.0, clip_norm=1.0)
    w = params["w"]
    opt.step({w: np.array([1e6])})
    # first moment sees the clipped gradient
    assert opt.m["w"][0] == pytest.approx(0.1)


def test_adam_rejects_nonpositive_lr():
    with pytest.raises(InvalidArgumentError):
        Adam({}, lr=0.0)
