import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gtrans import autograd as ag
from gtrans.autograd import (
    NonFiniteError,
    ParameterError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    default_dtype,
    finite_diff_grad,
    no_grad,
)

RNG = np.random.default_rng(0)


def check_grad(fn, *shapes, positive=False, tol=1e-6):
    """Compare tape gradients of ``sum(fn(*xs) * probe)`` against central differences."""
    with default_dtype(np.float64):
        xs = []
        for s in shapes:
            data = RNG.normal(size=s)
            if positive:
                data = np.abs(data) + 0.5
            xs.append(Tensor(data, requires_grad=True))
        probe = RNG.normal(size=fn(*xs).shape)

        def scalar(*args):
            return (fn(*args) * Tensor(probe)).sum()

        with Tape():
            loss = scalar(*xs)
        backward(loss)
        for i, x in enumerate(xs):
            numeric = finite_diff_grad(lambda t: scalar(*xs[:i], t, *xs[i + 1:]), x, h=1e-5)
            np.testing.assert_allclose(x.grad, numeric, rtol=tol, atol=tol)


@pytest.mark.parametrize("fn,shapes", [
    (lambda a, b: a + b, [(3, 4), (4,)]),
    (lambda a, b: a - b, [(2, 3), (2, 1)]),
    (lambda a, b: a * b, [(3, 4), (3, 4)]),
    (lambda a: -a, [(5,)]),
    (lambda a: ag.sigmoid(a), [(4, 3)]),
    (lambda a: ag.exp(a), [(3,)]),
    (lambda a: a.sum(axis=1, keepdims=True), [(3, 4)]),
    (lambda a: a.mean(axis=0), [(3, 4)]),
    (lambda a: a.mean(), [(2, 3, 4)]),
    (lambda a: a.reshape(6, 2), [(3, 4)]),
    (lambda a: a.swapaxes(0, 2), [(2, 3, 4)]),
    (lambda a: a[1:, ::2], [(3, 4)]),
    (lambda a, b: ag.stack([a, b], axis=1), [(2, 3), (2, 3)]),
    (lambda a, b: a @ b, [(3, 4), (4, 5)]),
    (lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    (lambda a, b: a @ b, [(2, 2, 3, 4), (2, 2, 4, 3)]),
    (lambda a, b: a @ b, [(2, 3, 4), (1, 4, 2)]),
    (lambda a, b, c: ag.linear(a, b, c), [(2, 3, 4), (4, 5), (5,)]),
    (lambda a, g, b: ag.layer_norm(a, g, b), [(3, 6), (6,), (6,)]),
    (lambda a: ag.softmax(a), [(3, 5)]),
    (lambda a: ag.softmax(a, tau=2.5), [(4,)]),
    (lambda a: ag.log_softmax(a), [(2, 3, 5)]),
    (lambda a: ag.relu(a), [(4, 4)]),
])
def test_op_gradients_match_finite_differences(fn, shapes):
    check_grad(fn, *shapes)


@pytest.mark.parametrize("fn,shapes", [
    (lambda a, b: a / b, [(3, 2), (3, 2)]),
    (lambda a: ag.log(a), [(4,)]),
    (lambda a: a ** 1.5, [(3,)]),
])
def test_gradients_of_ops_with_positive_domain(fn, shapes):
    check_grad(fn, *shapes, positive=True)


def test_masked_softmax_gradient_and_zeros():
    mask = np.array([[True, False, True], [True, True, False]])
    check_grad(lambda a: ag.softmax(a, mask=mask), (2, 3))
    out = ag.softmax(Tensor(RNG.normal(size=(2, 3))), mask=mask)
    assert np.all(out.data[~mask] == 0)
    np.testing.assert_allclose(out.data.sum(-1), 1.0, rtol=1e-6)


def test_softmax_fully_masked_row_is_an_error():
    with pytest.raises(ValueError):
        ag.softmax(Tensor(np.zeros((1, 3))), mask=np.zeros((1, 3), dtype=bool))


def test_softmax_rejects_non_positive_temperature():
    with pytest.raises(ParameterError):
        ag.softmax(Tensor(np.zeros(3)), tau=0.0)


def test_embedding_and_gather_gradients():
    ids = np.array([[1, 3, 3], [0, 2, 1]])
    check_grad(lambda w: ag.embedding(w, ids), (5, 4))
    idx = np.array([[0, 2], [1, 1]])
    check_grad(lambda x: ag.gather_last(x, idx), (2, 2, 3))


def test_embedding_rejects_out_of_range_id():
    with pytest.raises(IndexError):
        ag.embedding(Tensor(np.zeros((4, 2))), np.array([4]))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        ag.log(Tensor(np.array([0.0, 1.0])))


def test_gradient_accumulates_across_backward_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with Tape():
            loss = (x * x).sum()
        backward(loss)
    np.testing.assert_allclose(x.grad, 2 * 2 * x.data)
    x.zero_grad()
    assert np.all(x.grad == 0)


def test_reused_tensor_sums_gradients():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with Tape():
        loss = (x * x + x * 2.0).sum()
    backward(loss)
    np.testing.assert_allclose(x.grad, [2 * 3.0 + 2.0])


def test_no_recording_outside_tape_and_under_no_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    y = (x * 2.0).sum()
    assert y.node_id is None
    with Tape() as tape:
        with no_grad():
            z = (x * 2.0).sum()
    assert len(tape) == 0 and z.node_id is None


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape():
        y = x * 2.0
    with pytest.raises(ValueError):
        backward(y)


def test_integer_data_rejected_and_dtype_context():
    with pytest.raises(TypeError):
        Tensor(np.array([1, 2], dtype=np.int64), dtype=np.int64)
    with default_dtype(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_dropout_statistics_and_determinism():
    x = Tensor(np.ones((200, 200)))
    a = ag.dropout(x, 0.3, np.random.default_rng(5)).data
    b = ag.dropout(x, 0.3, np.random.default_rng(5)).data
    assert np.array_equal(a, b)
    assert abs((a == 0).mean() - 0.3) < 0.01
    assert abs(a.mean() - 1.0) < 0.02
    assert ag.dropout(x, 0.0, np.random.default_rng(5)) is x
    with pytest.raises(ParameterError):
        ag.dropout(x, 1.0, np.random.default_rng(5))


def test_nll_loss_matches_direct_formula():
    logits = RNG.normal(size=(2, 4, 6))
    targets = np.array([[1, 2, 0, 0], [3, 5, 4, 0]])
    lp = ag.log_softmax(Tensor(logits, dtype=np.float64))
    got = ag.nll_loss(lp, targets, pad_id=0).item()
    ref_lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    keep = targets != 0
    want = -np.take_along_axis(ref_lp, targets[..., None], -1)[..., 0][keep].mean()
    assert abs(got - want) < 1e-12
    with pytest.raises(ValueError):
        ag.nll_loss(lp, np.zeros((2, 4), dtype=int), pad_id=0)


def test_finite_diff_restores_input():
    x = Tensor(np.array([0.5, -1.0]), dtype=np.float64)
    before = x.data.copy()
    g = finite_diff_grad(lambda t: (t * t).sum(), x)
    assert np.array_equal(x.data, before)
    np.testing.assert_allclose(g, 2 * before, rtol=1e-8)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                  elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(arr):
    out = ag.softmax(Tensor(arr, dtype=np.float64)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(-1), 1.0, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=2, max_side=6),
                  elements=st.floats(-700, 700)))
def test_sigmoid_is_stable_and_bounded(arr):
    out = ag.sigmoid(Tensor(arr, dtype=np.float64)).data
    assert np.all((out >= 0) & (out <= 1))
    np.testing.assert_allclose(out, 0.5 * (1 + np.tanh(arr / 2)), atol=1e-12)
