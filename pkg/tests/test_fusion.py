import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from gtrans.autograd import (
    ParameterError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    default_dtype,
    finite_diff_grad,
)
from gtrans.fusion import (
    decoder_group_fuse,
    encoder_group_fuse,
    fusion_prob_weights,
    group_boundaries,
    probability_fuse,
)
from gtrans.layers import init_ln

RNG = np.random.default_rng(1)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 200), st.integers(1, 200))
def test_boundaries_invariants(L, T):
    s = group_boundaries(L, T)
    b = s.boundaries
    assert b[-1] == L
    assert all(x < y for x, y in zip(b, b[1:]))
    assert s.num_groups == -(-L // T)
    assert b == tuple(oracles.boundaries(L, T))
    covered = [i for k in range(1, s.num_groups + 1) for i in s.members(k)]
    assert covered == list(range(L))


def test_known_partitions():
    assert group_boundaries(6, 3).boundaries == (3, 6)
    assert group_boundaries(6, 2).boundaries == (2, 4, 6)
    assert group_boundaries(7, 3).boundaries == (3, 6, 7)
    assert group_boundaries(4, 9).boundaries == (4,)
    assert list(group_boundaries(7, 3).members(3)) == [6]


@pytest.mark.parametrize("L,T", [(0, 1), (3, 0), (-1, 2)])
def test_invalid_partition(L, T):
    with pytest.raises(ParameterError):
        group_boundaries(L, T)


def _states(L, shape=(2, 3, 4)):
    return [Tensor(RNG.normal(size=shape), dtype=np.float64) for _ in range(L)]


@pytest.mark.parametrize("L,T", [(6, 3), (7, 3), (4, 1), (5, 5), (2, 4)])
def test_encoder_fuse_matches_oracle(L, T):
    with default_dtype(np.float64):
        states = _states(L)
        m = group_boundaries(L, T).num_groups
        w = RNG.normal(size=m)
        ln = init_ln(4)
        ln.gamma.data[:] = RNG.normal(size=4)
        ln.beta.data[:] = RNG.normal(size=4)
        got = encoder_group_fuse(states, Tensor(w), ln, group_boundaries(L, T)).data
    want = oracles.encoder_fuse([s.data for s in states], w, T, ln.gamma.data, ln.beta.data)
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_encoder_fuse_ignores_non_boundary_layers():
    with default_dtype(np.float64):
        states = _states(6)
        scheme = group_boundaries(6, 3)
        w, ln = Tensor(np.zeros(2)), init_ln(4)
        base = encoder_group_fuse(states, w, ln, scheme).data
        for i in (0, 1, 3, 4):
            states[i] = Tensor(RNG.normal(size=(2, 3, 4)) * 100)
        assert np.array_equal(encoder_group_fuse(states, w, ln, scheme).data, base)


def test_encoder_fuse_count_mismatch():
    with pytest.raises(ShapeError):
        encoder_group_fuse(_states(5), Tensor(np.zeros(2)), init_ln(4), group_boundaries(6, 3))
    with pytest.raises(ShapeError):
        encoder_group_fuse(_states(6), Tensor(np.zeros(3)), init_ln(4), group_boundaries(6, 3))


@pytest.mark.parametrize("L,T", [(6, 2), (5, 2), (3, 3), (4, 1)])
def test_decoder_fuse_matches_oracle(L, T):
    with default_dtype(np.float64):
        states = _states(L)
        w = RNG.normal(size=L)
        got = decoder_group_fuse(states, Tensor(w), group_boundaries(L, T))
    want = oracles.decoder_fuse([s.data for s in states], w, T)
    assert len(got) == len(want)
    for g, o in zip(got, want):
        np.testing.assert_allclose(g.data, o, atol=1e-12)


def test_decoder_fuse_is_not_normalized():
    # with gate 0.5 and T identical states the fused state is T/2 times the input
    s = Tensor(np.ones((1, 2, 4)), dtype=np.float64)
    out = decoder_group_fuse([s] * 4, Tensor(np.zeros(4), dtype=np.float64), group_boundaries(4, 4))
    np.testing.assert_allclose(out[0].data, 2.0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8), st.floats(0.05, 50))
def test_prob_weights_form_a_distribution(w, tau):
    with default_dtype(np.float64):
        p = fusion_prob_weights(Tensor(np.array(w)), tau).data
    assert abs(p.sum() - 1.0) < 1e-12 and np.all(p >= 0)
    np.testing.assert_allclose(p, oracles.psi(w, tau), atol=1e-12)


def test_prob_weights_reject_bad_temperature():
    with pytest.raises(ParameterError):
        fusion_prob_weights(Tensor(np.zeros(2)), 0.0)


def test_probability_fuse_convex_and_normalized():
    with default_dtype(np.float64):
        probs = [Tensor(RNG.dirichlet(np.ones(7), size=(2, 3))) for _ in range(3)]
        psi = fusion_prob_weights(Tensor(RNG.normal(size=3)), 1.0)
        out = probability_fuse(probs, psi).data
    stack = np.stack([p.data for p in probs])
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-12)
    assert np.all(out >= stack.min(0) - 1e-15) and np.all(out <= stack.max(0) + 1e-15)
    np.testing.assert_allclose(out, oracles.mix([p.data for p in probs], psi.data), atol=1e-14)


def test_probability_fuse_rejects_bad_inputs():
    p = Tensor(np.full((2, 4), 0.25))
    with pytest.raises(ValueError):
        probability_fuse([p, p], Tensor(np.array([0.7, 0.7])))
    with pytest.raises(ValueError):
        probability_fuse([p, Tensor(np.full((2, 4), 0.3))], Tensor(np.array([0.5, 0.5])))
    with pytest.raises(ShapeError):
        probability_fuse([p], Tensor(np.array([0.5, 0.5])))


def test_fusion_weight_gradients():
    with default_dtype(np.float64):
        states = _states(4, (1, 2, 3))
        w = Tensor(RNG.normal(size=4), requires_grad=True)
        probe = RNG.normal(size=(1, 2, 3))
        scheme = group_boundaries(4, 2)

        def f(t):
            return sum(((h * Tensor(probe)).sum() for h in decoder_group_fuse(states, t, scheme)),
                       Tensor(0.0))
        with Tape():
            loss = f(w)
        backward(loss)
        np.testing.assert_allclose(w.grad, finite_diff_grad(f, w, 1e-6), rtol=1e-6)
