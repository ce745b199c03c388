import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from confounded_pg.errors import InputError
from confounded_pg.policy import (LogLinearPolicy, PolicyParams, SignIndicatorFeatures,
                                  TabularIndicatorFeatures)

SIGN = LogLinearPolicy(SignIndicatorFeatures(horizon=2))
TAB = LogLinearPolicy(TabularIndicatorFeatures())

thetas8 = arrays(float, 8, elements=st.floats(-3, 3))
obs = st.floats(-2.5, 2.5)


def _hist(o_prev, a_prev):
    return np.concatenate([[o_prev], np.eye(2)[a_prev]])


def test_params_blocks():
    p = PolicyParams(np.arange(8.0), (4, 4))
    assert p.dim == 8 and p.horizon == 2 and p.offset(2) == 4
    np.testing.assert_array_equal(p.theta[p.block(2)], [4, 5, 6, 7])
    with pytest.raises(InputError):
        PolicyParams(np.zeros(3), (4,))
    with pytest.raises(InputError):
        PolicyParams([np.nan, 0, 0, 0], (4,))
    with pytest.raises(InputError):
        p.offset(3)


def test_uniform_at_zero():
    np.testing.assert_array_equal(SIGN.action_probs(SIGN.zero_params(), 1, [0.7]), [0.5, 0.5])


def test_two_action_softmax():
    c = 1.3
    # coordinate 0 is the indicator of (a=+1, o=+1)
    p = PolicyParams([c, 0, 0, 0], (4,))
    probs = TAB.action_probs(p, 1, [1.0])
    np.testing.assert_allclose(probs, [np.exp(c) / (np.exp(c) + 1), 1 / (np.exp(c) + 1)], atol=1e-15)


def test_uniform_score_centering():
    # at theta=0 the score of a=+1 is phi(+1) - 0.5 (phi(+1) + phi(-1))
    o = 0.8
    phi = SignIndicatorFeatures(horizon=1)(1, np.array([[o]]))[0]
    pol = LogLinearPolicy(SignIndicatorFeatures(horizon=1))
    score = pol.grad_log_prob(pol.zero_params(), 1, 0, [o])
    np.testing.assert_allclose(score, phi[0] - 0.5 * (phi[0] + phi[1]), atol=0)
    assert score[0] == pytest.approx(0.5 * 2 * o)


def test_antisymmetric_gradients_at_zero():
    p = TAB.zero_params()
    np.testing.assert_allclose(TAB.grad_prob(p, 1, 0, [1.0]), -TAB.grad_prob(p, 1, 1, [1.0]))


def test_extreme_logits_are_finite():
    p = PolicyParams([800.0, -800, 0, 0], (4,))
    probs = TAB.action_probs(p, 1, [1.0])
    assert np.all(np.isfinite(probs)) and probs[0] == 1.0


def test_batch_shapes():
    p = PolicyParams(np.linspace(-1, 1, 8), (4, 4))
    o = np.linspace(-1, 1, 5)[:, None]
    h = np.column_stack([o[:, 0], np.eye(2)[[0, 1, 0, 1, 0]]])
    assert SIGN.action_probs(p, 2, o, h).shape == (5, 2)
    assert SIGN.grad_log_prob(p, 2, np.zeros(5, int), o, h).shape == (5, 8)
    assert SIGN.grad_log_prob_all(p, 2, o, h).shape == (5, 2, 8)


def test_block_mismatch_rejected():
    with pytest.raises(InputError):
        TAB.action_probs(PolicyParams(np.zeros(8), (4, 4)), 1, [1.0])
    with pytest.raises(InputError):
        TAB.grad_log_prob(TAB.zero_params(), 1, 2, [1.0])
    with pytest.raises(InputError):
        TAB.action_probs(TAB.zero_params(), 1, [0.5])


@settings(max_examples=60)
@given(thetas8, obs, obs, st.integers(0, 1), st.integers(1, 2))
def test_probabilities_normalized(theta, o, o_prev, a_prev, t):
    p = PolicyParams(theta, (4, 4))
    probs = SIGN.action_probs(p, t, [o], _hist(o_prev, a_prev) if t == 2 else None)
    assert abs(probs.sum() - 1) <= 1e-12
    assert np.all(probs >= 0)


@settings(max_examples=60)
@given(thetas8, obs, obs, st.integers(0, 1), st.integers(1, 2))
def test_score_identity_and_block_sparsity(theta, o, o_prev, a_prev, t):
    p = PolicyParams(theta, (4, 4))
    h = _hist(o_prev, a_prev) if t == 2 else None
    probs = SIGN.action_probs(p, t, [o], h)
    scores = np.stack([SIGN.grad_log_prob(p, t, a, [o], h) for a in (0, 1)])
    assert np.abs(probs @ scores).max() <= 1e-12
    grads = np.stack([SIGN.grad_prob(p, t, a, [o], h) for a in (0, 1)])
    assert np.abs(grads.sum(axis=0)).max() <= 1e-12
    other = np.ones(8, bool)
    other[p.block(t)] = False
    assert np.all(scores[:, other] == 0.0)


@settings(max_examples=60)
@given(thetas8, obs, st.integers(1, 2))
def test_score_bounded_by_features(theta, o, t):
    p = PolicyParams(theta, (4, 4))
    hist = _hist(0.3, 0) if t == 2 else None
    phi_max = np.abs(SignIndicatorFeatures()(t, np.array([[o]]))).max()
    for a in (0, 1):
        assert np.abs(SIGN.grad_log_prob(p, t, a, [o], hist)).max() <= 2 * phi_max + 1e-12


def _fd_errors(rng, n_pairs=100, h=1e-5):
    worst_log = worst_prob = 0.0
    for _ in range(n_pairs):
        p = PolicyParams(rng.uniform(-2, 2, 8), (4, 4))
        t = int(rng.integers(1, 3))
        o = rng.uniform(-2, 2, 1)
        hist = _hist(rng.uniform(-2, 2), int(rng.integers(2))) if t == 2 else None
        a = int(rng.integers(2))
        fd_log, fd_prob = np.zeros(8), np.zeros(8)
        for j in range(8):
            e = np.zeros(8)
            e[j] = h
            up, dn = p.with_theta(p.theta + e), p.with_theta(p.theta - e)
            fd_log[j] = (SIGN.log_prob(up, t, a, o, hist) - SIGN.log_prob(dn, t, a, o, hist)) / (2 * h)
            fd_prob[j] = (SIGN.action_probs(up, t, o, hist)[a]
                          - SIGN.action_probs(dn, t, o, hist)[a]) / (2 * h)
        g_log = SIGN.grad_log_prob(p, t, a, o, hist)
        g_prob = SIGN.grad_prob(p, t, a, o, hist)
        worst_log = max(worst_log, np.linalg.norm(g_log - fd_log) / max(np.linalg.norm(fd_log), 1e-12))
        worst_prob = max(worst_prob, np.linalg.norm(g_prob - fd_prob) / max(np.linalg.norm(fd_prob), 1e-12))
    return worst_log, worst_prob


def test_finite_differences(rng):
    worst_log, worst_prob = _fd_errors(rng)
    assert worst_log <= 1e-5
    assert worst_prob <= 1e-5


def test_sampling_frequencies(rng):
    p = PolicyParams([0.4, 0, 0, 0], (4,))
    o = np.ones((100_000, 1))
    a = TAB.sample(p, 1, o, None, rng)
    assert abs(np.mean(a == 0) - TAB.action_probs(p, 1, [1.0])[0]) < 0.005
