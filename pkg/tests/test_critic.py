"""Decomposed critic: exact factorisation against brute-force enumeration."""

import itertools

import numpy as np
import pytest

from afstate import critic as cr
from afstate import nn
from afstate.discretiser import index_to_code


def _member(state_dim, bins, heads=None, seed=0):
    heads = heads or state_dim
    return nn.mlp_init([state_dim, 16, heads * bins],
                       np.random.default_rng(seed), dtype=np.float64)


def _all_codes(m, bins):
    return [index_to_code(i, m, bins) for i in range(bins ** m)]


@pytest.mark.parametrize("m", [1, 2, 3])
@pytest.mark.parametrize("bins", [2, 3])
def test_logsumexp_matches_full_enumeration(m, bins):
    member = _member(m, bins, seed=m * 10 + bins)
    s = np.random.default_rng(1).normal(size=(5, m))
    util = cr.utilities(member, s, m, bins)
    brute = np.log(sum(np.exp(cr.q_value(util, np.tile(c, (5, 1)), bins))
                       for c in _all_codes(m, bins)))
    np.testing.assert_allclose(cr.logsumexp_term(util), brute, atol=1e-10)


@pytest.mark.parametrize("m", [1, 2, 3])
@pytest.mark.parametrize("bins", [2, 3])
def test_greedy_code_matches_enumeration_argmax(m, bins):
    member = _member(m, bins, seed=m * 7 + bins)
    critic = cr.DecomposedCritic([member], [member.copy()], m, bins)
    s = np.random.default_rng(2).normal(size=(8, m))
    util = cr.mean_utilities(critic, s)
    greedy = cr.greedy_code(critic, s)
    for i in range(8):
        values = [cr.q_value(util[i], c, bins) for c in _all_codes(m, bins)]
        assert cr.q_value(util[i], greedy[i], bins) == pytest.approx(
            max(values), abs=1e-12)


def test_q_value_is_mean_of_selected_utilities():
    util = np.arange(24, dtype=np.float64).reshape(2, 4, 3)
    codes = np.array([[-1, 0, 1, 0], [1, 1, -1, -1]])
    expected = np.array([
        np.mean([util[0, 0, 0], util[0, 1, 1], util[0, 2, 2], util[0, 3, 1]]),
        np.mean([util[1, 0, 2], util[1, 1, 2], util[1, 2, 0], util[1, 3, 0]]),
    ])
    np.testing.assert_allclose(cr.q_value(util, codes, 3), expected)


@pytest.mark.parametrize("m,bins", [(1, 3), (2, 3), (3, 2), (3, 3)])
def test_sampler_matches_enumerated_distribution(m, bins):
    """Chi-squared test of the factorised sampler against brute-force probs."""
    member = _member(m, bins, seed=m + bins)
    s = np.random.default_rng(3).normal(size=(m,))
    util = cr.utilities(member, s, m, bins)
    codes = _all_codes(m, bins)
    logq = np.array([cr.q_value(util, c, bins) for c in codes])
    probs = np.exp(logq - logq.max())
    probs /= probs.sum()

    rng = np.random.default_rng(4)
    n_draws = 20000
    counts = np.zeros(len(codes))
    batch = cr.sample_code_softmax(member, np.tile(s, (n_draws, 1)), 1.0, rng, m, bins)
    for draw in batch:
        idx = 0
        for c, ref in enumerate(codes):
            if np.array_equal(draw, ref):
                idx = c
                break
        counts[idx] += 1
    expected = probs * n_draws
    chi2 = float(((counts - expected) ** 2 / np.maximum(expected, 1e-9)).sum())
    # dof = len(codes)-1 <= 26; the 99.9% quantile of chi2_26 is ~54.1
    assert chi2 < 60.0


def test_softmax_probs_temperature_limits():
    util = np.array([[[1.0, 3.0, 2.0]]])
    cold = cr.softmax_probs(util, 1e-3)
    assert cold[0, 0].argmax() == 1 and cold[0, 0, 1] > 0.999
    hot = cr.softmax_probs(util, 1e3)
    np.testing.assert_allclose(hot[0, 0], 1 / 3, atol=1e-3)
    with pytest.raises(ValueError):
        cr.softmax_probs(util, 0.0)


def test_regulariser_equals_negative_log_likelihood():
    """R = mean(logsumexp - Q(s, code)) is exactly the factorised-softmax NLL."""
    m, bins = 3, 3
    member = _member(m, bins, seed=5)
    rng = np.random.default_rng(6)
    s = rng.normal(size=(10, m))
    codes = rng.choice([-1, 0, 1], size=(10, m)).astype(np.int8)
    reg = cr.regulariser(member, s, codes, m, bins)
    util = cr.utilities(member, s, m, bins)
    probs = cr.softmax_probs(util, 1.0)
    sel = (codes + 1).astype(np.int64)
    picked = np.take_along_axis(probs, sel[..., None], axis=-1)[..., 0]
    nll = -np.mean(np.log(picked).sum(axis=-1))
    assert reg == pytest.approx(nll, abs=1e-12)


def test_td_target_terminal_masking_and_range():
    rng = np.random.default_rng(7)
    critic = cr.make_critic(2, 3, [16], 3, rng)
    s2 = rng.normal(size=(6, 2))
    r = rng.normal(size=6)
    term = np.array([1.0] * 6)
    y = cr.td_target(critic, s2, r, term, 0.99, np.random.default_rng(8))
    np.testing.assert_allclose(y, r, atol=1e-12)


def test_td_target_value_is_min_of_two_targets():
    rng = np.random.default_rng(9)
    critic = cr.make_critic(2, 3, [8], 2, rng)
    # make the two targets visibly different
    for wb in critic.targets[1].weights:
        wb *= -1.0
    s2 = rng.normal(size=(4, 2))
    r = np.zeros(4)
    y = cr.td_target(critic, s2, r, np.zeros(4), 1.0, np.random.default_rng(10))
    u1 = cr.utilities(critic.targets[0], s2, 2, 3)
    u2 = cr.utilities(critic.targets[1], s2, 2, 3)
    # whatever code was sampled, y must not exceed the max over codes of
    # both targets' minimum
    best = np.full(4, -np.inf)
    for c in _all_codes(2, 3):
        cand = np.minimum(cr.q_value(u1, np.tile(c, (4, 1)), 3),
                          cr.q_value(u2, np.tile(c, (4, 1)), 3))
        best = np.maximum(best, cand)
    assert np.all(y <= best + 1e-12)


def test_soft_update_moves_targets_toward_online():
    rng = np.random.default_rng(11)
    critic = cr.make_critic(2, 3, [8], 1, rng)
    before = critic.targets[0].weights[0].copy().astype(np.float64)
    online = critic.members[0].weights[0].astype(np.float64)
    for w in critic.members[0].weights:
        w += 1.0
    cr.soft_update(critic, tau=0.25)
    after = critic.targets[0].weights[0].astype(np.float64)
    np.testing.assert_allclose(after, before + 0.25 * ((online + 1.0) - before),
                               atol=1e-6)


def test_greedy_ties_prefer_the_no_change_bin():
    util = np.zeros((1, 2, 3))  # all-equal utilities
    code = cr.greedy_code_from_utilities(util, 3)
    np.testing.assert_array_equal(code[0], [0, 0])
    util2 = np.zeros((1, 2, 2))
    np.testing.assert_array_equal(cr.greedy_code_from_utilities(util2, 2)[0], [-1, -1])
