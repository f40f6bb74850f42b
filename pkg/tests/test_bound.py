"""Finite-MDP bound harness: kernel oracles, KL identities, value iteration."""

import math

import numpy as np
import pytest

from afstate import bound as bd


def _mdp(m=1, grid=15, actions=5, gamma=0.9, sigma=0.1, seed=0):
    return bd.build_increment_mdp(m, grid, actions, gamma, sigma,
                                  np.random.default_rng(seed))


def test_kernel_matches_gaussian_cdf_oracle():
    """Independent re-derivation of one kernel row via math.erf folding."""
    mdp = _mdp(grid=10, sigma=0.12)
    mean = 0.07
    k = mdp.kernel_1d(mean)
    g = 10

    def cdf(x, mu):
        return 0.5 * (1 + math.erf((x - mu) / (0.12 * math.sqrt(2))))

    for j in (0, 4, 9):
        start = (j + 0.5) / g
        mu = start + mean
        probs = np.zeros(g)
        for cell in range(-g, 2 * g):
            lo, hi = cell / g, (cell + 1) / g
            mass = cdf(hi, mu) - cdf(lo, mu)
            tgt = -1 - cell if cell < 0 else (2 * g - 1 - cell if cell >= g else cell)
            probs[tgt] += mass
        probs /= probs.sum()
        np.testing.assert_allclose(k[j], probs, atol=1e-8)


def test_kernel_rows_are_stochastic_and_cached():
    mdp = _mdp(grid=12)
    k = mdp.kernel_1d(0.1)
    assert np.all(k >= 0)
    np.testing.assert_allclose(k.sum(axis=1), 1.0, atol=1e-12)
    assert mdp.kernel_1d(0.1) is k  # cache hit


def test_kernel_truncation_budget_enforced():
    mdp = _mdp(grid=10, sigma=0.1)
    with pytest.raises(ValueError):
        mdp.kernel_1d(5.0)  # mean far outside one reflection


def test_closed_form_kl_plugin():
    """Equal-covariance Gaussian KL: offset sigma/4 gives exactly 1/32."""
    mdp = _mdp(sigma=0.15, actions=5)
    # force a single action at a known offset from its bin representative
    mdp.action_means = np.array([[0.0]])
    binned = bd.bin_actions(mdp, 2)
    # representative of the bin containing 0.0: bins over [-0.15, 0.15],
    # k=2 -> centres at -0.075 and +0.075; offset 0.075
    _, closed = bd.kl_mismatch(mdp, binned)
    assert closed == pytest.approx(0.5 * 0.075 ** 2 / 0.15 ** 2, abs=1e-15)
    # and a hand-chosen sigma/4 offset: 0.5 * (1/16) = 0.03125
    mdp2 = _mdp(sigma=0.12)
    mdp2.action_means = np.array([[0.03]])  # sigma/4 = 0.03
    binned2 = bd.bin_actions(mdp2, 1)       # representative at box centre 0.0
    _, closed2 = bd.kl_mismatch(mdp2, binned2)
    assert closed2 == pytest.approx(0.03125, abs=1e-15)


def test_grid_kl_never_exceeds_closed_form():
    """Cell projection is a deterministic map, so KL can only shrink."""
    for seed in range(5):
        mdp = _mdp(m=1, grid=15, actions=7, sigma=0.12, seed=seed)
        for k in (2, 4, 8):
            binned = bd.bin_actions(mdp, k)
            grid_eps, closed = bd.kl_mismatch(mdp, binned)
            assert grid_eps <= closed + 1e-12


def test_lemma_bound_arithmetic_oracle():
    # Dr=0.5, gamma=0.8, eps=0.125: 0.5/0.2 + (0.8/0.04)*0.5*sqrt(0.0625)
    #                              = 2.5 + 20*0.5*0.25 = 5.0
    assert bd.lemma_bound(0.5, 0.8, 0.125) == pytest.approx(5.0)
    assert bd.lemma_bound(1.0, 0.9, 0.0) == pytest.approx(10.0)


def test_theorem_envelope_arithmetic_oracle():
    mdp = _mdp(m=2, sigma=0.5)
    # Lambda = 1/0.25 = 4, M = 2, H = 0.3 -> 4*2*0.09/(8*k^2) = 0.09/k^2
    assert bd.theorem_eps_bound(mdp, 3) == pytest.approx(0.09 / 9)


def test_value_iteration_constant_reward_fixed_point():
    mdp = _mdp(grid=8, actions=3, gamma=0.9)
    mdp.reward_w_state = np.zeros(1)  # reward 0.5*(1+sin(phase)), constant in s
    phase = float(mdp.reward_w_mean @ mdp.action_means[-1])
    # make all actions share one mean so the constant is unambiguous
    mdp.action_means = np.tile(mdp.action_means[-1], (1, 1))
    v, iters = bd.value_iteration(mdp, tol=1e-10)
    c = 0.5 * (1 + math.sin(phase))
    np.testing.assert_allclose(v, c / (1 - 0.9), atol=1e-8)
    assert iters > 1


def test_value_iteration_monotone_in_binning():
    """Coarser bins cannot beat the original action set by more than the gap."""
    mdp = _mdp(m=1, grid=12, actions=9)
    v_star, _ = bd.value_iteration(mdp)
    binned = bd.bin_actions(mdp, 2)
    v_d, _ = bd.value_iteration(mdp, binned.unique_reps)
    assert np.max(np.abs(v_star - v_d)) < bd.lemma_bound(1.0, 0.9, 1.0)


def test_bin_actions_assigns_centres():
    mdp = _mdp(m=1, actions=5)  # means at -0.15, -0.075, 0, 0.075, 0.15
    binned = bd.bin_actions(mdp, 2)  # bin centres at -0.075, +0.075
    reps = sorted(set(binned.rep_means[:, 0]))
    assert reps == pytest.approx([-0.075, 0.075])
    # every original mean maps to the centre of its containing bin
    for mu, rep in zip(mdp.action_means[:, 0], binned.rep_means[:, 0]):
        assert abs(mu - rep) <= 0.075 + 1e-12


def test_check_bound_report_structure_and_slope():
    mdp = _mdp(m=1, grid=15, actions=9)
    report = bd.check_bound(mdp, [2, 4, 8])
    assert [r["k"] for r in report.rows] == [2, 4, 8]
    assert report.all_gaps_bounded and report.all_eps_bounded
    assert report.slope == pytest.approx(-1.0, abs=0.05)
    with pytest.raises(ValueError):
        bd.check_bound(mdp, [4, 2])


def test_write_bound_csv_header(tmp_path):
    mdp = _mdp(m=1, grid=10, actions=5)
    report = bd.check_bound(mdp, [2, 4])
    p = tmp_path / "bound.csv"
    bd.write_bound_csv(report, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "k,gap,lemma2_bound,eps_kl,eps_kl_theorem_bound,slope_estimate"
    assert len(lines) == 3


def test_build_increment_mdp_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        bd.build_increment_mdp(1, 10, 4, 0.9, 0.1, rng)  # even actions_per_dim
    with pytest.raises(ValueError):
        bd.build_increment_mdp(5, 10, 5, 0.9, 0.1, rng)  # m too large
