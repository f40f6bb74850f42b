"""Online learning: beta schedule, policy switching, replay, IDM, TD3."""

import numpy as np
import pytest

from afstate import data as dt
from afstate import nn
from afstate import online as on
from afstate import pretrain as pt
from afstate.envs import make_env
from afstate.rng import substream


# --- beta schedule -----------------------------------------------------------

def test_beta_schedule_reference_values():
    sched = on.GuidanceSchedule()  # 0.5, -0.1 every 100k, floor 0
    assert sched.beta(0) == pytest.approx(0.5)
    assert sched.beta(99_999) == pytest.approx(0.5)
    assert sched.beta(150_000) == pytest.approx(0.4)
    assert sched.beta(450_000) == pytest.approx(0.1)
    assert sched.beta(500_000) == pytest.approx(0.0)
    assert sched.beta(600_000) == pytest.approx(0.0)
    assert sched.beta(10 ** 9) == pytest.approx(0.0)


def test_beta_schedule_is_piecewise_constant_and_monotone():
    sched = on.GuidanceSchedule(beta_max=0.5, beta_decrement=0.1, interval=10)
    vals = [sched.beta(t) for t in range(80)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert vals[:10] == [pytest.approx(0.5)] * 10
    assert vals[10:20] == [pytest.approx(0.4)] * 10
    with pytest.raises(ValueError):
        sched.beta(-1)


def test_fixed_beta_override():
    cfg = on.GuidedConfig(total_steps=1000, beta_fixed=0.8)
    sched = cfg.schedule()
    assert sched.beta(0) == sched.beta(999) == pytest.approx(0.8)


# --- replay buffer -----------------------------------------------------------

def test_replay_buffer_ring_overwrite():
    buf = on.ReplayBuffer(5, 2, 1)
    for i in range(8):
        buf.add(np.full(2, i), np.full(1, i), float(i), np.full(2, i + 1),
                False, np.zeros(2, np.int8), episode=0)
    assert buf.size == 5
    assert buf.cursor == 3
    # entries 3..7 survive; slot 0 holds the 6th insert (i=5)
    assert buf.r[0] == 5.0 and buf.r[2] == 7.0 and buf.r[3] == 3.0


def test_replay_buffer_sample_in_range():
    buf = on.ReplayBuffer(10, 2, 1)
    for i in range(4):
        buf.add(np.zeros(2), np.zeros(1), 0.0, np.zeros(2), False,
                np.zeros(2, np.int8), 0)
    idx = buf.sample_indices(100, np.random.default_rng(0))
    assert idx.min() >= 0 and idx.max() < 4


# --- policy switching --------------------------------------------------------

class _StubModel:
    def predict_code(self, s):
        return np.ones(s.shape[-1], dtype=np.int8)


class _StubIdm:
    def __init__(self):
        self.calls = 0

    def predict(self, s, code):
        self.calls += 1
        return np.array([0.7, 0.7])


class _StubAgent:
    def __init__(self):
        self.spec = make_env("pointmass")
        self.calls = 0

    def act(self, s, rng=None, explore=False):
        self.calls += 1
        return np.array([-0.7, -0.7])


def test_select_action_switching_rate_is_binomial():
    rng_switch = np.random.default_rng(1)
    rng_agent = np.random.default_rng(2)
    agent, idm = _StubAgent(), _StubIdm()
    beta = 0.3
    n = 4000
    for _ in range(n):
        on.select_action(agent, _StubModel(), idm, np.zeros(4), beta,
                         rng_switch, rng_agent)
    # 4-sigma band around 0.3
    p_hat = idm.calls / n
    assert abs(p_hat - beta) < 4 * np.sqrt(beta * (1 - beta) / n)
    assert agent.calls + idm.calls == n


def test_select_action_clips_to_bounds():
    class WildIdm(_StubIdm):
        def predict(self, s, code):
            return np.array([5.0, -5.0])

    a = on.select_action(_StubAgent(), _StubModel(), WildIdm(), np.zeros(4), 1.0,
                         np.random.default_rng(3), np.random.default_rng(4))
    np.testing.assert_array_equal(a, [1.0, -1.0])


def test_beta_zero_guided_run_matches_unguided_run():
    """With beta forced to 0 the guidance machinery must not perturb the run."""
    spec = make_env("pointmass")
    ds = dt.strip_actions(dt.generate_dataset(spec, dt.RandomPolicy(spec), 400,
                                              substream(0, "gen-data"), "random"))
    model = pt.bc_delta_train(ds, pt.OfflineConfig(steps=10, hidden_dim=8,
                                                   hidden_layers=1),
                              np.random.default_rng(1))
    base_cfg = dict(agent_kind="td3", total_steps=600, eval_every=200,
                    eval_episodes=2, seed=42,
                    td3=on.Td3Config(hidden_dim=16, hidden_layers=1,
                                     learning_starts=100, batch=32))
    unguided = on.guided_train(spec, None, on.GuidedConfig(guide=False, **base_cfg))
    guided = on.guided_train(spec, model,
                             on.GuidedConfig(guide=True, beta_fixed=0.0,
                                             idm_warmup=100, **base_cfg),
                             offline_dataset=ds)
    for (s1, m1, d1, b1, _), (s2, m2, d2, b2, _) in zip(unguided.curve, guided.curve):
        assert s1 == s2 and b1 == b2 == 0.0
        assert m1 == pytest.approx(m2, abs=1e-9)
        assert d1 == pytest.approx(d2, abs=1e-9)


def test_guided_train_is_deterministic_under_seed():
    spec = make_env("pointmass")
    cfg = dict(agent_kind="td3", total_steps=400, eval_every=200, eval_episodes=2,
               guide=False, seed=7,
               td3=on.Td3Config(hidden_dim=16, hidden_layers=1,
                                learning_starts=100, batch=32))
    a = on.guided_train(spec, None, on.GuidedConfig(**cfg))
    b = on.guided_train(spec, None, on.GuidedConfig(**cfg))
    assert a.curve == b.curve


# --- TD3 ---------------------------------------------------------------------

def test_td3_critic_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    spec = make_env("pointmass")
    agent = on.Td3Agent(spec, on.Td3Config(hidden_dim=12, hidden_layers=1), rng)
    # swap in float64 critics for the check
    agent.critics[0] = nn.mlp_init([6, 12, 1], np.random.default_rng(6),
                                   dtype=np.float64)
    s = rng.normal(size=(8, 4))
    a = rng.uniform(-1, 1, size=(8, 2))
    y = rng.normal(size=8)
    x = np.concatenate([s, a], axis=1)

    def lg(net):
        q, cache = nn.forward_cached(net, x)
        diff = q[:, 0] - y
        grads = nn.backward(net, cache, (2.0 * diff / 8)[:, None])
        return float(np.mean(diff ** 2)), (grads[0], grads[1])

    assert nn.grad_check(lg, agent.critics[0], 30, rng) < 1e-6


def test_td3_improves_on_pointmass_quickly():
    spec = make_env("pointmass")
    cfg = on.GuidedConfig(agent_kind="td3", total_steps=4000, guide=False, seed=3,
                          eval_every=4000, eval_episodes=5,
                          td3=on.Td3Config(hidden_dim=64, hidden_layers=2))
    result = on.guided_train(spec, None, cfg)
    final = result.curve[-1][1]
    rng = np.random.default_rng(0)
    random_ret = dt.evaluate_policy(spec, dt.RandomPolicy(spec), 5, rng).mean()
    assert final > random_ret + 50.0  # clearly better than random


# --- IDM ---------------------------------------------------------------------

def test_idm_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    spec = make_env("pointmass")
    idm = on.IdmNet(spec, on.IdmConfig(hidden_dim=10, hidden_layers=1), rng)
    idm.net = nn.mlp_init([8, 10, 2], np.random.default_rng(9), dtype=np.float64)
    s = rng.normal(size=(6, 4))
    code = rng.choice([-1.0, 0.0, 1.0], size=(6, 4))
    target = rng.uniform(-1, 1, size=(6, 2))

    def lg(net):
        probe = on.IdmNet(spec, idm.config, np.random.default_rng(0))
        probe.net = net
        return on.idm_loss_and_grad(probe, s, code, target)

    # L1 is non-smooth; keep probes away from kinks by the data draw
    assert nn.grad_check(lg, idm.net, 30, rng) < 1e-5


def test_idm_learns_a_simple_inverse_map():
    """Synthetic dynamics a = 0.5 * code per dimension pair."""
    spec = make_env("pointmass")
    rng = np.random.default_rng(10)
    idm = on.IdmNet(spec, on.IdmConfig(hidden_dim=32, hidden_layers=2, lr=1e-3), rng)
    s = rng.normal(size=(2048, 4))
    code = rng.choice([-1.0, 0.0, 1.0], size=(2048, 4))
    a = 0.5 * code[:, :2]
    for i in range(400):
        idx = rng.integers(2048, size=256)
        loss = on.idm_update(idm, (s[idx], code[idx], a[idx]), None)
    assert loss < 0.15  # summed L1 over 2 action dims


def test_idm_two_term_loss_includes_offline_term():
    spec = make_env("pointmass")
    rng = np.random.default_rng(11)
    idm = on.IdmNet(spec, on.IdmConfig(hidden_dim=8, hidden_layers=1), rng)
    s = rng.normal(size=(16, 4))
    code = rng.choice([-1.0, 1.0], size=(16, 4))
    a = rng.uniform(-1, 1, size=(16, 2))
    only_online = on.idm_loss_and_grad(idm, s, code, a)[0]
    both = on.idm_update(on.IdmNet(spec, idm.config, np.random.default_rng(11)),
                         (s, code, a), (s, code, a))
    assert both == pytest.approx(2 * only_online, rel=1e-6)


# --- policy checkpoints --------------------------------------------------------

def test_policy_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    actor = nn.mlp_init([4, 16, 2], rng)
    pol = on.DeterministicActorPolicy("pointmass", actor)
    path = tmp_path / "p.afpl"
    on.save_policy(pol, path)
    back = on.load_policy(path)
    assert back.env_name == "pointmass"
    s = rng.normal(size=(5, 4))
    np.testing.assert_allclose(back.act(s), pol.act(s), atol=1e-7)
    path2 = tmp_path / "p2.afpl"
    on.save_policy(back, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_decqn_agent_runs_and_acts_within_bounds():
    spec = make_env("pointmass")
    cfg = on.GuidedConfig(agent_kind="decqn", total_steps=300, guide=False, seed=5,
                          eval_every=300, eval_episodes=1,
                          decqn=on.DecqnOnlineConfig(hidden_dim=16, hidden_layers=1,
                                                     ensemble=2, learning_starts=50,
                                                     batch=16))
    result = on.guided_train(spec, None, cfg)
    a = result.agent.act(np.zeros(4))
    assert np.all(a >= spec.action_low) and np.all(a <= spec.action_high)
    a_batch = result.agent.act(np.zeros((7, 4)))
    assert a_batch.shape == (7, 2)
