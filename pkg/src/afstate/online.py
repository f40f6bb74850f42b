"""Guided online learning.

An online agent (TD3 for continuous actions, or a discrete-action
decomposed-Q agent) interacts with the environment while, with
probability beta(t), the executed action instead comes from the
pre-trained state policy translated through an inverse dynamics model
(IDM). The IDM is trained from scratch concurrently, with a two-term L1
loss: one term on executed online actions, one on offline states whose
actions are relabelled by the current online policy.

beta follows a piecewise-constant annealing schedule, dropping by a
fixed decrement at fixed step intervals until it reaches beta_min.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import critic as cr
from . import nn
from .data import Dataset
from .discretiser import discretise
from .envs import EnvSpec, make_env, reset, step
from .pretrain import PretrainedModel, ensure_compatible
from .rng import substream

POLICY_MAGIC = b"AFPL"


# --- beta schedule ----------------------------------------------------------

@dataclass(frozen=True)
class GuidanceSchedule:
    beta_max: float = 0.5
    beta_decrement: float = 0.1
    interval: int = 100_000
    beta_min: float = 0.0

    def beta(self, env_step: int) -> float:
        if env_step < 0:
            raise ValueError("env_step must be >= 0")
        val = self.beta_max - self.beta_decrement * (env_step // self.interval)
        return float(min(self.beta_max, max(self.beta_min, val)))


def beta(schedule: GuidanceSchedule, env_step: int) -> float:
    return schedule.beta(env_step)


# --- replay buffer ----------------------------------------------------------

class ReplayBuffer:
    """Uniform-sampling ring buffer of action-labelled transitions.

    Also keeps the state-difference code of each transition (computed
    with the pretrained normalisation stats) and an episode id so that
    contiguous n-step slices can be sampled.
    """

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity)
        self.code = np.zeros((capacity, state_dim), dtype=np.int8)
        self.episode = np.full(capacity, -1, dtype=np.int64)
        self.cursor = 0
        self.size = 0

    def add(self, s, a, r, s2, done, code, episode):
        i = self.cursor
        self.s[i], self.a[i], self.r[i] = s, a, r
        self.s2[i], self.done[i] = s2, float(done)
        self.code[i] = code
        self.episode[i] = episode
        self.cursor = (self.cursor + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        return rng.integers(self.size, size=batch)


# --- TD3 agent --------------------------------------------------------------

@dataclass
class Td3Config:
    hidden_dim: int = 256
    hidden_layers: int = 2
    actor_lr: float = 5e-4
    critic_lr: float = 5e-4
    batch: int = 256
    gamma: float = 0.99
    tau: float = 5e-3
    policy_noise: float = 0.2
    noise_clip: float = 0.5
    policy_freq: int = 2
    explore_noise: float = 0.1
    learning_starts: int = 1000

    def hidden(self) -> list[int]:
        return [self.hidden_dim] * self.hidden_layers


class Td3Agent:
    def __init__(self, spec: EnvSpec, config: Td3Config, rng: np.random.Generator):
        self.spec = spec
        self.config = config
        m, n = spec.state_dim, spec.action_dim
        self.scale = (spec.action_high - spec.action_low) / 2.0
        self.center = (spec.action_high + spec.action_low) / 2.0
        h = config.hidden()
        self.actor = nn.mlp_init([m] + h + [n], rng)
        self.actor_target = self.actor.copy()
        self.critics = [nn.mlp_init([m + n] + h + [1], rng) for _ in range(2)]
        self.critic_targets = [c.copy() for c in self.critics]
        self.actor_opt = nn.adam_init(self.actor, config.actor_lr)
        self.critic_opts = [nn.adam_init(c, config.critic_lr) for c in self.critics]
        self.updates = 0

    def act(self, s, rng: np.random.Generator | None = None, explore: bool = False):
        a = self.center + self.scale * np.tanh(nn.forward(self.actor, s))
        if explore:
            a = a + rng.normal(0.0, self.config.explore_noise * self.scale, size=a.shape)
        return np.clip(a, self.spec.action_low, self.spec.action_high)

    def update(self, buffer: ReplayBuffer, rng: np.random.Generator):
        cfg = self.config
        idx = buffer.sample_indices(cfg.batch, rng)
        s, a, r = buffer.s[idx], buffer.a[idx], buffer.r[idx]
        s2, done = buffer.s2[idx], buffer.done[idx]
        losses = td3_update(self, (s, a, r, s2, done), cfg.gamma, rng)
        return losses


def td3_update(agent: Td3Agent, batch, gamma: float, rng: np.random.Generator):
    """One clipped-double-Q update with target-policy smoothing."""
    cfg = agent.config
    s, a, r, s2, done = batch
    nbatch = s.shape[0]

    noise = np.clip(rng.normal(0.0, cfg.policy_noise, size=a.shape),
                    -cfg.noise_clip, cfg.noise_clip) * agent.scale
    a2 = agent.center + agent.scale * np.tanh(nn.forward(agent.actor_target, s2)) + noise
    a2 = np.clip(a2, agent.spec.action_low, agent.spec.action_high)
    x2 = np.concatenate([s2, a2], axis=1)
    q_next = np.minimum(nn.forward(agent.critic_targets[0], x2),
                        nn.forward(agent.critic_targets[1], x2))[:, 0]
    y = r + gamma * (1.0 - done) * q_next

    x = np.concatenate([s, a], axis=1)
    critic_losses = []
    for critic, opt in zip(agent.critics, agent.critic_opts):
        q, cache = nn.forward_cached(critic, x)
        diff = q[:, 0] - y
        loss = float(np.mean(diff ** 2))
        if not np.isfinite(loss):
            raise RuntimeError("non-finite TD3 critic loss")
        grads = nn.backward(critic, cache, (2.0 * diff / nbatch)[:, None])
        nn.adam_step(critic, grads[:2], opt)
        critic_losses.append(loss)

    actor_loss = None
    agent.updates += 1
    if agent.updates % cfg.policy_freq == 0:
        u, actor_cache = nn.forward_cached(agent.actor, s)
        tanh_u = np.tanh(u)
        a_pi = agent.center + agent.scale * tanh_u
        x_pi = np.concatenate([s, a_pi], axis=1)
        q, q_cache = nn.forward_cached(agent.critics[0], x_pi)
        actor_loss = float(-np.mean(q))
        _, _, dx = nn.backward(agent.critics[0], q_cache,
                               np.full((nbatch, 1), -1.0 / nbatch))
        da = dx[:, s.shape[1]:]
        du = da * agent.scale * (1.0 - tanh_u ** 2)
        agrads = nn.backward(agent.actor, actor_cache, du)
        nn.adam_step(agent.actor, agrads[:2], agent.actor_opt)
        cr.soft_update_mlp(agent.actor_target, agent.actor, cfg.tau)
        for tgt, online in zip(agent.critic_targets, agent.critics):
            cr.soft_update_mlp(tgt, online, cfg.tau)
    return {"critic_loss": float(np.mean(critic_losses)), "actor_loss": actor_loss}


# --- discrete-action decomposed-Q agent -------------------------------------

@dataclass
class DecqnOnlineConfig:
    hidden_dim: int = 256
    hidden_layers: int = 2
    lr: float = 5e-4
    batch: int = 256
    gamma: float = 0.99
    tau: float = 1e-3
    ensemble: int = 5
    n_step: int = 3
    action_bins: int = 3
    eps_min: float = 0.05
    eps_decay: float = 0.999
    learning_starts: int = 1000

    def hidden(self) -> list[int]:
        return [self.hidden_dim] * self.hidden_layers


class DecqnOnlineAgent:
    """Decomposed-Q agent over a per-dimension discretised action space."""

    def __init__(self, spec: EnvSpec, config: DecqnOnlineConfig, rng: np.random.Generator):
        self.spec = spec
        self.config = config
        b = config.action_bins
        # evenly spaced action levels per dimension, endpoints included
        self.levels = np.linspace(0.0, 1.0, b)[None, :] \
            * (spec.action_high - spec.action_low)[:, None] + spec.action_low[:, None]
        self.critic = cr.make_critic(spec.state_dim, b, config.hidden(),
                                     config.ensemble, rng, n_heads=spec.action_dim)
        self.opts = [nn.adam_init(m, config.lr) for m in self.critic.members]
        self.epsilon = 1.0

    def bins_to_action(self, bins_idx: np.ndarray) -> np.ndarray:
        bins_idx = np.asarray(bins_idx)
        return self.levels[np.arange(self.spec.action_dim), bins_idx]

    def action_to_bins(self, a: np.ndarray) -> np.ndarray:
        # nearest level per dimension
        d = np.abs(self.levels[None, :, :] - np.asarray(a).reshape(-1, self.spec.action_dim)[:, :, None])
        return d.argmin(axis=-1)

    def act(self, s, rng: np.random.Generator | None = None, explore: bool = False):
        if explore and rng.uniform() < self.epsilon:
            bins_idx = rng.integers(self.config.action_bins, size=self.spec.action_dim)
        else:
            util = cr.mean_utilities(self.critic, s)
            bins_idx = util.argmax(axis=-1)
        return self.bins_to_action(np.asarray(bins_idx))

    def update(self, buffer: ReplayBuffer, rng: np.random.Generator):
        cfg = self.config
        n = cfg.n_step
        # sample starts whose n-step window stays inside one episode
        idx = buffer.sample_indices(cfg.batch, rng)
        last = np.minimum(idx + n - 1, buffer.size - 1)
        same = buffer.episode[idx] == buffer.episode[last]
        last = np.where(same, last, idx)
        span = last - idx + 1
        rets = np.zeros(cfg.batch)
        for j in range(n):
            active = j < span
            rets[active] += (cfg.gamma ** j) * buffer.r[np.minimum(idx + j, buffer.size - 1)][active]
        s_n = buffer.s2[last]
        util_t = cr.mean_utilities(self.critic, s_n, use_targets=True)
        bins_star = util_t.argmax(axis=-1)
        t1, t2 = rng.choice(self.critic.ensemble_size, size=2, replace=False) \
            if self.critic.ensemble_size >= 2 else (0, 0)
        u1 = cr.utilities(self.critic.targets[int(t1)], s_n, self.critic.state_dim, self.critic.bins)
        u2 = cr.utilities(self.critic.targets[int(t2)], s_n, self.critic.state_dim, self.critic.bins)
        q1 = np.take_along_axis(u1, bins_star[..., None], axis=-1)[..., 0].mean(axis=-1)
        q2 = np.take_along_axis(u2, bins_star[..., None], axis=-1)[..., 0].mean(axis=-1)
        y = rets + (cfg.gamma ** span) * np.minimum(q1, q2)

        a_bins = self.action_to_bins(buffer.a[idx])
        losses = []
        for mem, opt in zip(self.critic.members, self.opts):
            out, cache = nn.forward_cached(mem, buffer.s[idx])
            util = out.reshape(cfg.batch, self.critic.state_dim, self.critic.bins)
            q = np.take_along_axis(util, a_bins[..., None], axis=-1)[..., 0].mean(axis=-1)
            diff = q - y
            loss = float(np.mean(diff ** 2))
            if not np.isfinite(loss):
                raise RuntimeError("non-finite online DecQN loss")
            d_util = np.zeros_like(util)
            np.put_along_axis(d_util, a_bins[..., None],
                              (2.0 * diff / cfg.batch)[:, None, None] / self.critic.state_dim,
                              axis=-1)
            grads = nn.backward(mem, cache, d_util.reshape(cfg.batch, -1))
            nn.adam_step(mem, grads[:2], opt)
            losses.append(loss)
        cr.soft_update(self.critic, cfg.tau)
        self.epsilon = max(cfg.eps_min, self.epsilon * cfg.eps_decay)
        return {"critic_loss": float(np.mean(losses)), "actor_loss": None}


# --- inverse dynamics model ---------------------------------------------------

@dataclass
class IdmConfig:
    hidden_dim: int = 256
    hidden_layers: int = 2
    lr: float = 1e-3
    batch: int = 512

    def hidden(self) -> list[int]:
        return [self.hidden_dim] * self.hidden_layers


class IdmNet:
    """Maps (state, code-as-reals) to a tanh-squashed action."""

    def __init__(self, spec: EnvSpec, config: IdmConfig, rng: np.random.Generator):
        self.spec = spec
        self.config = config
        self.scale = (spec.action_high - spec.action_low) / 2.0
        self.center = (spec.action_high + spec.action_low) / 2.0
        self.net = nn.mlp_init([2 * spec.state_dim] + config.hidden() + [spec.action_dim], rng)
        self.opt = nn.adam_init(self.net, config.lr)

    def predict(self, s: np.ndarray, code: np.ndarray) -> np.ndarray:
        x = np.concatenate([np.asarray(s, dtype=np.float64),
                            np.asarray(code, dtype=np.float64)], axis=-1)
        return self.center + self.scale * np.tanh(nn.forward(self.net, x))


def idm_predict(idm: IdmNet, s: np.ndarray, code: np.ndarray) -> np.ndarray:
    return idm.predict(s, code)


def idm_loss_and_grad(idm: IdmNet, s: np.ndarray, code: np.ndarray,
                      target_a: np.ndarray):
    """Mean over the batch of the per-sample L1 action error, plus grads."""
    x = np.concatenate([np.asarray(s, dtype=np.float64),
                        np.asarray(code, dtype=np.float64)], axis=-1)
    u, cache = nn.forward_cached(idm.net, x)
    tanh_u = np.tanh(u)
    pred = idm.center + idm.scale * tanh_u
    err = pred - target_a
    loss = float(np.mean(np.abs(err).sum(axis=-1)))
    d_pred = np.sign(err) / err.shape[0]
    du = d_pred * idm.scale * (1.0 - tanh_u ** 2)
    grads = nn.backward(idm.net, cache, du)
    return loss, (grads[0], grads[1])


def idm_update(idm: IdmNet, online_batch, offline_batch) -> float:
    """One step on the summed two-term L1 objective.

    online_batch: (s, code, executed action); offline_batch: (s_off,
    code_off, relabelled action) or None to drop the offline term.
    Returns the summed loss value.
    """
    s, code, a = online_batch
    loss_on, grads = idm_loss_and_grad(idm, s, code, a)
    total = loss_on
    if offline_batch is not None:
        s_off, code_off, a_off = offline_batch
        loss_off, g_off = idm_loss_and_grad(idm, s_off, code_off, a_off)
        nn.accumulate(grads, g_off)
        total += loss_off
    nn.adam_step(idm.net, grads, idm.opt)
    return total


# --- guided training loop -----------------------------------------------------

@dataclass
class GuidedConfig:
    agent_kind: str = "td3"           # "td3" or "decqn"
    total_steps: int = 100_000
    guide: bool = True
    beta_max: float = 0.5
    beta_decrement: float = 0.1
    beta_interval: int | None = None  # default: total_steps / 10
    beta_min: float = 0.0
    beta_fixed: float | None = None   # overrides the schedule when set
    idm_warmup: int = 1000
    eval_every: int | None = None     # default: total_steps / 20
    eval_episodes: int = 10
    seed: int = 0
    td3: Td3Config = field(default_factory=Td3Config)
    decqn: DecqnOnlineConfig = field(default_factory=DecqnOnlineConfig)
    idm: IdmConfig = field(default_factory=IdmConfig)

    def schedule(self) -> GuidanceSchedule:
        interval = self.beta_interval or max(1, self.total_steps // 10)
        if self.beta_fixed is not None:
            return GuidanceSchedule(self.beta_fixed, 0.0, interval, self.beta_fixed)
        return GuidanceSchedule(self.beta_max, self.beta_decrement, interval, self.beta_min)


@dataclass
class GuidedResult:
    curve: list            # (env_step, mean_return, std_return, beta, idm_loss)
    agent: object
    idm: IdmNet | None
    idm_loss_trace: list   # (env_step, loss)


def evaluate_agent(spec: EnvSpec, agent, episodes: int, rng: np.random.Generator) -> np.ndarray:
    returns = np.empty(episodes)
    for e in range(episodes):
        s = reset(spec, rng)
        total = 0.0
        for _ in range(spec.horizon):
            s, r, term = step(spec, s, agent.act(s), rng)
            total += r
            if term:
                break
        returns[e] = total
    return returns


def select_action(agent, model: PretrainedModel | None, idm: IdmNet | None,
                  s: np.ndarray, beta_now: float, rng_switch: np.random.Generator,
                  rng_agent: np.random.Generator):
    """Policy switching: offline-guided action with probability beta."""
    zeta = rng_switch.uniform()
    if model is not None and idm is not None and zeta < beta_now:
        code = model.predict_code(s)
        a = idm.predict(s, code)
    else:
        a = agent.act(s, rng_agent, explore=True)
    return np.clip(a, agent.spec.action_low, agent.spec.action_high)


def guided_train(spec: EnvSpec, model: PretrainedModel | None,
                 config: GuidedConfig,
                 offline_dataset: Dataset | None = None) -> GuidedResult:
    """Online training loop with beta-scheduled policy switching.

    With config.guide False (or model None) this is the plain online
    trainer: the switching draw still happens each step so that guided
    and unguided runs share trajectories when beta is identically 0.
    """
    if model is not None:
        ensure_compatible(model, spec.state_dim)
    seed = config.seed
    rng_env = substream(seed, "env")
    rng_agent = substream(seed, "agent")
    rng_switch = substream(seed, "switch")
    rng_idm = substream(seed, "idm")
    rng_init = substream(seed, "init")

    if config.agent_kind == "td3":
        agent = Td3Agent(spec, config.td3, rng_init)
        learning_starts = config.td3.learning_starts
    elif config.agent_kind == "decqn":
        agent = DecqnOnlineAgent(spec, config.decqn, rng_init)
        learning_starts = config.decqn.learning_starts
    else:
        raise ValueError(f"unknown agent kind '{config.agent_kind}'")

    idm = IdmNet(spec, config.idm, rng_init) if model is not None else None
    schedule = config.schedule()
    guide_on = config.guide and model is not None and idm is not None

    buffer = ReplayBuffer(config.total_steps, spec.state_dim, spec.action_dim)
    eval_every = config.eval_every or max(1, config.total_steps // 20)

    off_states = off_codes = None
    if guide_on and offline_dataset is not None:
        off_states = offline_dataset.states.astype(np.float64)
        off_codes = discretise(offline_dataset.states, offline_dataset.next_states,
                               model.stats, model.disc)

    curve = []
    idm_trace = []
    episode_id = 0
    s = reset(spec, rng_env)
    steps_in_episode = 0
    last_idm_loss = np.nan

    for t in range(config.total_steps):
        beta_now = schedule.beta(t) if (guide_on and t >= config.idm_warmup) else 0.0
        if t < learning_starts:
            zeta = rng_switch.uniform()  # keep switch stream aligned
            a = rng_agent.uniform(spec.action_low, spec.action_high)
            if guide_on and t >= config.idm_warmup and zeta < beta_now:
                a = idm.predict(s, model.predict_code(s))
        else:
            a = select_action(agent, model if guide_on else None, idm, s,
                              beta_now, rng_switch, rng_agent)
        s2, r, term = step(spec, s, a, rng_env)
        code = (discretise(s, s2, model.stats, model.disc)
                if model is not None else np.zeros(spec.state_dim, dtype=np.int8))
        buffer.add(s, a, r, s2, term, code, episode_id)
        s = s2
        steps_in_episode += 1
        if term or steps_in_episode >= spec.horizon:
            episode_id += 1
            steps_in_episode = 0
            s = reset(spec, rng_env)

        if t >= learning_starts:
            agent.update(buffer, rng_agent)
            if guide_on and t >= config.idm_warmup:
                last_idm_loss = _idm_step(idm, agent, buffer, off_states, off_codes,
                                          config.idm.batch, rng_idm)
                if t % 500 == 0:
                    idm_trace.append((t, last_idm_loss))

        if (t + 1) % eval_every == 0 or t == config.total_steps - 1:
            rets = evaluate_agent(spec, agent, config.eval_episodes,
                                  substream(seed, f"eval-{t}"))
            curve.append((t + 1, float(rets.mean()), float(rets.std()),
                          beta_now, float(last_idm_loss)))
    return GuidedResult(curve, agent, idm, idm_trace)


def _idm_step(idm: IdmNet, agent, buffer: ReplayBuffer, off_states, off_codes,
              batch: int, rng: np.random.Generator) -> float:
    idx = buffer.sample_indices(batch, rng)
    online_batch = (buffer.s[idx], buffer.code[idx], buffer.a[idx])
    offline_batch = None
    if off_states is not None:
        oidx = rng.integers(off_states.shape[0], size=batch)
        s_off = off_states[oidx]
        # relabel with the deterministic online policy (no exploration noise)
        a_off = agent.act(s_off)
        offline_batch = (s_off, off_codes[oidx], a_off)
    return idm_update(idm, online_batch, offline_batch)


# --- expert policy checkpoints -------------------------------------------------

class DeterministicActorPolicy:
    """Frozen tanh-squashed actor usable as a behaviour policy."""

    def __init__(self, env_name: str, actor: nn.Mlp):
        self.env_name = env_name
        spec = make_env(env_name)
        self.spec = spec
        self.scale = (spec.action_high - spec.action_low) / 2.0
        self.center = (spec.action_high + spec.action_low) / 2.0
        self.actor = actor

    def reset(self, rng):
        pass

    def act(self, state, rng=None):
        a = self.center + self.scale * np.tanh(nn.forward(self.actor, state))
        return np.clip(a, self.spec.action_low, self.spec.action_high)


def save_policy(policy: DeterministicActorPolicy, path) -> None:
    from .pretrain import _pack_mlp
    name = policy.env_name.encode("utf-8")
    with open(path, "wb") as f:
        f.write(POLICY_MAGIC)
        f.write(struct.pack("<H", len(name)))
        f.write(name)
        _pack_mlp(f, policy.actor)


def load_policy(path) -> DeterministicActorPolicy:
    from .pretrain import _unpack_mlp
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != POLICY_MAGIC:
        raise ValueError(f"bad policy magic {buf[:4]!r}")
    (name_len,) = struct.unpack_from("<H", buf, 4)
    name = buf[6:6 + name_len].decode("utf-8")
    actor, _ = _unpack_mlp(buf, 6 + name_len)
    return DeterministicActorPolicy(name, actor)


def train_expert(spec: EnvSpec, total_steps: int, seed: int,
                 td3_config: Td3Config | None = None) -> tuple[DeterministicActorPolicy, list]:
    """Train a TD3 agent from scratch and freeze its actor as the expert."""
    cfg = GuidedConfig(agent_kind="td3", total_steps=total_steps, guide=False,
                       seed=seed, td3=td3_config or Td3Config())
    result = guided_train(spec, None, cfg)
    policy = DeterministicActorPolicy(spec.name, result.agent.actor.copy())
    return policy, result.curve
