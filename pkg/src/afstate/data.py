"""Offline datasets: behaviour policies, rollout collection, action
stripping and the binary on-disk format.

The file layout (little-endian) is::

    magic "AFRL" | version u32 | M u32 | N u32 | count u64
    | action_free u8 | quality u8 | reserved 16 bytes
    body: per transition s (M f32), a (N f32, omitted if action-free),
          r (f32), s' (M f32), terminal (u8)
    footer: episode-start count u64, then each start index as u64
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .envs import EnvSpec, make_env, reset, step

MAGIC = b"AFRL"
FORMAT_VERSION = 1
QUALITIES = ("random", "medium", "expert", "mixture")


@dataclass
class Dataset:
    env_name: str
    states: np.ndarray        # (n, M) float32
    actions: np.ndarray | None  # (n, N) float32, None when action-free
    rewards: np.ndarray       # (n,) float32
    next_states: np.ndarray   # (n, M) float32
    terminals: np.ndarray     # (n,) uint8
    episode_starts: np.ndarray  # (k,) uint64, ascending, starts with 0
    quality: str = "random"

    @property
    def action_free(self) -> bool:
        return self.actions is None

    def __len__(self) -> int:
        return self.states.shape[0]

    def episode_returns(self) -> np.ndarray:
        """Undiscounted return of each (possibly partial) logged episode."""
        bounds = list(self.episode_starts) + [len(self)]
        return np.array([self.rewards[int(a):int(b)].sum()
                         for a, b in zip(bounds[:-1], bounds[1:])])


class RandomPolicy:
    def __init__(self, spec: EnvSpec):
        self.spec = spec

    def reset(self, rng):
        pass

    def act(self, state, rng):
        return rng.uniform(self.spec.action_low, self.spec.action_high)


class MediumPolicy:
    """Multimodal mid-quality behaviour built from a trained expert.

    Per step: with `flip_prob` the expert action is negated (a second,
    opposing behaviour mode), with `random_prob` the action is uniform,
    otherwise the expert action is used; the non-uniform branches get
    Gaussian noise. The negated mode makes the behaviour conditionally
    multimodal: the mean action at a state is a scaled-down expert action
    (scale 1 - random_prob - 2*flip_prob), while the modal action is the
    expert's. Regressing continuous targets on such data recovers the
    misleading mean; classifying discrete codes recovers the mode.
    """

    def __init__(self, spec: EnvSpec, expert, noise_scale: float = 0.1,
                 flip_prob: float = 0.4, random_prob: float = 0.1):
        self.spec = spec
        self.expert = expert
        self.sigma = noise_scale * (spec.action_high - spec.action_low)
        self.flip_prob = flip_prob
        self.random_prob = random_prob

    def reset(self, rng):
        self.expert.reset(rng)

    def act(self, state, rng):
        u = rng.uniform()
        if u < self.random_prob:
            return rng.uniform(self.spec.action_low, self.spec.action_high)
        a = self.expert.act(state, rng)
        if u < self.random_prob + self.flip_prob:
            a = -a
        a = a + rng.normal(0.0, self.sigma)
        return np.clip(a, self.spec.action_low, self.spec.action_high)


class MixturePolicy:
    """Per-episode draw among random / medium / expert behaviour."""

    def __init__(self, spec: EnvSpec, expert):
        self.members = [RandomPolicy(spec), MediumPolicy(spec, expert), expert]
        self.current = self.members[0]

    def reset(self, rng):
        self.current = self.members[int(rng.integers(3))]
        self.current.reset(rng)

    def act(self, state, rng):
        return self.current.act(state, rng)


def make_behaviour_policy(spec: EnvSpec, quality: str, expert=None):
    """Scripted data-collection policy of graded quality.

    `expert` is a trained policy object (see online.load_policy); it is
    required for the medium/expert/mixture qualities.
    """
    if quality == "random":
        return RandomPolicy(spec)
    if quality not in QUALITIES:
        raise ValueError(f"unknown quality '{quality}'")
    if expert is None:
        raise ValueError(f"quality '{quality}' needs a trained expert policy "
                         "(run the train-expert command first)")
    if quality == "expert":
        return expert
    if quality == "medium":
        return MediumPolicy(spec, expert)
    return MixturePolicy(spec, expert)


def generate_dataset(spec: EnvSpec, policy, n_transitions: int,
                     rng: np.random.Generator, quality: str = "random") -> Dataset:
    """Roll out `policy` until exactly n_transitions are collected."""
    if n_transitions < 1:
        raise ValueError("n_transitions must be >= 1")
    m, n_act = spec.state_dim, spec.action_dim
    states = np.empty((n_transitions, m), dtype=np.float32)
    actions = np.empty((n_transitions, n_act), dtype=np.float32)
    rewards = np.empty(n_transitions, dtype=np.float32)
    next_states = np.empty((n_transitions, m), dtype=np.float32)
    terminals = np.zeros(n_transitions, dtype=np.uint8)
    starts = []
    i = 0
    while i < n_transitions:
        starts.append(i)
        policy.reset(rng)
        s = reset(spec, rng)
        for _ in range(spec.horizon):
            a = policy.act(s, rng)
            s2, r, term = step(spec, s, a, rng)
            states[i] = s
            actions[i] = np.clip(a, spec.action_low, spec.action_high)
            rewards[i] = r
            next_states[i] = s2
            terminals[i] = np.uint8(term)
            s = s2
            i += 1
            if i == n_transitions or term:
                break
    return Dataset(spec.name, states, actions, rewards, next_states, terminals,
                   np.array(starts, dtype=np.uint64), quality=quality)


def strip_actions(dataset: Dataset) -> Dataset:
    """Remove action labels; everything else is shared, not copied."""
    if dataset.action_free:
        warnings.warn("dataset is already action-free; strip_actions is a no-op")
        return dataset
    return Dataset(dataset.env_name, dataset.states, None, dataset.rewards,
                   dataset.next_states, dataset.terminals, dataset.episode_starts,
                   quality=dataset.quality)


def concat_datasets(parts: list[Dataset]) -> Dataset:
    """Concatenate datasets from the same environment.

    All parts must agree on action labelling; the result keeps the first
    part's quality tag.
    """
    if not parts:
        raise ValueError("need at least one dataset")
    envs_seen = {d.env_name for d in parts}
    if len(envs_seen) != 1:
        raise ValueError(f"datasets span multiple environments: {sorted(envs_seen)}")
    if len({d.action_free for d in parts}) != 1:
        raise ValueError("cannot mix labelled and action-free datasets")
    if len(parts) == 1:
        return parts[0]
    starts, offset = [], 0
    for d in parts:
        starts.append(d.episode_starts + np.uint64(offset))
        offset += len(d)
    actions = None if parts[0].action_free \
        else np.concatenate([d.actions for d in parts])
    return Dataset(parts[0].env_name,
                   np.concatenate([d.states for d in parts]),
                   actions,
                   np.concatenate([d.rewards for d in parts]),
                   np.concatenate([d.next_states for d in parts]),
                   np.concatenate([d.terminals for d in parts]),
                   np.concatenate(starts),
                   quality=parts[0].quality)


def evaluate_policy(spec: EnvSpec, policy, episodes: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Undiscounted returns over fresh full-horizon rollouts."""
    returns = np.empty(episodes)
    for e in range(episodes):
        policy.reset(rng)
        s = reset(spec, rng)
        total = 0.0
        for _ in range(spec.horizon):
            s, r, term = step(spec, s, policy.act(s, rng), rng)
            total += r
            if term:
                break
        returns[e] = total
    return returns


# --- binary file format ---------------------------------------------------

_HEADER = struct.Struct("<4sIIIQBB16s")


def save_dataset(dataset: Dataset, path) -> None:
    m = dataset.states.shape[1]
    if dataset.action_free:
        n = make_env(dataset.env_name).action_dim
    else:
        n = dataset.actions.shape[1]
    count = len(dataset)
    quality_tag = QUALITIES.index(dataset.quality)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, m, n, count,
                          int(dataset.action_free), quality_tag, b"\x00" * 16)
    body = np.empty(count, dtype=_body_dtype(m, n, dataset.action_free))
    body["s"] = dataset.states
    if not dataset.action_free:
        body["a"] = dataset.actions
    body["r"] = dataset.rewards
    body["sp"] = dataset.next_states
    body["t"] = dataset.terminals
    starts = np.asarray(dataset.episode_starts, dtype="<u8")
    with open(path, "wb") as f:
        f.write(header)
        f.write(body.tobytes())
        f.write(struct.pack("<Q", starts.size))
        f.write(starts.tobytes())


def _body_dtype(m: int, n: int, action_free: bool) -> np.dtype:
    fields = [("s", "<f4", (m,))]
    if not action_free:
        fields.append(("a", "<f4", (n,)))
    fields += [("r", "<f4"), ("sp", "<f4", (m,)), ("t", "u1")]
    return np.dtype(fields)


def _guess_env(m: int, n: int) -> str:
    for name in ("pointmass", "pendulum", "multipoint2", "multipoint4"):
        spec = make_env(name)
        if spec.state_dim == m and spec.action_dim == n:
            return name
    raise ValueError(f"no known environment with M={m}, N={n}")


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated dataset file: incomplete header")
    magic, version, m, n, count, action_free, quality_tag, _ = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format version {version}")
    dt = _body_dtype(m, n, bool(action_free))
    body_bytes = count * dt.itemsize
    off = _HEADER.size
    if len(raw) < off + body_bytes + 8:
        raise ValueError("truncated dataset file: body shorter than header count")
    body = np.frombuffer(raw, dtype=dt, count=count, offset=off)
    off += body_bytes
    (n_starts,) = struct.unpack_from("<Q", raw, off)
    off += 8
    if len(raw) < off + 8 * n_starts:
        raise ValueError("truncated dataset file: footer incomplete")
    starts = np.frombuffer(raw, dtype="<u8", count=n_starts, offset=off)
    env_name = _guess_env(m, n)
    spec = make_env(env_name)
    if spec.state_dim != m or spec.action_dim != n:
        raise ValueError("header dims do not match environment spec")
    return Dataset(
        env_name,
        body["s"].copy(),
        None if action_free else body["a"].copy(),
        body["r"].copy(),
        body["sp"].copy(),
        body["t"].copy(),
        starts.copy(),
        quality=QUALITIES[quality_tag],
    )
