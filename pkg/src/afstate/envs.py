"""Native continuous-control toy environments.

Three families stand in for the heavyweight benchmark suites:

* ``pointmass``: a 2D point mass (position + velocity) accelerating
  toward a goal at the origin. Reward is negative distance to goal with
  a small action penalty.
* ``pendulum``: classic torque-limited swing-up with (cos, sin, thetadot)
  observations.
* ``multipoint2`` / ``multipoint4``: K independent point masses stacked
  into one state/action vector, for high-dimensional scaling tests.

Dynamics use semi-implicit Euler with fixed dt and are fully
deterministic; randomness enters only through `reset`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class EnvSpec:
    name: str
    state_dim: int
    action_dim: int
    action_low: np.ndarray
    action_high: np.ndarray
    horizon: int
    dt: float
    physics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.state_dim < 1 or self.action_dim < 1:
            raise ValueError("state/action dims must be >= 1")
        if not (np.all(np.isfinite(self.action_low)) and np.all(np.isfinite(self.action_high))):
            raise ValueError("action bounds must be finite")
        if not np.all(self.action_low < self.action_high):
            raise ValueError("action_low must be < action_high")


_POINT_BOX = 2.0     # positions clipped to [-box, box]
_POINT_VMAX = 2.0


def make_env(name: str) -> EnvSpec:
    if name == "pointmass":
        return EnvSpec(
            name="pointmass", state_dim=4, action_dim=2,
            action_low=np.full(2, -1.0), action_high=np.full(2, 1.0),
            horizon=100, dt=0.1)
    if name == "pendulum":
        return EnvSpec(
            name="pendulum", state_dim=3, action_dim=1,
            action_low=np.full(1, -2.0), action_high=np.full(1, 2.0),
            horizon=200, dt=0.05,
            physics={"g": 10.0, "m": 1.0, "l": 1.0, "max_speed": 8.0})
    if name.startswith("multipoint"):
        k = int(name[len("multipoint"):])
        if k not in (2, 4):
            raise ValueError(f"unsupported multipoint size {k}")
        return EnvSpec(
            name=name, state_dim=4 * k, action_dim=2 * k,
            action_low=np.full(2 * k, -1.0), action_high=np.full(2 * k, 1.0),
            horizon=100, dt=0.1, physics={"k": k})
    raise ValueError(f"unknown environment '{name}'")


ENV_NAMES = ("pointmass", "pendulum", "multipoint2", "multipoint4")


def reset(spec: EnvSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.name == "pendulum":
        theta = rng.uniform(-np.pi, np.pi)
        thetadot = rng.uniform(-1.0, 1.0)
        return np.array([np.cos(theta), np.sin(theta), thetadot])
    # point-mass variants: positions uniform in the box, zero velocity
    k = spec.physics.get("k", 1)
    state = np.zeros(4 * k)
    for i in range(k):
        state[4 * i:4 * i + 2] = rng.uniform(-1.5, 1.5, size=2)
    return state


def _pointmass_block(state, action, dt):
    pos, vel = state[:2], state[2:4]
    vel = np.clip(vel + action * dt, -_POINT_VMAX, _POINT_VMAX)
    pos = np.clip(pos + vel * dt, -_POINT_BOX, _POINT_BOX)
    reward = -np.linalg.norm(pos) - 0.01 * float(action @ action)
    return np.concatenate([pos, vel]), reward


def step(spec: EnvSpec, state: np.ndarray, action: np.ndarray,
         rng: np.random.Generator | None = None):
    """Advance one time step; returns (next_state, reward, terminal).

    Actions outside bounds are clipped. All dynamics are deterministic;
    `rng` is accepted for interface uniformity.
    """
    state = np.asarray(state, dtype=np.float64)
    if not np.all(np.isfinite(state)):
        raise ValueError("non-finite state")
    action = np.clip(np.asarray(action, dtype=np.float64),
                     spec.action_low, spec.action_high)

    if spec.name == "pendulum":
        g, m, l = spec.physics["g"], spec.physics["m"], spec.physics["l"]
        max_speed = spec.physics["max_speed"]
        cos_t, sin_t, thetadot = state
        theta = np.arctan2(sin_t, cos_t)
        u = action[0]
        reward = -(theta ** 2 + 0.1 * thetadot ** 2 + 0.001 * u ** 2)
        thetadot = thetadot + (3 * g / (2 * l) * np.sin(theta)
                               + 3.0 / (m * l ** 2) * u) * spec.dt
        thetadot = np.clip(thetadot, -max_speed, max_speed)
        theta = theta + thetadot * spec.dt
        nxt = np.array([np.cos(theta), np.sin(theta), thetadot])
        return nxt, float(reward), False

    k = spec.physics.get("k", 1)
    blocks, rewards = [], []
    for i in range(k):
        b, r = _pointmass_block(state[4 * i:4 * i + 4], action[2 * i:2 * i + 2], spec.dt)
        blocks.append(b)
        rewards.append(r)
    return np.concatenate(blocks), float(np.mean(rewards)), False
