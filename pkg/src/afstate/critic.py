"""Decomposed critic over discretised state differences.

Each ensemble member is one MLP mapping a state to an M x B table of
per-dimension utilities; the value of a full code is the mean of the
selected utilities. Because the joint value is an average of independent
per-dimension terms, the softmax over all B^M codes factorises exactly:

    sum_codes exp((1/M) sum_j U_j(code_j)) = prod_j sum_b exp(U_j(b)/M)

which makes sampling, the log-partition term and the element-wise argmax
all linear in M instead of exponential.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .discretiser import bin_to_code, code_to_bin


@dataclass
class DecomposedCritic:
    members: list[nn.Mlp]
    targets: list[nn.Mlp]
    state_dim: int  # number of utility heads (one per coded dimension)
    bins: int

    @property
    def ensemble_size(self) -> int:
        return len(self.members)


def make_critic(state_dim: int, bins: int, hidden: list[int], ensemble: int,
                rng: np.random.Generator, n_heads: int | None = None) -> DecomposedCritic:
    """Ensemble of trunk+heads networks.

    By default the head count equals the input width (state-difference
    critics); pass `n_heads` to decompose over a different axis, e.g.
    action dimensions for the discrete-action online agent.
    """
    heads = state_dim if n_heads is None else n_heads
    sizes = [state_dim] + list(hidden) + [heads * bins]
    members = [nn.mlp_init(sizes, rng) for _ in range(ensemble)]
    targets = [m.copy() for m in members]
    return DecomposedCritic(members, targets, heads, bins)


def utilities(member: nn.Mlp, s: np.ndarray, state_dim: int, bins: int) -> np.ndarray:
    """Per-dimension utility table(s), shape (..., M, B)."""
    out = nn.forward(member, s)
    return out.reshape(out.shape[:-1] + (state_dim, bins))


def q_value(util: np.ndarray, codes: np.ndarray, bins: int) -> np.ndarray:
    """Mean over dimensions of the utilities selected by `codes`.

    util: (..., M, B); codes: (..., M) in the code alphabet.
    """
    sel = code_to_bin(codes, bins)
    picked = np.take_along_axis(util, sel[..., None], axis=-1)[..., 0]
    return picked.mean(axis=-1)


def mean_utilities(critic: DecomposedCritic, s: np.ndarray,
                   use_targets: bool = False) -> np.ndarray:
    nets = critic.targets if use_targets else critic.members
    acc = None
    for m in nets:
        u = utilities(m, s, critic.state_dim, critic.bins)
        acc = u if acc is None else acc + u
    return acc / len(nets)


def greedy_code(critic: DecomposedCritic, s: np.ndarray) -> np.ndarray:
    """Element-wise argmax of the ensemble-mean utilities.

    Ties involving the "no change" bin (code 0 in 3-bin mode, -1 in
    2-bin mode) resolve to it; ties among the rest go to the lowest bin.
    """
    util = mean_utilities(critic, s)
    return greedy_code_from_utilities(util, critic.bins)


def greedy_code_from_utilities(util: np.ndarray, bins: int) -> np.ndarray:
    pref = 1 if bins == 3 else 0
    best = util.max(axis=-1)
    idx = util.argmax(axis=-1)
    tie = util[..., pref] == best
    idx = np.where(tie, pref, idx)
    return bin_to_code(idx, bins)


def softmax_probs(util: np.ndarray, temperature: float) -> np.ndarray:
    """Per-dimension factorised softmax of U/(M*T); shape (..., M, B)."""
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    m = util.shape[-2]
    logits = util / (m * temperature)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def sample_code_softmax(member: nn.Mlp, s: np.ndarray, temperature: float,
                        rng: np.random.Generator, state_dim: int, bins: int) -> np.ndarray:
    """Draw one code per state from the factorised joint softmax."""
    util = utilities(member, s, state_dim, bins)
    probs = softmax_probs(util, temperature)
    cum = probs.cumsum(axis=-1)
    u = rng.uniform(size=util.shape[:-1] + (1,))
    idx = (u > cum).sum(axis=-1)
    idx = np.minimum(idx, bins - 1)
    return bin_to_code(idx, bins)


def logsumexp_term(util: np.ndarray) -> np.ndarray:
    """log sum over all B^M codes of exp(q), via the exact factorisation."""
    m = util.shape[-2]
    scaled = util / m
    mx = scaled.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(scaled - mx).sum(axis=-1)) + mx[..., 0]
    return lse.sum(axis=-1)


def regulariser(member: nn.Mlp, s: np.ndarray, codes: np.ndarray,
                state_dim: int, bins: int) -> float:
    """Batch mean of log-partition minus the value of the dataset code."""
    util = utilities(member, s, state_dim, bins)
    return float(np.mean(logsumexp_term(util) - q_value(util, codes, bins)))


def td_target(critic: DecomposedCritic, s_next: np.ndarray, r: np.ndarray,
              terminal: np.ndarray, gamma: float, rng: np.random.Generator,
              temperature: float = 1.0) -> np.ndarray:
    """Bootstrap targets y = r + gamma (1 - terminal) min_2-of-targets Q(s', code').

    The next code is sampled from the factorised softmax of one randomly
    chosen online member; the value is the minimum over two randomly
    chosen target members (double-Q variant).
    """
    online_idx = int(rng.integers(critic.ensemble_size))
    codes = sample_code_softmax(critic.members[online_idx], s_next, temperature,
                                rng, critic.state_dim, critic.bins)
    if critic.ensemble_size >= 2:
        t1, t2 = rng.choice(critic.ensemble_size, size=2, replace=False)
        u1 = utilities(critic.targets[int(t1)], s_next, critic.state_dim, critic.bins)
        u2 = utilities(critic.targets[int(t2)], s_next, critic.state_dim, critic.bins)
        val = np.minimum(q_value(u1, codes, critic.bins), q_value(u2, codes, critic.bins))
    else:
        u1 = utilities(critic.targets[0], s_next, critic.state_dim, critic.bins)
        val = q_value(u1, codes, critic.bins)
    return np.asarray(r, dtype=np.float64) + gamma * (1.0 - np.asarray(terminal, dtype=np.float64)) * val


def soft_update_mlp(target: nn.Mlp, online: nn.Mlp, tau: float) -> None:
    for tp, op in zip(target.weights, online.weights):
        tp += (tau * (op.astype(np.float64) - tp)).astype(tp.dtype)
    for tp, op in zip(target.biases, online.biases):
        tp += (tau * (op.astype(np.float64) - tp)).astype(tp.dtype)


def soft_update(critic: DecomposedCritic, tau: float = 1e-3) -> None:
    """targets <- tau * online + (1 - tau) * targets, element-wise."""
    for online, target in zip(critic.members, critic.targets):
        soft_update_mlp(target, online, tau)
