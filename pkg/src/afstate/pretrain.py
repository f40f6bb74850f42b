"""Offline trainers for state policies.

* `oso_decqn_train`: conservative decomposed Q-learning over discretised
  state differences (regularisation weight alpha > 0).
* `decqn_n_train`: the identical pipeline with alpha = 0 (ablation).
* `bc_delta_train`: per-dimension cross-entropy imitation of the codes.
* `bc_regression_train`: MSE imitation of continuous targets (next state,
  state difference, or the logged action).

All trainers return a `PretrainedModel` bundling the network(s) with the
normalisation statistics and discretiser settings the codes were
produced under; the model file format keeps those together because the
codes are meaningless without them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import critic as cr
from . import nn
from .data import Dataset
from .discretiser import DiscretiserConfig, NormStats, discretise, fit_norm_stats

MODEL_MAGIC = b"OSOM"
MODEL_VERSION = 1
MODEL_KINDS = ("oso", "decqn_n", "bc_delta", "bc_sprime", "bc_diff", "bc_a")
CODE_KINDS = ("oso", "decqn_n", "bc_delta")


@dataclass
class OfflineConfig:
    steps: int = 200_000          # desk-scale default; paper-scale is 3M
    batch: int = 256
    lr: float = 1e-4
    gamma: float = 0.99
    alpha: float = 5.0
    n_step: int = 1
    epsilon: float = 1e-4
    bins: int = 3
    ensemble: int = 5
    hidden_dim: int = 256         # desk-scale default; paper-scale is 512
    hidden_layers: int = 3
    temperature: float = 1.0
    tau: float = 1e-3
    loss: str = "mse"             # "mse" or "huber"
    sigma_source: str = "state"
    log_every: int = 1000

    def discretiser(self) -> DiscretiserConfig:
        eps = 0.0 if self.bins == 2 else self.epsilon
        return DiscretiserConfig(epsilon=eps, bins=self.bins,
                                 sigma_source=self.sigma_source)

    def hidden(self) -> list[int]:
        return [self.hidden_dim] * self.hidden_layers


@dataclass
class PretrainedModel:
    kind: str
    env_name: str
    stats: NormStats
    disc: DiscretiserConfig
    config: OfflineConfig
    critic: cr.DecomposedCritic | None = None
    net: nn.Mlp | None = None
    loss_trace: list = field(default_factory=list)  # (step, loss, reg) rows

    @property
    def state_dim(self) -> int:
        return self.stats.dim

    def predict_code(self, s: np.ndarray) -> np.ndarray:
        if self.kind in ("oso", "decqn_n"):
            return cr.greedy_code(self.critic, s)
        if self.kind == "bc_delta":
            out = nn.forward(self.net, s)
            util = out.reshape(out.shape[:-1] + (self.state_dim, self.disc.bins))
            return cr.greedy_code_from_utilities(util, self.disc.bins)
        raise ValueError(f"model kind '{self.kind}' does not predict codes")

    def predict_continuous(self, s: np.ndarray) -> np.ndarray:
        """De-normalised continuous prediction of the model's native target."""
        out = nn.forward(self.net, s)
        if self.kind == "bc_sprime":
            return out * self.stats.std + self.stats.mean
        if self.kind == "bc_diff":
            return out * self.stats.std
        if self.kind == "bc_a":
            return out
        raise ValueError(f"model kind '{self.kind}' has no continuous prediction")


def _require_action_free(dataset: Dataset):
    if not dataset.action_free:
        raise ValueError("trainer expects an action-free dataset; "
                         "run strip_actions first")


def _codes_for(dataset: Dataset, stats: NormStats, disc: DiscretiserConfig) -> np.ndarray:
    return discretise(dataset.states, dataset.next_states, stats, disc)


def q_loss_and_grad(member: nn.Mlp, s: np.ndarray, codes: np.ndarray,
                    y: np.ndarray, alpha: float, bins: int,
                    loss_kind: str = "mse"):
    """Per-member loss (TD regression + alpha * regulariser) and gradients.

    Returns (td_loss, reg_value, (dws, dbs)).
    """
    batch = s.shape[0]
    out, cache = nn.forward_cached(member, s)
    m = codes.shape[-1]
    util = out.reshape(batch, m, bins)
    q = cr.q_value(util, codes, bins)
    diff = q - y
    if loss_kind == "mse":
        td_loss = float(np.mean(diff ** 2))
        dq = 2.0 * diff / batch
    elif loss_kind == "huber":
        absd = np.abs(diff)
        quad = np.minimum(absd, 1.0)
        td_loss = float(np.mean(0.5 * quad ** 2 + (absd - quad)))
        dq = np.clip(diff, -1.0, 1.0) / batch
    else:
        raise ValueError(f"unknown loss kind '{loss_kind}'")

    probs = cr.softmax_probs(util, 1.0)  # softmax of U/M per dimension
    lse = cr.logsumexp_term(util)
    reg = float(np.mean(lse - q))

    sel = (codes + 1) if bins == 3 else ((codes + 1) // 2)
    sel = sel.astype(np.int64)[..., None]
    d_util = np.zeros_like(util)
    # d(td)/dU: dq routed to the selected bins, split evenly over dimensions
    np.put_along_axis(d_util, sel, dq[:, None, None] / m, axis=-1)
    if alpha != 0.0:
        d_util += (alpha / (batch * m)) * probs
        sel_grad = np.take_along_axis(d_util, sel, axis=-1)
        np.put_along_axis(d_util, sel, sel_grad - alpha / (batch * m), axis=-1)
    grads = nn.backward(member, cache, d_util.reshape(batch, m * bins))
    return td_loss, reg, (grads[0], grads[1])


def regulariser_grad(member: nn.Mlp, s: np.ndarray, codes: np.ndarray, bins: int):
    """Value and parameter gradient of the conservative regulariser alone."""
    batch = s.shape[0]
    out, cache = nn.forward_cached(member, s)
    m = codes.shape[-1]
    util = out.reshape(batch, m, bins)
    probs = cr.softmax_probs(util, 1.0)
    reg = float(np.mean(cr.logsumexp_term(util) - cr.q_value(util, codes, bins)))
    sel = ((codes + 1) if bins == 3 else ((codes + 1) // 2)).astype(np.int64)[..., None]
    d_util = probs / (batch * m)
    sel_grad = np.take_along_axis(d_util, sel, axis=-1)
    np.put_along_axis(d_util, sel, sel_grad - 1.0 / (batch * m), axis=-1)
    grads = nn.backward(member, cache, d_util.reshape(batch, m * bins))
    return reg, (grads[0], grads[1])


def oso_decqn_train(dataset: Dataset, config: OfflineConfig,
                    rng: np.random.Generator) -> PretrainedModel:
    """Algorithm: sampled next-code bootstrapping + conservative penalty."""
    _require_action_free(dataset)
    disc = config.discretiser()
    stats = fit_norm_stats(dataset, disc)
    codes_all = _codes_for(dataset, stats, disc)
    m, bins = stats.dim, config.bins
    n = len(dataset)
    batch = min(config.batch, n)

    critic = cr.make_critic(m, bins, config.hidden(), config.ensemble, rng)
    opts = [nn.adam_init(mem, config.lr) for mem in critic.members]

    states = dataset.states.astype(np.float64)
    next_states = dataset.next_states.astype(np.float64)
    rewards = dataset.rewards.astype(np.float64)
    terminals = dataset.terminals.astype(np.float64)

    trace = []
    for t in range(config.steps):
        losses, regs = [], []
        for mem, opt in zip(critic.members, opts):
            idx = rng.integers(n, size=batch)
            y = cr.td_target(critic, next_states[idx], rewards[idx], terminals[idx],
                             config.gamma, rng, config.temperature)
            td_loss, reg, grads = q_loss_and_grad(
                mem, states[idx], codes_all[idx], y, config.alpha, bins, config.loss)
            if not np.isfinite(td_loss):
                raise RuntimeError(f"non-finite loss at gradient step {t}")
            nn.adam_step(mem, grads, opt)
            losses.append(td_loss)
            regs.append(reg)
        cr.soft_update(critic, config.tau)
        if t % config.log_every == 0 or t == config.steps - 1:
            trace.append((t, float(np.mean(losses)), float(np.mean(regs))))
    return PretrainedModel("oso" if config.alpha != 0.0 else "decqn_n",
                           dataset.env_name, stats, disc, config,
                           critic=critic, loss_trace=trace)


def decqn_n_train(dataset: Dataset, config: OfflineConfig,
                  rng: np.random.Generator) -> PretrainedModel:
    """Unregularised ablation: the same routine with alpha forced to 0."""
    return oso_decqn_train(dataset, replace(config, alpha=0.0), rng)


def bc_delta_train(dataset: Dataset, config: OfflineConfig,
                   rng: np.random.Generator) -> PretrainedModel:
    """Per-dimension cross-entropy classifier over the codes."""
    _require_action_free(dataset)
    disc = config.discretiser()
    stats = fit_norm_stats(dataset, disc)
    codes_all = _codes_for(dataset, stats, disc)
    m, bins = stats.dim, config.bins
    n = len(dataset)
    batch = min(config.batch, n)

    net = nn.mlp_init([m] + config.hidden() + [m * bins], rng)
    opt = nn.adam_init(net, config.lr)
    states = dataset.states.astype(np.float64)
    trace = []
    for t in range(config.steps):
        idx = rng.integers(n, size=batch)
        loss, grads = bc_delta_loss_and_grad(net, states[idx], codes_all[idx], bins)
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite loss at gradient step {t}")
        nn.adam_step(net, grads, opt)
        if t % config.log_every == 0 or t == config.steps - 1:
            trace.append((t, loss, 0.0))
    return PretrainedModel("bc_delta", dataset.env_name, stats, disc, config,
                           net=net, loss_trace=trace)


def bc_delta_loss_and_grad(net: nn.Mlp, s: np.ndarray, codes: np.ndarray, bins: int):
    batch = s.shape[0]
    out, cache = nn.forward_cached(net, s)
    m = codes.shape[-1]
    logits = out.reshape(batch, m, bins)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=-1, keepdims=True)
    sel = ((codes + 1) if bins == 3 else ((codes + 1) // 2)).astype(np.int64)[..., None]
    picked = np.take_along_axis(probs, sel, axis=-1)[..., 0]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300)).sum(axis=-1)))
    d_logits = probs / batch
    sel_grad = np.take_along_axis(d_logits, sel, axis=-1)
    np.put_along_axis(d_logits, sel, sel_grad - 1.0 / batch, axis=-1)
    grads = nn.backward(net, cache, d_logits.reshape(batch, m * bins))
    return loss, (grads[0], grads[1])


REGRESSION_KINDS = {"next_state": "bc_sprime", "diff": "bc_diff", "action": "bc_a"}


def bc_regression_train(dataset: Dataset, target_kind: str, config: OfflineConfig,
                        rng: np.random.Generator) -> PretrainedModel:
    """MSE regression to a continuous target.

    next_state / diff targets are regressed in normalised space; the
    action target requires an action-labelled dataset.
    """
    if target_kind not in REGRESSION_KINDS:
        raise ValueError(f"unknown target kind '{target_kind}'")
    disc = config.discretiser()
    stats = fit_norm_stats(dataset, disc)
    if target_kind == "action":
        if dataset.action_free:
            raise ValueError("action target requires an action-labelled dataset")
        targets = dataset.actions.astype(np.float64)
    elif target_kind == "next_state":
        targets = (dataset.next_states.astype(np.float64) - stats.mean) / stats.std
    else:
        targets = (dataset.next_states.astype(np.float64)
                   - dataset.states.astype(np.float64)) / stats.std
    m = stats.dim
    out_dim = targets.shape[1]
    n = len(dataset)
    batch = min(config.batch, n)
    net = nn.mlp_init([m] + config.hidden() + [out_dim], rng)
    opt = nn.adam_init(net, config.lr)
    states = dataset.states.astype(np.float64)
    trace = []
    for t in range(config.steps):
        idx = rng.integers(n, size=batch)
        loss, grads = mse_loss_and_grad(net, states[idx], targets[idx])
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite loss at gradient step {t}")
        nn.adam_step(net, grads, opt)
        if t % config.log_every == 0 or t == config.steps - 1:
            trace.append((t, loss, 0.0))
    return PretrainedModel(REGRESSION_KINDS[target_kind], dataset.env_name,
                           stats, disc, config, net=net, loss_trace=trace)


def mse_loss_and_grad(net: nn.Mlp, s: np.ndarray, targets: np.ndarray):
    batch = s.shape[0]
    out, cache = nn.forward_cached(net, s)
    diff = out - targets
    loss = float(np.mean(diff ** 2))
    d_out = 2.0 * diff / diff.size
    grads = nn.backward(net, cache, d_out)
    return loss, (grads[0], grads[1])


# --- model serialization ----------------------------------------------------


def _pack_mlp(f, net: nn.Mlp):
    sizes = [net.in_dim] + [w.shape[0] for w in net.weights]
    f.write(struct.pack("<I", len(sizes)))
    f.write(np.asarray(sizes, dtype="<u4").tobytes())
    for w, b in zip(net.weights, net.biases):
        f.write(w.astype("<f4").tobytes())
        f.write(b.astype("<f4").tobytes())


def _unpack_mlp(buf, off):
    (n_sizes,) = struct.unpack_from("<I", buf, off)
    off += 4
    sizes = np.frombuffer(buf, dtype="<u4", count=n_sizes, offset=off).astype(int)
    off += 4 * n_sizes
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(buf, dtype="<f4", count=fan_in * fan_out, offset=off)
        off += 4 * fan_in * fan_out
        weights.append(w.reshape(fan_out, fan_in).copy())
        b = np.frombuffer(buf, dtype="<f4", count=fan_out, offset=off)
        off += 4 * fan_out
        biases.append(b.copy())
    return nn.Mlp(weights, biases), off


def save_model(model: PretrainedModel, path) -> None:
    cfg_blob = json.dumps({
        "env_name": model.env_name,
        "config": asdict(model.config),
        "disc": {"epsilon": model.disc.epsilon, "bins": model.disc.bins,
                 "sigma_source": model.disc.sigma_source},
    }).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<IB", MODEL_VERSION, MODEL_KINDS.index(model.kind)))
        f.write(struct.pack("<I", len(cfg_blob)))
        f.write(cfg_blob)
        f.write(struct.pack("<I", model.stats.dim))
        f.write(model.stats.mean.astype("<f8").tobytes())
        f.write(model.stats.std.astype("<f8").tobytes())
        if model.critic is not None:
            f.write(struct.pack("<II", model.critic.ensemble_size, model.critic.bins))
            for net in model.critic.members + model.critic.targets:
                _pack_mlp(f, net)
        else:
            f.write(struct.pack("<II", 0, 0))
            _pack_mlp(f, model.net)
        f.write(struct.pack("<I", len(model.loss_trace)))
        for step, loss, reg in model.loss_trace:
            f.write(struct.pack("<Qff", int(step), float(loss), float(reg)))


def load_model(path) -> PretrainedModel:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != MODEL_MAGIC:
        raise ValueError(f"bad model magic {buf[:4]!r}")
    version, kind_tag = struct.unpack_from("<IB", buf, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    kind = MODEL_KINDS[kind_tag]
    off = 9
    (blob_len,) = struct.unpack_from("<I", buf, off)
    off += 4
    meta = json.loads(buf[off:off + blob_len].decode("utf-8"))
    off += blob_len
    (m,) = struct.unpack_from("<I", buf, off)
    off += 4
    mean = np.frombuffer(buf, dtype="<f8", count=m, offset=off).copy()
    off += 8 * m
    std = np.frombuffer(buf, dtype="<f8", count=m, offset=off).copy()
    off += 8 * m
    stats = NormStats(mean, std)
    ensemble, bins = struct.unpack_from("<II", buf, off)
    off += 8
    config = OfflineConfig(**meta["config"])
    disc = DiscretiserConfig(**meta["disc"])
    critic_obj, net = None, None
    if ensemble > 0:
        nets = []
        for _ in range(2 * ensemble):
            mlp, off = _unpack_mlp(buf, off)
            nets.append(mlp)
        critic_obj = cr.DecomposedCritic(nets[:ensemble], nets[ensemble:], m, bins)
        if critic_obj.members[0].in_dim != m:
            raise ValueError("critic input width does not match stored state dim")
    else:
        net, off = _unpack_mlp(buf, off)
        if net.in_dim != m:
            raise ValueError("network input width does not match stored state dim")
    (n_rows,) = struct.unpack_from("<I", buf, off)
    off += 4
    trace = []
    for _ in range(n_rows):
        step, loss, reg = struct.unpack_from("<Qff", buf, off)
        off += 16
        trace.append((step, loss, reg))
    return PretrainedModel(kind, meta["env_name"], stats, disc, config,
                           critic=critic_obj, net=net, loss_trace=trace)


def ensure_compatible(model: PretrainedModel, state_dim: int) -> None:
    if model.state_dim != state_dim:
        raise ValueError(f"model trained for state dim {model.state_dim}, "
                         f"environment has {state_dim}")


def write_loss_trace_csv(model: PretrainedModel, path) -> None:
    with open(path, "w") as f:
        f.write("step,loss,reg_term\n")
        for step, loss, reg in model.loss_trace:
            f.write(f"{step},{loss},{reg}\n")
