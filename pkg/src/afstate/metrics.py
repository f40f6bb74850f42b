"""Evaluation: return normalisation, the per-step discrete
state-difference error, expert-IDM training for analysis rollouts, and
table aggregation.

The expert IDM exists purely so state policies trained without actions
can be rolled out and compared; it is never used by guided training.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import Dataset
from .discretiser import discretise
from .envs import EnvSpec, make_env, reset, step
from .online import IdmConfig, IdmNet, idm_loss_and_grad
from .pretrain import CODE_KINDS, PretrainedModel


@dataclass
class ReferenceScores:
    scores: dict  # env_name -> (random_score, expert_score)

    def get(self, env_name: str):
        if env_name not in self.scores:
            raise KeyError(f"no reference scores for '{env_name}'")
        rnd, exp = self.scores[env_name]
        if not exp > rnd:
            raise ValueError(f"degenerate references for '{env_name}': "
                             f"expert {exp} <= random {rnd}")
        return rnd, exp


def save_scores(ref: ReferenceScores, path) -> None:
    with open(path, "w") as f:
        for env, (rnd, exp) in sorted(ref.scores.items()):
            f.write(f"{env} {rnd!r} {exp!r}\n")


def load_scores(path) -> ReferenceScores:
    scores = {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            env, rnd, exp = line.split()
            scores[env] = (float(rnd), float(exp))
    return ReferenceScores(scores)


def normalised_return(raw_return: float, reference: ReferenceScores, env_name: str) -> float:
    """100 * (raw - random_ref) / (expert_ref - random_ref)."""
    rnd, exp = reference.get(env_name)
    return 100.0 * (raw_return - rnd) / (exp - rnd)


def diff_error(predicted_code: np.ndarray, observed_code: np.ndarray) -> float:
    """Per-step L1 distance between code vectors (sum over dimensions)."""
    p = np.asarray(predicted_code, dtype=np.int64)
    o = np.asarray(observed_code, dtype=np.int64)
    if p.shape != o.shape:
        raise ValueError("code shape mismatch")
    return float(np.abs(p - o).sum())


def random_code_expected_error(bins: int) -> float:
    """Exact E|a-b| per dimension for two independent uniform codes."""
    alphabet = (-1, 0, 1) if bins == 3 else (-1, 1)
    pairs = [(a, b) for a in alphabet for b in alphabet]
    return sum(abs(a - b) for a, b in pairs) / len(pairs)


# --- expert IDM --------------------------------------------------------------

@dataclass
class ExpertIdm:
    """Analysis-only translators: code input and continuous-difference input."""

    code_idm: IdmNet
    cont_idm: IdmNet
    holdout_l1: float          # per-action-dimension held-out error, code input
    holdout_l1_cont: float


def _idm_fit(idm: IdmNet, s, aux, a, steps, batch, rng):
    n = s.shape[0]
    for _ in range(steps):
        idx = rng.integers(n, size=min(batch, n))
        loss, grads = idm_loss_and_grad(idm, s[idx], aux[idx], a[idx])
        nn.adam_step(idm.net, grads, idm.opt)
    return idm


def train_expert_idm(dataset: Dataset, model_stats, disc, rng: np.random.Generator,
                     steps: int = 5000, config: IdmConfig | None = None) -> ExpertIdm:
    """L1 regression (s, code) -> a, plus a continuous twin (s, diff/sigma) -> a.

    Requires an action-labelled dataset (ideally mixed expert+medium
    quality); reports held-out per-dimension L1 errors on a 10% split.
    """
    if dataset.action_free:
        raise ValueError("expert IDM needs an action-labelled dataset")
    config = config or IdmConfig()
    spec = make_env(dataset.env_name)
    s = dataset.states.astype(np.float64)
    a = dataset.actions.astype(np.float64)
    codes = discretise(dataset.states, dataset.next_states, model_stats, disc).astype(np.float64)
    diffs = (dataset.next_states.astype(np.float64) - s) / model_stats.std

    n = s.shape[0]
    perm = rng.permutation(n)
    n_hold = max(1, n // 10)
    hold, tr = perm[:n_hold], perm[n_hold:]

    code_idm = IdmNet(spec, config, rng)
    cont_idm = IdmNet(spec, config, rng)
    _idm_fit(code_idm, s[tr], codes[tr], a[tr], steps, config.batch, rng)
    _idm_fit(cont_idm, s[tr], diffs[tr], a[tr], steps, config.batch, rng)

    err_code = float(np.mean(np.abs(code_idm.predict(s[hold], codes[hold]) - a[hold])))
    err_cont = float(np.mean(np.abs(cont_idm.predict(s[hold], diffs[hold]) - a[hold])))
    return ExpertIdm(code_idm, cont_idm, err_code, err_cont)


EXPERT_IDM_MAGIC = b"AFIM"


def save_expert_idm(idm: ExpertIdm, env_name: str, path) -> None:
    from .pretrain import _pack_mlp
    name = env_name.encode("utf-8")
    cfg = idm.code_idm.config
    with open(path, "wb") as f:
        f.write(EXPERT_IDM_MAGIC)
        f.write(struct.pack("<H", len(name)))
        f.write(name)
        f.write(struct.pack("<IIdddd", cfg.hidden_dim, cfg.hidden_layers, cfg.lr,
                            float(cfg.batch), idm.holdout_l1, idm.holdout_l1_cont))
        _pack_mlp(f, idm.code_idm.net)
        _pack_mlp(f, idm.cont_idm.net)


def load_expert_idm(path) -> tuple[ExpertIdm, str]:
    from .pretrain import _unpack_mlp
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != EXPERT_IDM_MAGIC:
        raise ValueError(f"bad expert-IDM magic {buf[:4]!r}")
    (name_len,) = struct.unpack_from("<H", buf, 4)
    off = 6
    env_name = buf[off:off + name_len].decode("utf-8")
    off += name_len
    hd, hl, lr, batch, err, err_c = struct.unpack_from("<IIdddd", buf, off)
    off += struct.calcsize("<IIdddd")
    config = IdmConfig(hidden_dim=hd, hidden_layers=hl, lr=lr, batch=int(batch))
    spec = make_env(env_name)
    dummy = np.random.default_rng(0)
    code_idm = IdmNet(spec, config, dummy)
    cont_idm = IdmNet(spec, config, dummy)
    code_idm.net, off = _unpack_mlp(buf, off)
    cont_idm.net, _ = _unpack_mlp(buf, off)
    code_idm.opt = nn.adam_init(code_idm.net, config.lr)
    cont_idm.opt = nn.adam_init(cont_idm.net, config.lr)
    return ExpertIdm(code_idm, cont_idm, err, err_c), env_name


# --- rollouts of state policies ------------------------------------------------

@dataclass
class EvalReport:
    env_name: str
    kind: str
    raw_returns: np.ndarray       # per episode
    diff_errors: np.ndarray       # per episode (mean per-step error)
    norm_mean: float | None = None
    norm_se: float | None = None

    @property
    def mean_return(self) -> float:
        return float(self.raw_returns.mean())

    @property
    def mean_diff_error(self) -> float:
        return float(self.diff_errors.mean())


def _policy_action(model: PretrainedModel, expert_idm: ExpertIdm, s: np.ndarray,
                   spec: EnvSpec):
    """Translate the model's native prediction into an executable action."""
    if model.kind in CODE_KINDS:
        code = model.predict_code(s)
        return expert_idm.code_idm.predict(s, code.astype(np.float64)), code
    if model.kind == "bc_a":
        a = np.clip(model.predict_continuous(s), spec.action_low, spec.action_high)
        return a, None
    pred = model.predict_continuous(s)
    diff = pred - s if model.kind == "bc_sprime" else pred
    norm_diff = diff / model.stats.std
    # the predicted code for the diff-error metric
    code = discretise(s, s + diff, model.stats, model.disc)
    return expert_idm.cont_idm.predict(s, norm_diff), code


def rollout_state_policy(model: PretrainedModel, expert_idm: ExpertIdm | None,
                         spec: EnvSpec, episodes: int,
                         rng: np.random.Generator) -> EvalReport:
    """Roll the state policy out through the expert IDM; collects returns
    and the per-step discrete-difference error averaged per episode."""
    returns = np.empty(episodes)
    errors = np.empty(episodes)
    for e in range(episodes):
        s = reset(spec, rng)
        total, err_sum, steps = 0.0, 0.0, 0
        for _ in range(spec.horizon):
            a, pred_code = _policy_action(model, expert_idm, s, spec)
            s2, r, term = step(spec, s, a, rng)
            if pred_code is None:  # bc_a: code prediction is implicit
                pred_code = discretise(s, s2, model.stats, model.disc)
            obs_code = discretise(s, s2, model.stats, model.disc)
            err_sum += diff_error(pred_code, obs_code)
            total += r
            steps += 1
            s = s2
            if term:
                break
        returns[e] = total
        errors[e] = err_sum / steps
    return EvalReport(spec.name, model.kind, returns, errors)


# --- aggregation ---------------------------------------------------------------

def mean_se(values) -> tuple[float, float]:
    """Mean and standard error over seeds; se is 0 (flagged) for one value."""
    v = np.asarray(values, dtype=np.float64)
    m = float(v.mean())
    if v.size < 2:
        return m, 0.0
    return m, float(v.std(ddof=1) / math.sqrt(v.size))


def aggregate(records: list[dict], group_keys: list[str], value_key: str) -> list[dict]:
    """Per-group mean and standard error over records (one record per seed)."""
    groups: dict[tuple, list[float]] = {}
    for rec in records:
        key = tuple(rec[k] for k in group_keys)
        groups.setdefault(key, []).append(float(rec[value_key]))
    rows = []
    for key in sorted(groups):
        m, se = mean_se(groups[key])
        rows.append({"group": "/".join(str(k) for k in key), "metric": value_key,
                     "mean": m, "se": se, "n_seeds": len(groups[key])})
    return rows


def write_report_csv(rows: list[dict], path) -> None:
    with open(path, "w") as f:
        f.write("group,metric,mean,se,n_seeds\n")
        for r in rows:
            f.write(f"{r['group']},{r['metric']},{r['mean']},{r['se']},{r['n_seeds']}\n")


def format_table(rows: list[dict]) -> str:
    """Aligned text rendering of an aggregate table."""
    headers = ["group", "metric", "mean", "se", "n_seeds"]
    out_rows = [[str(r["group"]), str(r["metric"]), f"{r['mean']:.3f}",
                 f"{r['se']:.3f}", str(r["n_seeds"])] for r in rows]
    widths = [max(len(h), *(len(row[i]) for row in out_rows)) if out_rows else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    for row in out_rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)
