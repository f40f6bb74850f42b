"""Command-line entry points.

Every command reads defaults, then an optional flat key=value config
file (--config), then explicit flags, in increasing precedence; the
fully resolved settings are written to <out>/resolved_config so any run
can be reproduced byte-for-byte. Summary lines on stdout are key=value
pairs.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

import numpy as np

from . import bound as bd
from . import data as dt
from . import metrics as mt
from . import online as on
from . import plots
from . import pretrain as pt
from .envs import make_env
from .rng import substream


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- config plumbing ---------------------------------------------------------

def _read_config_file(path: str) -> dict:
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, val = line.split("=", 1)
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def _coerce(raw: str, like):
    if isinstance(like, bool):
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise UsageError(f"expected a boolean, got '{raw}'")
    if isinstance(like, int) and not isinstance(like, bool):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def _apply_config_file(sub: argparse.ArgumentParser, path: str):
    values = _read_config_file(path)
    known = {a.dest: a for a in sub._actions}
    for key, raw in values.items():
        if key not in known or key in ("help", "config"):
            raise UsageError(f"unknown config key '{key}'")
        default = known[key].default
        if key == "seeds":
            sub.set_defaults(**{key: raw})
        elif isinstance(default, (bool, int, float)) or default is None:
            sub.set_defaults(**{key: _coerce(raw, default if default is not None else raw)})
        else:
            sub.set_defaults(**{key: raw})


def _write_resolved_config(ns: argparse.Namespace, out_dir: str):
    skip = {"func", "config", "force"}
    lines = []
    for key in sorted(vars(ns)):
        if key in skip:
            continue
        lines.append(f"{key}={getattr(ns, key)}")
    with open(os.path.join(out_dir, "resolved_config"), "w") as f:
        f.write("\n".join(lines) + "\n")


def _prepare_out(ns, *filenames):
    os.makedirs(ns.out, exist_ok=True)
    if not getattr(ns, "force", False):
        for name in filenames:
            path = os.path.join(ns.out, name)
            if os.path.exists(path):
                raise UsageError(f"refusing to overwrite {path} (use --force)")
    _write_resolved_config(ns, ns.out)


def _emit(**kv):
    print(" ".join(f"{k}={v}" for k, v in kv.items()))


def _parse_seeds(raw: str) -> list[int]:
    raw = str(raw)
    if ".." in raw:
        lo, hi = raw.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in raw.split(",") if x.strip()]


# --- gen-data ----------------------------------------------------------------

def cmd_gen_data(ns):
    spec = make_env(ns.env)
    expert = None
    if ns.quality != "random":
        if not ns.expert_policy or not os.path.exists(ns.expert_policy):
            raise UsageError(
                f"quality '{ns.quality}' needs a trained expert policy; run "
                f"'afstate train-expert --env {ns.env}' and pass --expert-policy")
        expert = on.load_policy(ns.expert_policy)
        if expert.env_name != ns.env:
            raise UsageError(f"expert policy is for '{expert.env_name}', not '{ns.env}'")
    fname = f"{ns.env}_{ns.quality}_{ns.seed}.afrl"
    _prepare_out(ns, fname)
    policy = dt.make_behaviour_policy(spec, ns.quality, expert)
    dataset = dt.generate_dataset(spec, policy, ns.n, substream(ns.seed, "gen-data"),
                                  quality=ns.quality)
    if ns.action_free:
        dataset = dt.strip_actions(dataset)
    path = os.path.join(ns.out, fname)
    dt.save_dataset(dataset, path)
    rets = dataset.episode_returns()
    _emit(dataset=path, transitions=len(dataset), episodes=len(rets),
          mean_return=f"{float(np.mean(rets)):.4f}", action_free=int(dataset.action_free))
    return 0


# --- train-expert ------------------------------------------------------------

def cmd_train_expert(ns):
    spec = make_env(ns.env)
    pol_name = f"{ns.env}_expert.afpl"
    _prepare_out(ns, pol_name, f"{ns.env}_expert_curve.csv", f"{ns.env}_scores.txt")
    policy, curve = on.train_expert(spec, ns.steps, ns.seed)
    pol_path = os.path.join(ns.out, pol_name)
    on.save_policy(policy, pol_path)

    curve_path = os.path.join(ns.out, f"{ns.env}_expert_curve.csv")
    _write_curve_csv(curve, curve_path)
    plots.save_learning_curve(curve, os.path.join(ns.out, f"{ns.env}_expert_curve.png"),
                              title=f"{ns.env} expert training")

    eval_rng = substream(ns.seed, "reference")
    expert_ret = float(dt.evaluate_policy(spec, policy, ns.eval_episodes, eval_rng).mean())
    random_ret = float(dt.evaluate_policy(spec, dt.RandomPolicy(spec),
                                          ns.eval_episodes, eval_rng).mean())
    scores_path = os.path.join(ns.out, f"{ns.env}_scores.txt")
    mt.save_scores(mt.ReferenceScores({ns.env: (random_ret, expert_ret)}), scores_path)
    _emit(policy=pol_path, scores=scores_path,
          expert_return=f"{expert_ret:.4f}", random_return=f"{random_ret:.4f}")
    return 0


def _write_curve_csv(curve, path):
    with open(path, "w") as f:
        f.write("env_step,mean_return,std_return,beta,idm_loss\n")
        for step, mean, std, b, idm_loss in curve:
            f.write(f"{step},{mean},{std},{b},{idm_loss}\n")


# --- pretrain ----------------------------------------------------------------

_TRAINERS = {
    "oso": lambda ds, cfg, rng: pt.oso_decqn_train(ds, cfg, rng),
    "decqn_n": lambda ds, cfg, rng: pt.decqn_n_train(ds, cfg, rng),
    "bc_delta": lambda ds, cfg, rng: pt.bc_delta_train(ds, cfg, rng),
    "bc_sprime": lambda ds, cfg, rng: pt.bc_regression_train(ds, "next_state", cfg, rng),
    "bc_diff": lambda ds, cfg, rng: pt.bc_regression_train(ds, "diff", cfg, rng),
    "bc_a": lambda ds, cfg, rng: pt.bc_regression_train(ds, "action", cfg, rng),
}


def cmd_pretrain(ns):
    model_name = f"model_{ns.algo}.osom"
    _prepare_out(ns, model_name, f"loss_{ns.algo}.csv")
    dataset = dt.load_dataset(ns.data)
    config = pt.OfflineConfig(
        steps=ns.steps, batch=ns.batch, lr=ns.lr, gamma=ns.gamma, alpha=ns.alpha,
        n_step=ns.n_step, epsilon=ns.epsilon, bins=ns.bins, ensemble=ns.ensemble,
        hidden_dim=ns.hidden_dim, hidden_layers=ns.hidden_layers,
        temperature=ns.temperature, tau=ns.tau, loss=ns.loss,
        sigma_source=ns.sigma_source)
    model = _TRAINERS[ns.algo](dataset, config, substream(ns.seed, f"pretrain-{ns.algo}"))
    model_path = os.path.join(ns.out, model_name)
    pt.save_model(model, model_path)
    csv_path = os.path.join(ns.out, f"loss_{ns.algo}.csv")
    pt.write_loss_trace_csv(model, csv_path)
    plots.save_loss_trace(model.loss_trace, os.path.join(ns.out, f"loss_{ns.algo}.png"),
                          title=f"{ns.algo} on {dataset.env_name}/{dataset.quality}")
    final = model.loss_trace[-1][1] if model.loss_trace else float("nan")
    _emit(model=model_path, algo=ns.algo, env=dataset.env_name,
          steps=config.steps, final_loss=f"{final:.6f}")
    return 0


# --- guide -------------------------------------------------------------------

def _guide_config(ns, seed: int) -> on.GuidedConfig:
    cfg = on.GuidedConfig(agent_kind=ns.agent, total_steps=ns.steps,
                          guide=not ns.no_guide, beta_max=ns.beta_max,
                          beta_interval=ns.beta_interval, beta_fixed=ns.beta_fixed,
                          eval_every=ns.eval_every, eval_episodes=ns.eval_episodes,
                          seed=seed,
                          td3=on.Td3Config(actor_lr=ns.agent_lr,
                                           critic_lr=ns.agent_lr,
                                           explore_noise=ns.explore_noise),
                          decqn=on.DecqnOnlineConfig(lr=ns.agent_lr))
    return cfg


def _guide_one(ns, seed: int, out_dir: str) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    model = pt.load_model(ns.model) if ns.model else None
    if model is None and not ns.no_guide:
        raise UsageError("guided run needs --model (or pass --no-guide)")
    offline = dt.load_dataset(ns.data) if ns.data else None
    spec = make_env(ns.env)
    result = on.guided_train(spec, model if not ns.no_guide else None,
                             _guide_config(ns, seed), offline_dataset=offline)
    curve_path = os.path.join(out_dir, "curve.csv")
    _write_curve_csv(result.curve, curve_path)
    plots.save_learning_curve(result.curve, os.path.join(out_dir, "curve.png"),
                              title=f"{ns.env} seed {seed}"
                                    + (" (unguided)" if ns.no_guide else ""))
    with open(os.path.join(out_dir, "idm_trace.csv"), "w") as f:
        f.write("env_step,idm_loss\n")
        for step, loss in result.idm_loss_trace:
            f.write(f"{step},{loss}\n")
    if ns.agent == "td3":
        actor = on.DeterministicActorPolicy(ns.env, result.agent.actor.copy())
        on.save_policy(actor, os.path.join(out_dir, "agent.afpl"))
    final = result.curve[-1][1] if result.curve else float("nan")
    return {"seed": seed, "curve": curve_path, "final_return": final}


def cmd_guide(ns):
    seeds = _parse_seeds(ns.seeds) if ns.seeds else [ns.seed]
    os.makedirs(ns.out, exist_ok=True)
    _write_resolved_config(ns, ns.out)
    if len(seeds) == 1:
        out_dir = ns.out
        if not ns.force and os.path.exists(os.path.join(out_dir, "curve.csv")):
            raise UsageError(f"curve.csv exists in {out_dir} (use --force)")
        res = _guide_one(ns, seeds[0], out_dir)
        _emit(**res)
        return 0
    with ProcessPoolExecutor(max_workers=min(len(seeds), os.cpu_count() or 1)) as ex:
        futures = [ex.submit(_guide_one, ns, s, os.path.join(ns.out, f"seed{s}"))
                   for s in seeds]
        for fut in futures:
            _emit(**fut.result())
    return 0


# --- eval --------------------------------------------------------------------

def cmd_eval(ns):
    _prepare_out(ns)
    models = [pt.load_model(p) for p in ns.model]
    env_names = {m.env_name for m in models}
    if len(env_names) != 1:
        raise UsageError(f"models span multiple environments: {sorted(env_names)}")
    env_name = env_names.pop()
    spec = make_env(env_name)

    expert_idm = None
    if any(m.kind != "bc_a" for m in models):
        if ns.expert_idm and os.path.exists(ns.expert_idm):
            expert_idm, idm_env = mt.load_expert_idm(ns.expert_idm)
            if idm_env != env_name:
                raise UsageError(f"expert IDM is for '{idm_env}', not '{env_name}'")
        elif ns.labelled_data:
            labelled = dt.concat_datasets([dt.load_dataset(p)
                                           for p in ns.labelled_data])
            ref = models[0]
            expert_idm = mt.train_expert_idm(labelled, ref.stats, ref.disc,
                                             substream(ns.seed, "expert-idm"),
                                             steps=ns.idm_steps)
            if ns.expert_idm:
                mt.save_expert_idm(expert_idm, env_name, ns.expert_idm)
        else:
            raise UsageError("state-policy rollouts need --expert-idm FILE or "
                             "--labelled-data to train one")

    scores = mt.load_scores(ns.scores) if ns.scores else None
    seeds = _parse_seeds(ns.seeds) if ns.seeds else [ns.seed]
    records = []
    for model in models:
        for seed in seeds:
            report = mt.rollout_state_policy(model, expert_idm, spec, ns.episodes,
                                             substream(seed, f"eval-{model.kind}"))
            rec = {"kind": model.kind, "seed": seed,
                   "return": report.mean_return,
                   "diff_error": report.mean_diff_error}
            if scores is not None:
                rec["norm_return"] = mt.normalised_return(report.mean_return,
                                                          scores, env_name)
            records.append(rec)

    metrics = []
    if ns.metric in ("return", "both"):
        metrics.append("norm_return" if scores is not None else "return")
    if ns.metric in ("diff_error", "both"):
        metrics.append("diff_error")
    for metric in metrics:
        rows = mt.aggregate(records, ["kind"], metric)
        csv_path = os.path.join(ns.out, f"report_{metric}.csv")
        mt.write_report_csv(rows, csv_path)
        plots.save_eval_bars(rows, os.path.join(ns.out, f"report_{metric}.png"), metric)
        print(mt.format_table(rows))
        _emit(report=csv_path, metric=metric)
    if expert_idm is not None:
        _emit(expert_idm_holdout_l1=f"{expert_idm.holdout_l1:.6f}",
              expert_idm_holdout_l1_cont=f"{expert_idm.holdout_l1_cont:.6f}")
    return 0


# --- theory-check ------------------------------------------------------------

def cmd_theory_check(ns):
    _prepare_out(ns, "bound.csv")
    k_list = sorted(int(k) for k in str(ns.k_list).split(","))
    mdp = bd.build_increment_mdp(ns.M, ns.grid_size, ns.actions_per_dim,
                                 ns.gamma, ns.sigma, substream(ns.seed, "theory"))
    report = bd.check_bound(mdp, k_list)
    csv_path = os.path.join(ns.out, "bound.csv")
    bd.write_bound_csv(report, csv_path)
    plots.save_bound_sweep(report, os.path.join(ns.out, "bound.png"))
    _emit(report=csv_path, slope=f"{report.slope:.4f}",
          all_gaps_bounded=int(report.all_gaps_bounded),
          all_eps_bounded=int(report.all_eps_bounded))
    return 0 if (report.all_gaps_bounded and report.all_eps_bounded) else 2


# --- parser ------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="afstate",
                     description="action-free state-policy pretraining, guided "
                                 "online learning, and discretisation-bound checks")
    subs = parser.add_subparsers(dest="command", required=True)

    def common(sub):
        sub.add_argument("--out", default=".", help="output directory")
        sub.add_argument("--seed", type=int, default=0)
        sub.add_argument("--config", default=None,
                         help="flat key=value file; flags override it")
        sub.add_argument("--force", action="store_true",
                         help="overwrite existing outputs")

    g = subs.add_parser("gen-data", help="roll out a behaviour policy to a dataset file")
    common(g)
    g.add_argument("--env", required=True)
    g.add_argument("--quality", choices=list(dt.QUALITIES), default="medium")
    g.add_argument("--n", type=int, default=100_000, help="transitions to collect")
    g.add_argument("--action-free", action="store_true", help="strip action labels")
    g.add_argument("--expert-policy", default=None, help="path to a trained .afpl")
    g.set_defaults(func=cmd_gen_data)

    t = subs.add_parser("train-expert", help="train and checkpoint an expert policy")
    common(t)
    t.add_argument("--env", required=True)
    t.add_argument("--steps", type=int, default=30_000)
    t.add_argument("--eval-episodes", type=int, default=20)
    t.set_defaults(func=cmd_train_expert)

    p = subs.add_parser("pretrain", help="train a state policy offline")
    common(p)
    p.add_argument("--data", required=True, help="dataset file (.afrl)")
    p.add_argument("--algo", choices=list(pt.MODEL_KINDS), default="oso")
    p.add_argument("--steps", type=int, default=20_000)
    p.add_argument("--batch", type=int, default=256)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--alpha", type=float, default=5.0)
    p.add_argument("--n-step", type=int, default=1)
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--bins", type=int, choices=(2, 3), default=3)
    p.add_argument("--ensemble", type=int, default=5)
    p.add_argument("--hidden-dim", type=int, default=256)
    p.add_argument("--hidden-layers", type=int, default=3)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--tau", type=float, default=1e-3)
    p.add_argument("--loss", choices=("mse", "huber"), default="mse")
    p.add_argument("--sigma-source", choices=("state", "diff"), default="state")
    p.set_defaults(func=cmd_pretrain)

    u = subs.add_parser("guide", help="online learning with beta-scheduled guidance")
    common(u)
    u.add_argument("--env", required=True)
    u.add_argument("--model", default=None, help="pretrained state policy (.osom)")
    u.add_argument("--data", default=None, help="offline dataset for the IDM term")
    u.add_argument("--agent", choices=("td3", "decqn"), default="td3")
    u.add_argument("--agent-lr", type=float, default=5e-4,
                   help="online agent learning rate (actor and critic)")
    u.add_argument("--explore-noise", type=float, default=0.1,
                   help="exploration noise std, as a fraction of action range")
    u.add_argument("--steps", type=int, default=100_000)
    u.add_argument("--no-guide", action="store_true", help="plain online baseline")
    u.add_argument("--beta-max", type=float, default=0.5)
    u.add_argument("--beta-interval", type=int, default=None)
    u.add_argument("--beta-fixed", type=float, default=None)
    u.add_argument("--eval-every", type=int, default=None)
    u.add_argument("--eval-episodes", type=int, default=10)
    u.add_argument("--seeds", default=None,
                   help="e.g. '1..5' or '1,2,3'; parallel workers, one dir per seed")
    u.set_defaults(func=cmd_guide)

    e = subs.add_parser("eval", help="roll out state policies and tabulate metrics")
    common(e)
    e.add_argument("--model", nargs="+", required=True, help="model file(s)")
    e.add_argument("--metric", choices=("return", "diff_error", "both"), default="both")
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--seeds", default=None, help="e.g. '1..5'")
    e.add_argument("--expert-idm", default=None,
                   help="expert IDM file; trained and saved here if missing")
    e.add_argument("--labelled-data", default=None, nargs="+",
                   help="action-labelled dataset(s) to train the expert IDM; "
                        "multiple files are concatenated")
    e.add_argument("--idm-steps", type=int, default=5000)
    e.add_argument("--scores", default=None, help="reference scores file")
    e.set_defaults(func=cmd_eval)

    b = subs.add_parser("theory-check", help="numerical value-gap bound sweep")
    common(b)
    b.add_argument("--M", type=int, default=1, help="increment dimensions")
    b.add_argument("--k-list", default="2,4,8,16")
    b.add_argument("--gamma", type=float, default=0.9)
    b.add_argument("--sigma", type=float, default=0.1)
    b.add_argument("--grid-size", type=int, default=21)
    b.add_argument("--actions-per-dim", type=int, default=9)
    b.set_defaults(func=cmd_theory_check)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv and "--config" in argv:
            cfg_path = argv[argv.index("--config") + 1]
            sub = parser._subparsers._group_actions[0].choices.get(argv[0])
            if sub is None:
                raise UsageError(f"unknown command '{argv[0]}'")
            _apply_config_file(sub, cfg_path)
        ns = parser.parse_args(argv)
        return ns.func(ns)
    except UsageError as exc:
        print(f"error={exc!r}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime/assertion failure
        traceback.print_exc()
        print(f"error={exc!r}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
