"""Matplotlib figures rendered next to the delimited outputs."""

from __future__ import annotations

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def save_learning_curve(rows, path, title="online return"):
    """rows: sequence of (env_step, mean_return, std_return, beta, idm_loss)."""
    rows = list(rows)
    steps = np.array([r[0] for r in rows], dtype=float)
    mean = np.array([r[1] for r in rows], dtype=float)
    std = np.array([r[2] for r in rows], dtype=float)
    beta = np.array([r[3] for r in rows], dtype=float)
    fig, (ax, ax2) = plt.subplots(2, 1, figsize=(6, 6), sharex=True,
                                  gridspec_kw={"height_ratios": [3, 1]})
    ax.plot(steps, mean, color="tab:blue")
    ax.fill_between(steps, mean - std, mean + std, alpha=0.25, color="tab:blue")
    ax.set_ylabel("return")
    ax.set_title(title)
    ax2.plot(steps, beta, color="tab:orange")
    ax2.set_ylabel("beta")
    ax2.set_xlabel("environment step")
    ax2.set_ylim(-0.02, 0.55)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_loss_trace(trace, path, title="offline loss"):
    """trace: sequence of (step, loss, reg_term)."""
    trace = list(trace)
    steps = [t[0] for t in trace]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [t[1] for t in trace], label="td loss")
    ax.plot(steps, [t[2] for t in trace], label="regulariser")
    ax.set_xlabel("gradient step")
    ax.set_yscale("symlog", linthresh=1e-3)
    ax.legend()
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_eval_bars(rows, path, metric_label):
    """rows: aggregate dicts with group/mean/se (one metric)."""
    rows = list(rows)
    labels = [r["group"] for r in rows]
    means = [r["mean"] for r in rows]
    ses = [r["se"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows)), 4))
    ax.bar(range(len(rows)), means, yerr=ses, capsize=4, color="tab:green")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(metric_label)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_bound_sweep(report, path):
    """Log-log sqrt(eps_KL) against k with the theoretical envelope."""
    ks = np.array([r["k"] for r in report.rows], dtype=float)
    eps = np.array([r["eps_kl"] for r in report.rows], dtype=float)
    env = np.array([r["eps_kl_theorem_bound"] for r in report.rows], dtype=float)
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax.loglog(ks, np.sqrt(eps), "o-", label="sqrt(eps_KL)")
    ax.loglog(ks, np.sqrt(env), "--", label="envelope")
    ax.set_xlabel("bins per coordinate k")
    ax.legend()
    ax.set_title(f"slope = {report.slope:.3f}")
    gaps = [r["gap"] for r in report.rows]
    bounds = [r["lemma2_bound"] for r in report.rows]
    ax2.semilogy(ks, gaps, "o-", label="value gap")
    ax2.semilogy(ks, bounds, "--", label="bound")
    ax2.set_xlabel("bins per coordinate k")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
