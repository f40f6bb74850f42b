"""Minimal MLP substrate with manual backprop and Adam.

All learned components in the toolkit (decomposed critics, behaviour
cloning nets, inverse dynamics models, TD3 actors/critics) are plain
fully-connected ReLU networks built on this module. There is no general
autodiff: forward passes keep an explicit layer cache and `backward`
walks it in reverse. Parameters are stored in float32; all arithmetic
is carried out in float64 and cast back on update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Mlp:
    """Layer weights/biases of a ReLU MLP (linear output layer).

    weights[i] has shape (fan_out, fan_in); biases[i] has shape (fan_out,).
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])


def mlp_init(sizes: list[int], rng: np.random.Generator, dtype=np.float32) -> Mlp:
    """Uniform fan-in init: entries ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
        biases.append(rng.uniform(-bound, bound, size=(fan_out,)).astype(dtype))
    return Mlp(weights, biases)


def _check_input(net: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.in_dim:
        raise ValueError(f"input width {x.shape[-1]} != network input width {net.in_dim}")
    return x


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Forward pass; hidden layers ReLU, output linear. Accepts batched input."""
    h = _check_input(net, x)
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T.astype(np.float64) + b.astype(np.float64)
        if i != last:
            h = np.maximum(h, 0.0)
    return h


def forward_cached(net: Mlp, x: np.ndarray):
    """Forward pass keeping post-activation inputs of every layer for backprop."""
    h = _check_input(net, x)
    cache = [h]
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T.astype(np.float64) + b.astype(np.float64)
        if i != last:
            h = np.maximum(h, 0.0)
            cache.append(h)
    return h, cache


def backward(net: Mlp, cache: list[np.ndarray], dy: np.ndarray):
    """Backprop an upstream gradient through the cached forward pass.

    Returns (weight grads, bias grads, input grad). Gradients are summed
    over all leading batch axes. ReLU subgradient at 0 is 0.
    """
    g = np.asarray(dy, dtype=np.float64)
    if g.shape[-1] != net.out_dim:
        raise ValueError(f"upstream grad width {g.shape[-1]} != output width {net.out_dim}")
    dws: list[np.ndarray] = [None] * net.n_layers
    dbs: list[np.ndarray] = [None] * net.n_layers
    for i in range(net.n_layers - 1, -1, -1):
        h_in = cache[i]
        flat_g = g.reshape(-1, g.shape[-1])
        flat_h = h_in.reshape(-1, h_in.shape[-1])
        dws[i] = flat_g.T @ flat_h
        dbs[i] = flat_g.sum(axis=0)
        g = g @ net.weights[i].astype(np.float64)
        if i > 0:
            g = g * (h_in > 0.0)
    return dws, dbs, g


def zero_grads(net: Mlp):
    dws = [np.zeros_like(w, dtype=np.float64) for w in net.weights]
    dbs = [np.zeros_like(b, dtype=np.float64) for b in net.biases]
    return dws, dbs


def accumulate(acc, grads, scale=1.0):
    """acc += scale * grads, for (dws, dbs) pairs."""
    for a, g in zip(acc[0], grads[0]):
        a += scale * g
    for a, g in zip(acc[1], grads[1]):
        a += scale * g
    return acc


@dataclass
class Adam:
    """Adam optimizer state for one Mlp."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m_w: list[np.ndarray] = field(default_factory=list)
    v_w: list[np.ndarray] = field(default_factory=list)
    m_b: list[np.ndarray] = field(default_factory=list)
    v_b: list[np.ndarray] = field(default_factory=list)


def adam_init(net: Mlp, lr: float) -> Adam:
    st = Adam(lr=lr)
    st.m_w = [np.zeros(w.shape, dtype=np.float64) for w in net.weights]
    st.v_w = [np.zeros(w.shape, dtype=np.float64) for w in net.weights]
    st.m_b = [np.zeros(b.shape, dtype=np.float64) for b in net.biases]
    st.v_b = [np.zeros(b.shape, dtype=np.float64) for b in net.biases]
    return st


def adam_step(net: Mlp, grads, state: Adam) -> None:
    """One bias-corrected Adam update, in place."""
    dws, dbs = grads
    for i, g in enumerate(dws):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite weight gradient in layer {i}")
    for i, g in enumerate(dbs):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite bias gradient in layer {i}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(net.weights, dws, state.m_w, state.v_w):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        np.subtract(p, upd.astype(p.dtype) if p.dtype != np.float64 else upd,
                    out=p, casting="unsafe")
    for p, g, m, v in zip(net.biases, dbs, state.m_b, state.v_b):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        upd = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        np.subtract(p, upd.astype(p.dtype) if p.dtype != np.float64 else upd,
                    out=p, casting="unsafe")


def flatten_params(net: Mlp) -> np.ndarray:
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def set_flat_params(net: Mlp, flat: np.ndarray) -> None:
    off = 0
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        net.weights[i] = flat[off:off + w.size].reshape(w.shape).astype(w.dtype)
        off += w.size
        net.biases[i] = flat[off:off + b.size].reshape(b.shape).astype(b.dtype)
        off += b.size
    if off != flat.size:
        raise ValueError("flat parameter vector size mismatch")


def grad_check(loss_and_grad, net: Mlp, probe_count: int,
               rng: np.random.Generator, h: float = 1e-5) -> float:
    """Max relative error between analytic and central finite-difference grads.

    loss_and_grad(net) must return (scalar loss, (dws, dbs)). Probes
    `probe_count` random coordinates. Non-finite values count as failure
    (returns inf).
    """
    _, grads = loss_and_grad(net)
    parts = []
    for dw, db in zip(grads[0], grads[1]):  # layer order matching flatten_params
        parts.append(dw.ravel())
        parts.append(db.ravel())
    flat_g = np.concatenate(parts)
    flat_p = flatten_params(net).astype(np.float64)
    n = flat_p.size
    worst = 0.0
    for _ in range(probe_count):
        idx = int(rng.integers(n))
        probe = net.copy()
        bumped = flat_p.copy()
        bumped[idx] += h
        set_flat_params(probe, bumped)
        lo_plus, _ = loss_and_grad(probe)
        bumped[idx] -= 2 * h
        set_flat_params(probe, bumped)
        lo_minus, _ = loss_and_grad(probe)
        fd = (lo_plus - lo_minus) / (2 * h)
        an = flat_g[idx]
        if not (np.isfinite(fd) and np.isfinite(an)):
            return np.inf
        err = abs(an - fd) / (abs(an) + abs(fd) + 1e-12)
        worst = max(worst, err)
    return worst
