"""State-difference discretisation.

A state transition (s, s') is reduced to a per-dimension code in
{-1, 0, +1} (3-bin) or {-1, +1} (2-bin): after dividing the difference
by the per-dimension standard deviation of dataset states, entries
within +/- epsilon of zero map to 0 and the rest to their sign. The
division makes the code invariant to per-dimension rescaling of the
state space; the means cancel in the difference so only sigma matters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset

SIGMA_FLOOR = 1e-6


@dataclass
class NormStats:
    mean: np.ndarray  # (M,)
    std: np.ndarray   # (M,), floored at SIGMA_FLOOR

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class DiscretiserConfig:
    epsilon: float = 1e-4
    bins: int = 3
    sigma_source: str = "state"  # "state" or "diff" (experimental switch)

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.bins not in (2, 3):
            raise ValueError("bins must be 2 or 3")
        if self.sigma_source not in ("state", "diff"):
            raise ValueError("sigma_source must be 'state' or 'diff'")


def fit_norm_stats(dataset: Dataset, config: DiscretiserConfig = DiscretiserConfig()) -> NormStats:
    """Per-dimension mean/std over every state occurring in the dataset.

    States are the s of each transition plus the final next-state of each
    episode (so each visited state counts once). Population convention;
    std floored at SIGMA_FLOOR.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if config.sigma_source == "diff":
        samples = dataset.next_states.astype(np.float64) - dataset.states.astype(np.float64)
    else:
        ends = np.concatenate([(dataset.episode_starts[1:].astype(np.int64) - 1),
                               [len(dataset) - 1]])
        samples = np.concatenate([dataset.states.astype(np.float64),
                                  dataset.next_states[ends].astype(np.float64)])
    mean = samples.mean(axis=0)
    std = np.maximum(samples.std(axis=0), SIGMA_FLOOR)
    return NormStats(mean, std)


def discretise(s: np.ndarray, s_next: np.ndarray, stats: NormStats,
               config: DiscretiserConfig) -> np.ndarray:
    """Code the normalised difference (s'-s)/sigma per dimension.

    Accepts single vectors or batches (leading axes broadcast). 3-bin:
    -1 / 0 / +1 by the epsilon rule; 2-bin: sign with 0 mapped to +1.
    Returns int8 codes.
    """
    s = np.asarray(s, dtype=np.float64)
    s_next = np.asarray(s_next, dtype=np.float64)
    if s.shape[-1] != stats.dim or s_next.shape[-1] != stats.dim:
        raise ValueError("state width does not match NormStats dimension")
    z = (s_next - s) / stats.std
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite input to discretise")
    if config.bins == 2:
        return np.where(z >= 0.0, 1, -1).astype(np.int8)
    code = np.zeros(z.shape, dtype=np.int8)
    code[z > config.epsilon] = 1
    code[z < -config.epsilon] = -1
    return code


def code_to_bin(code: np.ndarray, bins: int) -> np.ndarray:
    """Map code values to bin indices: {-1:0, 0:1, +1:2} (3-bin), {-1:0, +1:1}."""
    code = np.asarray(code)
    if bins == 3:
        if not np.all(np.isin(code, (-1, 0, 1))):
            raise ValueError("invalid 3-bin code entry")
        return (code + 1).astype(np.int64)
    if not np.all(np.isin(code, (-1, 1))):
        raise ValueError("invalid 2-bin code entry")
    return ((code + 1) // 2).astype(np.int64)


def bin_to_code(bin_idx: np.ndarray, bins: int) -> np.ndarray:
    bin_idx = np.asarray(bin_idx)
    if bins == 3:
        return (bin_idx - 1).astype(np.int8)
    return (2 * bin_idx - 1).astype(np.int8)


def code_to_index(code: np.ndarray, bins: int) -> int:
    """Base-B positional index; digit order = dimension order."""
    digits = code_to_bin(code, bins)
    idx = 0
    for d in digits:
        idx = idx * bins + int(d)
    return idx


def index_to_code(index: int, dim: int, bins: int) -> np.ndarray:
    if not 0 <= index < bins ** dim:
        raise ValueError("index out of range")
    digits = np.zeros(dim, dtype=np.int64)
    for i in range(dim - 1, -1, -1):
        digits[i] = index % bins
        index //= bins
    return bin_to_code(digits, bins)
