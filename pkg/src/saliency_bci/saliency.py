"""Test-stage saliency: attention vector, segment ranking and trial pruning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attnet import ModelParams, attention_maps
from .errors import IndivisibleLength, InvalidSpec, LengthMismatch, NotRowStochastic
from .trialio import Trial, TrialSet

ROW_SUM_TOL = 1e-6


@dataclass(frozen=True)
class PruneConfig:
    """Split a trial into ``n`` equal segments and keep the best ``r``."""

    n: int
    r: int

    def __post_init__(self):
        if not 1 <= self.r <= self.n:
            raise InvalidSpec(f"PruneConfig needs 1 <= r <= n, got n={self.n}, r={self.r}")

    def segment_length(self, T: int) -> int:
        if T % self.n:
            raise IndivisibleLength(f"n={self.n} does not divide trial length T={T}")
        return T // self.n

    def kept_length(self, T: int) -> int:
        return self.r * self.segment_length(T)

    @property
    def ratio(self) -> float:
        return self.r / self.n


@dataclass(frozen=True)
class AttentionOutput:
    Lambda: np.ndarray
    A: np.ndarray


@dataclass(frozen=True)
class PruneResult:
    kept_segments: tuple[int, ...]
    kept_sample_ranges: tuple[tuple[int, int], ...]
    pruned_trial: Trial


def attention_vector(Lambda: np.ndarray) -> np.ndarray:
    """Column means of a row-stochastic attention matrix (or a stack of them)."""
    lam = np.asarray(Lambda, dtype=np.float64)
    if lam.ndim < 2 or lam.shape[-1] != lam.shape[-2]:
        raise NotRowStochastic(f"attention matrix must be square, got shape {lam.shape}")
    if np.any(lam < 0) or np.any(np.abs(lam.sum(axis=-1) - 1.0) > ROW_SUM_TOL):
        raise NotRowStochastic("attention rows must be nonnegative and sum to 1")
    return lam.mean(axis=-2)


def segment_means(A: np.ndarray, n: int) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.shape[-1] % n:
        raise IndivisibleLength(f"n={n} does not divide attention length {A.shape[-1]}")
    return A.reshape(*A.shape[:-1], n, -1).mean(axis=-1)


def rank_segments(A: np.ndarray, n: int) -> np.ndarray:
    """Segment indices by descending mean attention, ties to the lower index."""
    means = segment_means(A, n)
    # stable sort on the negated means keeps lower indices first among ties
    return np.argsort(-means, kind="stable")


def select_segments(A: np.ndarray, cfg: PruneConfig) -> list[int]:
    return sorted(int(i) for i in rank_segments(A, cfg.n)[: cfg.r])


def prune_trial(t: Trial, A: np.ndarray, cfg: PruneConfig) -> PruneResult:
    A = np.asarray(A, dtype=np.float64)
    T = t.n_samples
    if A.shape != (T,):
        raise LengthMismatch(f"attention vector length {A.shape} does not match trial {t.trial_id!r} width {T}")
    seg = cfg.segment_length(T)
    kept = select_segments(A, cfg)
    ranges = tuple((i * seg, (i + 1) * seg) for i in kept)
    data = np.concatenate([t.data[:, a:b] for a, b in ranges], axis=1)
    return PruneResult(tuple(kept), ranges, t.with_data(data))


def attention_output(params: ModelParams, t: Trial) -> AttentionOutput:
    lam = attention_maps(params, t.data)
    return AttentionOutput(lam, attention_vector(lam))


def extract_saliency(params: ModelParams, t: Trial, cfg: PruneConfig) -> PruneResult:
    """Embed, encode and attend (no decoder), then prune by attention."""
    cfg.segment_length(t.n_samples)
    return prune_trial(t, attention_output(params, t).A, cfg)


def attention_vectors(params: ModelParams, trials: TrialSet, batch_size: int = 16) -> np.ndarray:
    """Attention vector of every trial, shape (n_trials, T)."""
    data = trials.stack()
    out = []
    for start in range(0, len(data), batch_size):
        out.append(attention_vector(attention_maps(params, data[start:start + batch_size])))
    return np.concatenate(out, axis=0)


def prune_trialset(trials: TrialSet, vectors: np.ndarray, cfg: PruneConfig) -> TrialSet:
    return TrialSet(tuple(prune_trial(t, a, cfg).pruned_trial for t, a in zip(trials, vectors)))


def interval_iou(ranges, start: int, length: int) -> float:
    """Intersection-over-union between kept sample ranges and one interval."""
    kept = set()
    for a, b in ranges:
        kept.update(range(a, b))
    planted = set(range(start, start + length))
    union = kept | planted
    return len(kept & planted) / len(union) if union else 1.0
