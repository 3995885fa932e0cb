"""Frequency-distribution baseline.

Each visit becomes a relative-frequency vector over action ids.  For every
rolling window the 1-D Wasserstein distance (CDF over action-id order) from
each context visit to the target visit is computed; all windows are pooled
and the trend of similarity (negated distance) over visit position is tested
like the attention deviations: a decreasing trend means the early visits
resemble the target most (anchoring), an increasing one means recency.
"""

from __future__ import annotations

import numpy as np

from .domain import DEFAULT_VOCAB_SIZE, UserLog, Visit
from .errors import InsufficientVisits, ShapeError
from .stats import DEFAULT_ALPHA, BiasReport, classify, fit_line


def action_frequency(visit: Visit, vocab_size: int = DEFAULT_VOCAB_SIZE) -> np.ndarray:
    """Relative frequency of each action id in the visit; padding is ignored."""
    counts = np.bincount(np.asarray(visit.real_actions, dtype=np.int64), minlength=vocab_size)
    if counts.size != vocab_size:
        raise ShapeError(f"action ids exceed vocabulary size {vocab_size}")
    return counts / counts.sum()


def wasserstein(nu_i: np.ndarray, nu_j: np.ndarray) -> float:
    """Sum of absolute CDF differences over unit-spaced support."""
    nu_i = np.asarray(nu_i, dtype=np.float64)
    nu_j = np.asarray(nu_j, dtype=np.float64)
    if nu_i.shape != nu_j.shape or nu_i.ndim != 1:
        raise ShapeError(f"wasserstein: shapes {nu_i.shape} and {nu_j.shape} differ")
    return float(np.abs(np.cumsum(nu_i) - np.cumsum(nu_j)).sum())


def window_distances(log: UserLog, m: int, vocab_size: int = DEFAULT_VOCAB_SIZE) -> np.ndarray:
    """``(N - m, m)`` distances from context visit i to the window's target visit."""
    if len(log.visits) < m + 1:
        raise InsufficientVisits(len(log.visits), m + 1, stage="baseline", user_id=log.user_id)
    freqs = np.stack([action_frequency(v, vocab_size) for v in log.visits])
    cdf = np.cumsum(freqs, axis=1)
    W = len(log.visits) - m
    out = np.empty((W, m))
    for j in range(W):
        out[j] = np.abs(cdf[j:j + m] - cdf[j + m]).sum(axis=1)
    return out


def baseline_classify(log: UserLog, m: int = 6, alpha: float = DEFAULT_ALPHA,
                      vocab_size: int = DEFAULT_VOCAB_SIZE) -> BiasReport:
    dist = window_distances(log, m, vocab_size)
    # pooled regression of similarity on position: every window contributes positions 1..m
    y = -dist
    W = y.shape[0]
    x = np.tile(np.arange(1, m + 1, dtype=np.float64), W)
    result = fit_line(x, y.ravel(), log.user_id)
    return classify(result, alpha)

