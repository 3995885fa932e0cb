"""Actions, visits, user logs, rolling windows and the per-user data split."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import InsufficientVisits, InvalidVisit

DEFAULT_VOCAB_SIZE = 33
DEFAULT_VISIT_LENGTH = 21
DEFAULT_WINDOW = 6
MIN_VISITS = 10
MAX_VISITS = 82

STAGES = ("common", "personalized", "extended")


@dataclass(frozen=True)
class Visit:
    """Fixed-length action sequence; ``mask[j]`` is True for real actions.

    Padded positions hold the padding id, which equals the vocabulary size.
    """

    actions: tuple[int, ...]
    mask: tuple[bool, ...]

    def __post_init__(self):
        if len(self.actions) != len(self.mask):
            raise InvalidVisit(f"actions/mask length mismatch: {len(self.actions)} vs {len(self.mask)}")
        if not any(self.mask):
            raise InvalidVisit("visit has no real actions")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def real_actions(self) -> tuple[int, ...]:
        return tuple(a for a, keep in zip(self.actions, self.mask) if keep)


@dataclass(frozen=True)
class UserLog:
    user_id: str
    visits: tuple[Visit, ...]

    def __len__(self) -> int:
        return len(self.visits)


@dataclass(frozen=True)
class Window:
    context: tuple[Visit, ...]
    target: Visit


@dataclass(frozen=True)
class SplitSpec:
    common_frac: float = 0.20
    personalized_frac: float = 0.50
    extended_frac: float = 0.30

    def __post_init__(self):
        fracs = (self.common_frac, self.personalized_frac, self.extended_frac)
        if any(f < 0 for f in fracs):
            raise ValueError(f"split fractions must be nonnegative: {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(fracs)!r}")


def normalize_visit(
    raw: Sequence[int],
    n: int = DEFAULT_VISIT_LENGTH,
    focal: int | None = None,
    vocab_size: int = DEFAULT_VOCAB_SIZE,
) -> Visit:
    """Crop or right-pad ``raw`` to exactly ``n`` actions.

    Long visits keep the ``n`` actions centred on ``focal`` (clamped to the
    visit bounds) or the first ``n`` when no focal position is given.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    raw = [int(a) for a in raw]
    if not raw:
        raise InvalidVisit("empty visit")
    bad = [a for a in raw if not 0 <= a < vocab_size]
    if bad:
        raise InvalidVisit(f"action ids out of range [0, {vocab_size}): {bad[:5]}")
    if len(raw) >= n:
        start = 0
        if focal is not None:
            start = min(max(focal - n // 2, 0), len(raw) - n)
        return Visit(tuple(raw[start:start + n]), (True,) * n)
    pad = n - len(raw)
    return Visit(tuple(raw) + (vocab_size,) * pad, (True,) * len(raw) + (False,) * pad)


def split_sizes(n_visits: int, spec: SplitSpec) -> tuple[int, int, int]:
    # floor for the first two parts, remainder to the extended part
    common = math.floor(spec.common_frac * n_visits + 1e-9)
    personal = math.floor(spec.personalized_frac * n_visits + 1e-9)
    return common, personal, n_visits - common - personal


def split_user(log: UserLog, spec: SplitSpec = SplitSpec(), m: int | None = None) -> tuple[UserLog, UserLog, UserLog]:
    """Chronological common/personalized/extended split of one user's visits.

    When ``m`` is given every part must hold at least ``m + 1`` visits;
    the first short part raises :class:`InsufficientVisits` tagged with its stage.
    """
    c, p, _ = split_sizes(len(log.visits), spec)
    bounds = ((0, c), (c, c + p), (c + p, len(log.visits)))
    parts = tuple(UserLog(log.user_id, log.visits[a:b]) for a, b in bounds)
    if m is not None:
        for stage, part in zip(STAGES, parts):
            if len(part.visits) < m + 1:
                raise InsufficientVisits(len(part.visits), m + 1, stage=stage, user_id=log.user_id)
    return parts


def make_windows(log: UserLog, m: int = DEFAULT_WINDOW) -> list[Window]:
    """Rolling windows with stride 1: ``N - m`` of them for ``N`` visits."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if len(log.visits) < m + 1:
        raise InsufficientVisits(len(log.visits), m + 1, user_id=log.user_id)
    v = log.visits
    return [Window(tuple(v[j:j + m]), v[j + m]) for j in range(len(v) - m)]


def filter_users(
    logs: Iterable[UserLog], min_visits: int = MIN_VISITS, max_visits: int = MAX_VISITS
) -> tuple[list[UserLog], list[UserLog]]:
    """Split users into (detection users, everyone else) by visit count."""
    keep, rest = [], []
    for log in logs:
        (keep if min_visits <= len(log.visits) <= max_visits else rest).append(log)
    return keep, rest


def windows_to_arrays(windows: Sequence[Window]) -> dict[str, np.ndarray]:
    """Stack windows into int/bool arrays ``(B, m, n)`` context and ``(B, n)`` target."""
    if not windows:
        raise ValueError("no windows to stack")
    m = len(windows[0].context)
    if any(len(w.context) != m for w in windows):
        raise ValueError("windows have differing context sizes")
    ctx = np.array([[v.actions for v in w.context] for w in windows], dtype=np.int64)
    ctx_mask = np.array([[v.mask for v in w.context] for w in windows], dtype=bool)
    tgt = np.array([w.target.actions for w in windows], dtype=np.int64)
    tgt_mask = np.array([w.target.mask for w in windows], dtype=bool)
    return {"ctx": ctx, "ctx_mask": ctx_mask, "tgt": tgt, "tgt_mask": tgt_mask}
