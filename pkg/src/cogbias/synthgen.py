"""Synthetic behaviour logs with planted anchoring / recency behaviour.

Each visit is ``n`` actions.  A fixed skeleton (same positions, same actions,
for every visit of every user) stands in for the task-mandated part of the
flow; the remaining personal slots carry the user-specific behaviour:

* visits 1-2, and every visit of a neutral user: preferred-subset actions;
* anchoring, visit t >= 3: resample the personal actions of visits 1-2 with
  probability ``bias_strength``;
* recency, visit t >= 3: resample the personal actions of visits t-2..t-1
  with probability ``bias_strength``.

Every personal slot is uniform noise with probability ``noise_rate``.  The
leftover mass ``1 - bias_strength - noise_rate`` goes to the opposite
source (visit t-1 for anchoring users, visits 1-2 for recency users).

Norm-pool users are extra neutral users whose visit counts fall outside the
detection thresholds, so the pipeline uses them for common training only.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from .domain import DEFAULT_VISIT_LENGTH, DEFAULT_VOCAB_SIZE, MAX_VISITS, MIN_VISITS, UserLog, Visit


class BiasClass(str, Enum):
    ANCHORING = "anchoring"
    RECENCY = "recency"
    NEUTRAL = "neutral"


@dataclass(frozen=True)
class GeneratorConfig:
    n_anchoring: int = 40
    n_recency: int = 40
    n_neutral: int = 20
    n_norm_pool: int = 20
    vocab_size: int = DEFAULT_VOCAB_SIZE
    n: int = DEFAULT_VISIT_LENGTH
    min_visits: int = 40
    max_visits: int = MAX_VISITS
    pool_min_visits: int = 7
    pool_max_visits: int = MIN_VISITS - 1
    bias_strength: float = 0.8
    noise_rate: float = 0.1
    skeleton_length: int = 11
    preferred_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.bias_strength <= 1.0 or not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("bias_strength and noise_rate must lie in [0, 1]")
        if self.bias_strength + self.noise_rate > 1.0 + 1e-12:
            raise ValueError("bias_strength + noise_rate must not exceed 1")
        if not 0 <= self.skeleton_length < self.n:
            raise ValueError("skeleton_length must leave at least one personal slot")
        if not 3 <= self.min_visits <= self.max_visits:
            raise ValueError("need 3 <= min_visits <= max_visits")
        if not 1 <= self.pool_min_visits <= self.pool_max_visits:
            raise ValueError("need 1 <= pool_min_visits <= pool_max_visits")
        if not 1 <= self.preferred_size <= self.vocab_size:
            raise ValueError("preferred_size must be in [1, vocab_size]")
        if min(self.n_anchoring, self.n_recency, self.n_neutral, self.n_norm_pool) < 0:
            raise ValueError("user counts must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Skeleton:
    positions: tuple[int, ...]
    actions: tuple[int, ...]

    def personal_positions(self, n: int) -> tuple[int, ...]:
        fixed = set(self.positions)
        return tuple(j for j in range(n) if j not in fixed)


def stable_seed(*parts) -> int:
    """Process-independent 64-bit seed from arbitrary printable parts."""
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_skeleton(cfg: GeneratorConfig) -> Skeleton:
    rng = np.random.default_rng(stable_seed(cfg.seed, "skeleton"))
    positions = np.sort(rng.choice(cfg.n, size=cfg.skeleton_length, replace=False))
    actions = rng.integers(0, cfg.vocab_size, size=cfg.skeleton_length)
    return Skeleton(tuple(int(p) for p in positions), tuple(int(a) for a in actions))


def _personal_rows(cls: BiasClass, n_visits: int, k: int, cfg: GeneratorConfig,
                   rng: np.random.Generator) -> np.ndarray:
    """``(n_visits, k)`` personal-slot actions for one user."""
    V, lam, rho = cfg.vocab_size, cfg.bias_strength, cfg.noise_rate
    preferred = rng.choice(V, size=cfg.preferred_size, replace=False)
    rows = np.empty((n_visits, k), dtype=np.int64)

    def preferred_or_noise():
        row = rng.choice(preferred, size=k)
        noisy = rng.random(k) < rho
        row[noisy] = rng.integers(0, V, size=int(noisy.sum()))
        return row

    for t in range(n_visits):
        if t < 2 or cls is BiasClass.NEUTRAL:
            rows[t] = preferred_or_noise()
            continue
        anchor_pool = rows[:2].ravel()
        recent_pool = rows[max(t - 2, 0):t].ravel()
        last_pool = rows[t - 1]
        if cls is BiasClass.ANCHORING:
            biased, other = anchor_pool, last_pool
        else:
            biased, other = recent_pool, anchor_pool
        u = rng.random(k)
        row = np.where(u < lam, rng.choice(biased, size=k), rng.choice(other, size=k))
        noisy = (u >= lam) & (u < lam + rho)
        row[noisy] = rng.integers(0, V, size=int(noisy.sum()))
        rows[t] = row
    return rows


def generate_user(cls: BiasClass | str, cfg: GeneratorConfig, user_id: str,
                  n_visits: int | None = None, skeleton: Skeleton | None = None) -> UserLog:
    """One user's log; depends only on (cfg, user_id, class)."""
    cls = BiasClass(cls)
    skeleton = skeleton or make_skeleton(cfg)
    rng = np.random.default_rng(stable_seed(cfg.seed, "user", user_id, cls.value))
    if n_visits is None:
        n_visits = int(rng.integers(cfg.min_visits, cfg.max_visits + 1))
    personal = skeleton.personal_positions(cfg.n)
    rows = _personal_rows(cls, n_visits, len(personal), cfg, rng)
    visits = []
    for t in range(n_visits):
        actions = np.empty(cfg.n, dtype=np.int64)
        actions[list(skeleton.positions)] = skeleton.actions
        actions[list(personal)] = rows[t]
        visits.append(Visit(tuple(int(a) for a in actions), (True,) * cfg.n))
    return UserLog(user_id, tuple(visits))


@dataclass
class Corpus:
    logs: list[UserLog]
    labels: dict[str, BiasClass]
    roles: dict[str, str]          # "detect" or "norm"
    cfg: GeneratorConfig

    def detection_ids(self) -> list[str]:
        return [u for u, r in self.roles.items() if r == "detect"]


def generate_corpus(cfg: GeneratorConfig) -> Corpus:
    skeleton = make_skeleton(cfg)
    logs, labels, roles = [], {}, {}
    plan = ([(BiasClass.ANCHORING, f"anc{i:04d}") for i in range(cfg.n_anchoring)]
            + [(BiasClass.RECENCY, f"rec{i:04d}") for i in range(cfg.n_recency)]
            + [(BiasClass.NEUTRAL, f"neu{i:04d}") for i in range(cfg.n_neutral)])
    for cls, uid in plan:
        logs.append(generate_user(cls, cfg, uid, skeleton=skeleton))
        labels[uid], roles[uid] = cls, "detect"
    for i in range(cfg.n_norm_pool):
        uid = f"pool{i:04d}"
        count_rng = np.random.default_rng(stable_seed(cfg.seed, "pool-visits", uid))
        n_visits = int(count_rng.integers(cfg.pool_min_visits, cfg.pool_max_visits + 1))
        logs.append(generate_user(BiasClass.NEUTRAL, cfg, uid, n_visits=n_visits, skeleton=skeleton))
        labels[uid], roles[uid] = BiasClass.NEUTRAL, "norm"
    return Corpus(logs, labels, roles, cfg)
