"""Common -> personalized -> extended-personalized training and deviation extraction.

The common model is trained on the pooled windows of every detection user's
first split part plus every norm-only user (users outside the detection
visit-count thresholds).  Its mean visit-attention profile is the norm.
Each detection user then gets private fine-tuned copies on their
personalized and extended parts; the per-window attention of those copies
minus the norm is the user's deviation surface.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import han
from .domain import MAX_VISITS, MIN_VISITS, SplitSpec, UserLog, Window, filter_users, make_windows, split_user
from .errors import InsufficientPoints, InsufficientVisits, ShapeError
from .han import HierarchicalAttentionNetwork, ModelConfig, TrainResult
from .stats import DEFAULT_ALPHA, BiasLabel, BiasReport, classify, fit_user_regression, slope_trend_personalized
from .synthgen import stable_seed

log = logging.getLogger(__name__)


FINETUNE_SCOPES = {
    "all": None,
    "visit": ("vis_",),
    "attention": ("vis_att_",),
}


def trainable_names(params, scope: str) -> list[str] | None:
    prefixes = FINETUNE_SCOPES[scope]
    if prefixes is None:
        return None
    return sorted(k for k in params if k.startswith(prefixes))


@dataclass(frozen=True)
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    alpha: float = DEFAULT_ALPHA
    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 40
    common_epochs: int = 25
    finetune_epochs: int = 10
    finetune_lr: float = 1e-3
    patience: int = 3
    min_delta: float = 1e-4
    min_visits: int = MIN_VISITS
    max_visits: int = MAX_VISITS
    norm_aggregate: str = "mean"          # or "median"
    extended_init: str = "personalized"   # warm start for the extended stage: "personalized" | "common"
    finetune_scope: str = "all"           # "all" | "visit" (visit encoder + visit attention) | "attention"
    workers: int = 1
    check_invariants: bool = False        # trace every trained model and record its worst simplex error

    def __post_init__(self):
        if self.norm_aggregate not in ("mean", "median"):
            raise ValueError(f"norm_aggregate must be 'mean' or 'median', got {self.norm_aggregate!r}")
        if self.extended_init not in ("personalized", "common"):
            raise ValueError(f"extended_init must be 'personalized' or 'common', got {self.extended_init!r}")
        if self.finetune_scope not in FINETUNE_SCOPES:
            raise ValueError(f"finetune_scope must be one of {sorted(FINETUNE_SCOPES)}, got {self.finetune_scope!r}")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")

    @property
    def m(self) -> int:
        return self.model.m

    def with_window(self, m: int) -> "PipelineConfig":
        return replace(self, model=replace(self.model, m=m))


@dataclass(frozen=True)
class NormProfile:
    alpha: np.ndarray           # (m,)


@dataclass(frozen=True)
class PersonalProfile:
    user_id: str
    alphas: np.ndarray          # (W, m), one attention profile per rolling window
    stage: str
    simplex_error: float | None = None   # set when invariants are checked

    @property
    def last(self) -> np.ndarray:
        return self.alphas[-1]


@dataclass(frozen=True)
class DeviationSurface:
    user_id: str
    delta: np.ndarray           # (W, m)
    stage: str = "extended"


def deviations(personal: PersonalProfile, norm: NormProfile) -> DeviationSurface:
    alphas = np.asarray(personal.alphas)
    if alphas.ndim != 2 or alphas.shape[1] != norm.alpha.shape[0]:
        raise ShapeError(f"profile shape {alphas.shape} does not match norm length {norm.alpha.shape}")
    return DeviationSurface(personal.user_id, alphas - norm.alpha[None, :], personal.stage)


def simplex_error(model: HierarchicalAttentionNetwork, windows: Sequence[Window], chunk: int = 256) -> float:
    """Largest |sum - 1| over action attention, visit attention and decoder distributions."""
    worst = 0.0
    for s in range(0, len(windows), chunk):
        tr = model.trace(list(windows[s:s + chunk]))
        for probs in (tr.action_attention, tr.visit_attention, tr.decoder_distributions):
            worst = max(worst, float(np.abs(probs.sum(axis=-1) - 1.0).max()))
    return worst


def _windows(log_: UserLog, m: int, stage: str) -> list[Window]:
    try:
        return make_windows(log_, m)
    except InsufficientVisits as exc:
        raise InsufficientVisits(exc.have, exc.need, stage=stage, user_id=log_.user_id) from None


def train_common(windows: Sequence[Window], cfg: PipelineConfig) -> tuple[HierarchicalAttentionNetwork, NormProfile, TrainResult]:
    if not windows:
        raise ValueError("common training needs at least one window")
    model = HierarchicalAttentionNetwork.initialize(cfg.model, stable_seed(cfg.seed, "init"))
    result = han.train(model, windows, epochs=cfg.common_epochs, lr=cfg.lr, batch_size=cfg.batch_size,
                       seed=stable_seed(cfg.seed, "common"), patience=cfg.patience, min_delta=cfg.min_delta)
    alphas = result.model.visit_attention(list(windows))
    agg = np.median(alphas, axis=0) if cfg.norm_aggregate == "median" else alphas.mean(axis=0)
    if cfg.norm_aggregate == "median":
        agg = agg / agg.sum()
    if cfg.check_invariants:
        result.simplex_error = simplex_error(result.model, windows)
    log.info("common training: %d windows, %d epochs, final loss %.4f",
             len(windows), len(result.epoch_losses), result.epoch_losses[-1])
    return result.model, NormProfile(agg), result


def _fine_tune(start: HierarchicalAttentionNetwork, part: UserLog, cfg: PipelineConfig,
               stage: str) -> tuple[PersonalProfile, TrainResult]:
    windows = _windows(part, cfg.m, stage)
    if cfg.finetune_epochs > 0:
        result = han.train(start, windows, epochs=cfg.finetune_epochs, lr=cfg.finetune_lr,
                           batch_size=cfg.batch_size, seed=stable_seed(cfg.seed, part.user_id, stage),
                           patience=cfg.patience, min_delta=cfg.min_delta,
                           trainable=trainable_names(start.params, cfg.finetune_scope))
    else:
        result = TrainResult(model=start.clone())
    alphas = result.model.visit_attention(windows)
    err = simplex_error(result.model, windows) if cfg.check_invariants else None
    return PersonalProfile(part.user_id, alphas, stage, err), result


def train_personalized(common: HierarchicalAttentionNetwork, personal_part: UserLog,
                       cfg: PipelineConfig) -> tuple[PersonalProfile, TrainResult]:
    """Fine-tune a private copy of the common model on one user's personalized part."""
    return _fine_tune(common, personal_part, cfg, "personalized")


def train_extended(start: HierarchicalAttentionNetwork, extended_part: UserLog,
                   cfg: PipelineConfig) -> tuple[PersonalProfile, TrainResult]:
    """Fine-tune on the extended part, keeping the profile of every rolling window."""
    return _fine_tune(start, extended_part, cfg, "extended")


@dataclass
class UserResult:
    user_id: str
    personalized: PersonalProfile | None = None
    extended: PersonalProfile | None = None
    surface: DeviationSurface | None = None
    personalized_surface: DeviationSurface | None = None
    report: BiasReport | None = None
    quick_report: BiasReport | None = None
    excluded: str | None = None

    @property
    def label(self) -> BiasLabel:
        return self.report.label if self.report is not None else BiasLabel.INCONCLUSIVE


@dataclass
class PipelineResult:
    cfg: PipelineConfig
    common_model: HierarchicalAttentionNetwork
    norm: NormProfile
    common_history: list[float]
    n_common_windows: int
    users: dict[str, UserResult]
    norm_only_users: list[str]
    dropped_users: list[str]
    common_simplex_error: float | None = None

    def labels(self) -> dict[str, BiasLabel]:
        return {u: r.label for u, r in sorted(self.users.items())}

    def excluded(self) -> dict[str, str]:
        return {u: r.excluded for u, r in sorted(self.users.items()) if r.excluded}


def process_user(common: HierarchicalAttentionNetwork, norm: NormProfile, log_: UserLog,
                 cfg: PipelineConfig) -> UserResult:
    """Personalized and extended fine-tunes, deviations and labels for one user."""
    out = UserResult(log_.user_id)
    _, personal_part, extended_part = split_user(log_, cfg.split)
    try:
        out.personalized, pres = train_personalized(common, personal_part, cfg)
        out.personalized_surface = deviations(out.personalized, norm)
        try:
            out.quick_report = slope_trend_personalized(out.personalized, norm, cfg.alpha)
        except InsufficientPoints:
            pass
        start = pres.model if cfg.extended_init == "personalized" else common
        out.extended, _ = train_extended(start, extended_part, cfg)
        out.surface = deviations(out.extended, norm)
        out.report = classify(fit_user_regression(out.surface), cfg.alpha)
    except (InsufficientVisits, InsufficientPoints) as exc:
        out.excluded = str(exc)
    return out


_worker_state: dict = {}


def _worker_init(model_cfg, params, norm_alpha, cfg):
    _worker_state["common"] = HierarchicalAttentionNetwork(model_cfg, params)
    _worker_state["norm"] = NormProfile(norm_alpha)
    _worker_state["cfg"] = cfg


def _worker_run(log_: UserLog) -> UserResult:
    return process_user(_worker_state["common"], _worker_state["norm"], log_, _worker_state["cfg"])


def run_pipeline(logs: Sequence[UserLog], cfg: PipelineConfig = PipelineConfig()) -> PipelineResult:
    m = cfg.m
    detect, rest = filter_users(logs, cfg.min_visits, cfg.max_visits)
    norm_only = [u for u in rest if len(u.visits) >= m + 1]
    dropped = sorted(u.user_id for u in rest if len(u.visits) < m + 1)
    common_windows: list[Window] = []
    for u in detect:
        common_part = split_user(u, cfg.split)[0]
        if len(common_part.visits) >= m + 1:
            common_windows.extend(make_windows(common_part, m))
    for u in norm_only:
        common_windows.extend(make_windows(u, m))
    common, norm, common_result = train_common(common_windows, cfg)

    results: dict[str, UserResult] = {}
    if cfg.workers > 1 and len(detect) > 1:
        args = (cfg.model, common.params, norm.alpha, cfg)
        with ProcessPoolExecutor(cfg.workers, initializer=_worker_init, initargs=args) as pool:
            for res in pool.map(_worker_run, detect):
                results[res.user_id] = res
    else:
        for u in detect:
            results[u.user_id] = process_user(common, norm, u, cfg)
    return PipelineResult(cfg, common, norm, common_result.epoch_losses, len(common_windows),
                          dict(sorted(results.items())), sorted(u.user_id for u in norm_only), dropped,
                          common_result.simplex_error)
