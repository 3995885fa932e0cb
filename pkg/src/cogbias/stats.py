"""Per-user trend regression on attention deviations and label assignment.

Deviations ``delta[w, i]`` (window ``w``, visit position ``i``) are regressed
on centred visit position and centred window index with an intercept.  A
significantly negative position slope means early visits carry more weight
than the norm (anchoring); significantly positive means recency.
Centring leaves the slopes and their t statistics unchanged.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Mapping

import numpy as np
import scipy.linalg
from scipy.special import betainc

from .errors import DegenerateDesign, InsufficientPoints, KeyMismatch

DEFAULT_ALPHA = 0.05


class BiasLabel(str, Enum):
    ANCHORING = "Anchoring"
    INCONCLUSIVE = "Inconclusive"
    RECENCY = "Recency"


LABEL_ORDER = (BiasLabel.ANCHORING, BiasLabel.INCONCLUSIVE, BiasLabel.RECENCY)


@dataclass(frozen=True)
class RegressionResult:
    beta1: float
    beta2: float | None           # None when the window column was dropped
    intercept: float
    se_beta1: float
    se_beta2: float | None
    se_intercept: float
    t_beta1: float
    p_beta1: float
    dof: int
    n_obs: int
    rss: float
    degenerate: bool = False
    user_id: str | None = None


@dataclass(frozen=True)
class BiasReport:
    user_id: str | None
    label: BiasLabel
    result: RegressionResult
    alpha: float


def t_two_sided_p(t: float, dof: int) -> float:
    """Two-sided p-value of Student's t via the regularised incomplete beta function."""
    if dof < 1:
        raise ValueError(f"dof must be >= 1, got {dof}")
    if np.isnan(t):
        return 1.0
    if np.isinf(t):
        return 0.0
    x = dof / (dof + t * t)
    if x > 0.5:
        # near t = 0, x rounds toward 1; the complement keeps full absolute precision
        return float(1.0 - betainc(0.5, dof / 2.0, t * t / (dof + t * t)))
    return float(betainc(dof / 2.0, 0.5, x))


def _ols(X: np.ndarray, y: np.ndarray):
    """Solve the normal equations (LU with partial pivoting); returns beta, se, rss, dof."""
    n, k = X.shape
    dof = n - k
    XtX = X.T @ X
    beta = scipy.linalg.solve(XtX, X.T @ y, assume_a="gen")
    resid = y - X @ beta
    rss = float(resid @ resid)
    sigma2 = rss / dof
    cov = sigma2 * scipy.linalg.inv(XtX)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return beta, se, rss, dof


def _t_and_p(beta: float, se: float, dof: int) -> tuple[float, float]:
    if se > 0:
        t = beta / se
    elif beta == 0:
        t = 0.0
    else:
        t = float(np.copysign(np.inf, beta))
    return float(t), t_two_sided_p(t, dof)


def fit_user_regression(surface, user_id: str | None = None) -> RegressionResult:
    """OLS of ``delta`` on [1, visit position, window index].

    ``surface`` is a :class:`pipeline.DeviationSurface` or a ``(W, m)`` array.
    With a single window the window column is constant; it is dropped, the
    reduced model refitted, and a :class:`DegenerateDesign` warning emitted.
    """
    delta = np.asarray(getattr(surface, "delta", surface), dtype=np.float64)
    user_id = getattr(surface, "user_id", user_id)
    if delta.ndim != 2:
        raise ValueError(f"deviation surface must be 2-D (windows, positions), got {delta.shape}")
    W, m = delta.shape
    if m < 2 or W < 1:
        raise InsufficientPoints(f"need m >= 2 positions and >= 1 window, got W={W}, m={m}")
    pos = np.tile(np.arange(1, m + 1, dtype=np.float64), W)
    win = np.repeat(np.arange(1, W + 1, dtype=np.float64), m)
    x1 = pos - pos.mean()
    x2 = win - win.mean()
    y = delta.ravel()
    degenerate = not np.any(np.abs(x2) > 0)
    cols = [np.ones_like(y), x1] + ([] if degenerate else [x2])
    X = np.column_stack(cols)
    if len(y) - X.shape[1] < 1:
        raise InsufficientPoints(f"{len(y)} observations leave no residual degrees of freedom")
    if degenerate:
        warnings.warn(DegenerateDesign(f"user {user_id}: single window, window-index column dropped"),
                      stacklevel=2)
    beta, se, rss, dof = _ols(X, y)
    t1, p1 = _t_and_p(beta[1], se[1], dof)
    return RegressionResult(
        beta1=float(beta[1]),
        beta2=None if degenerate else float(beta[2]),
        # report the intercept at the original (uncentred) origin
        intercept=float(beta[0] - beta[1] * pos.mean() - (0.0 if degenerate else beta[2] * win.mean())),
        se_beta1=float(se[1]),
        se_beta2=None if degenerate else float(se[2]),
        se_intercept=float(se[0]),
        t_beta1=t1,
        p_beta1=p1,
        dof=dof,
        n_obs=len(y),
        rss=rss,
        degenerate=degenerate,
        user_id=user_id,
    )


def label_for(beta1: float, p: float, alpha: float = DEFAULT_ALPHA) -> BiasLabel:
    if p < alpha and beta1 < 0:
        return BiasLabel.ANCHORING
    if p < alpha and beta1 > 0:
        return BiasLabel.RECENCY
    return BiasLabel.INCONCLUSIVE


def classify(result: RegressionResult, alpha: float = DEFAULT_ALPHA) -> BiasReport:
    return BiasReport(result.user_id, label_for(result.beta1, result.p_beta1, alpha), result, alpha)


def fit_line(x: np.ndarray, y: np.ndarray, user_id: str | None = None) -> RegressionResult:
    """OLS of ``y`` on ``x`` with intercept (dof = len(y) - 2)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"x and y lengths differ: {x.shape} vs {y.shape}")
    if len(y) < 3:
        raise InsufficientPoints(f"line fit needs >= 3 points, got {len(y)}")
    if np.ptp(x) == 0:
        raise InsufficientPoints("regressor is constant")
    xc = x - x.mean()
    X = np.column_stack([np.ones_like(y), xc])
    beta, se, rss, dof = _ols(X, y)
    t1, p1 = _t_and_p(beta[1], se[1], dof)
    return RegressionResult(float(beta[1]), None, float(beta[0] - beta[1] * x.mean()), float(se[1]), None,
                            float(se[0]), t1, p1, dof, len(y), rss, False, user_id)


def fit_slope(y: np.ndarray, user_id: str | None = None) -> RegressionResult:
    """Line fit of ``y`` against positions 1..len(y)."""
    y = np.asarray(y, dtype=np.float64).ravel()
    return fit_line(np.arange(1, len(y) + 1, dtype=np.float64), y, user_id)


def slope_trend_personalized(profile, norm, alpha: float = DEFAULT_ALPHA) -> BiasReport:
    """Quick label from the last window's deviation alone (m points).

    ``profile`` is a :class:`pipeline.PersonalProfile` (or ``(W, m)`` array of
    attention weights) and ``norm`` a :class:`pipeline.NormProfile` (or array).
    """
    alphas = np.asarray(getattr(profile, "alphas", profile), dtype=np.float64)
    base = np.asarray(getattr(norm, "alpha", norm), dtype=np.float64)
    last = alphas[-1] if alphas.ndim == 2 else alphas
    if last.shape != base.shape:
        raise ValueError(f"profile length {last.shape} != norm length {base.shape}")
    if len(last) < 3:
        raise InsufficientPoints(f"slope test needs m >= 3 positions, got {len(last)}")
    result = fit_slope(last - base, user_id=getattr(profile, "user_id", None))
    return classify(result, alpha)


@dataclass(frozen=True)
class Concordance:
    score: float
    matrix: np.ndarray            # rows: labels under q, columns: labels under q'
    labels: tuple[BiasLabel, ...] = LABEL_ORDER
    n_users: int = 0

    def to_dict(self) -> dict:
        return {
            "score": self.score,
            "n_users": self.n_users,
            "labels": [lab.value for lab in self.labels],
            "matrix": self.matrix.astype(int).tolist(),
        }


def concordance(labels_q: Mapping[str, BiasLabel], labels_q2: Mapping[str, BiasLabel]) -> Concordance:
    """Fraction of users with identical labels, plus the 3x3 cross-tabulation."""
    if set(labels_q) != set(labels_q2):
        only_a = sorted(set(labels_q) - set(labels_q2))[:5]
        only_b = sorted(set(labels_q2) - set(labels_q))[:5]
        raise KeyMismatch(f"user sets differ (only in first: {only_a}, only in second: {only_b})")
    if not labels_q:
        raise ValueError("no users to compare")
    index = {lab: k for k, lab in enumerate(LABEL_ORDER)}
    matrix = np.zeros((3, 3), dtype=np.int64)
    agree = 0
    for uid in sorted(labels_q):
        a, b = BiasLabel(labels_q[uid]), BiasLabel(labels_q2[uid])
        matrix[index[a], index[b]] += 1
        agree += a is b
    return Concordance(agree / len(labels_q), matrix, LABEL_ORDER, len(labels_q))
