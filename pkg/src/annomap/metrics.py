"""Agreement metrics and statistics.

All moments are population (1/n) moments. Lin's concordance is

    ccc = 2 * s_xy / (s_x^2 + s_y^2 + (m_x - m_y)^2)

and returns 0.0 whenever the denominator falls below ``DEGENERATE_EPS``
so that constant predictions score neutrally instead of aborting a run.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .errors import DegenerateError, InvalidInputError

DEGENERATE_EPS = 1e-12


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise InvalidInputError("expected 1-d score vectors")
    if x.shape != y.shape:
        raise InvalidInputError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise InvalidInputError("need at least two paired values")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InvalidInputError("non-finite entries")
    return x, y


def _moments(x: np.ndarray, y: np.ndarray):
    mx = x.mean()
    my = y.mean()
    dx = x - mx
    dy = y - my
    return mx, my, dx, dy, (dx * dx).mean(), (dy * dy).mean(), (dx * dy).mean()


def ccc(x, y) -> float:
    """Lin's concordance correlation coefficient of two equal-length vectors."""
    x, y = _pair(x, y)
    mx, my, _, _, vx, vy, cxy = _moments(x, y)
    denom = vx + vy + (mx - my) ** 2
    if denom < DEGENERATE_EPS:
        return 0.0
    return float(2.0 * cxy / denom)


def ccc_columns(predictions: np.ndarray, target: np.ndarray) -> np.ndarray:
    """CCC of every column of ``predictions`` (n, k) against ``target`` (n,).

    Degenerate columns score 0.
    """
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != y.shape[0]:
        raise InvalidInputError("predictions must be (n, k) with n == len(target)")
    if y.shape[0] < 2:
        raise InvalidInputError("need at least two paired values")
    mp = p.mean(axis=0)
    my = y.mean()
    dp = p - mp
    dy = y - my
    vp = (dp * dp).mean(axis=0)
    vy = (dy * dy).mean()
    cov = (dp * dy[:, None]).mean(axis=0)
    denom = vp + vy + (mp - my) ** 2
    out = np.zeros_like(denom)
    ok = denom >= DEGENERATE_EPS
    out[ok] = 2.0 * cov[ok] / denom[ok]
    return out


def ccc_gradient(predictions, targets) -> tuple[np.ndarray, bool]:
    """Gradient of ``ccc(predictions, targets)`` w.r.t. each prediction.

    Returns ``(grad, degenerate)``; a degenerate denominator yields a zero
    gradient and ``degenerate=True``.
    """
    x, y = _pair(predictions, targets)
    n = x.size
    mx, my, dx, dy, vx, vy, cxy = _moments(x, y)
    denom = vx + vy + (mx - my) ** 2
    if denom < DEGENERATE_EPS:
        return np.zeros(n), True
    # d cov/dx_k = dy_k/n ; d denom/dx_k = 2 (dx_k + mx - my)/n
    grad = (2.0 / (n * denom)) * dy - (4.0 * cxy / (n * denom * denom)) * (dx + (mx - my))
    return grad, False


def pcc(x, y) -> float:
    """Pearson correlation; raises DegenerateError for a constant input."""
    x, y = _pair(x, y)
    _, _, _, _, vx, vy, cxy = _moments(x, y)
    if vx < DEGENERATE_EPS or vy < DEGENERATE_EPS:
        raise DegenerateError("Pearson correlation undefined for constant input")
    r = cxy / np.sqrt(vx * vy)
    return float(np.clip(r, -1.0, 1.0))


@dataclass(frozen=True)
class ScalingParams:
    raw_min: float
    raw_max: float

    def __post_init__(self):
        if not (np.isfinite(self.raw_min) and np.isfinite(self.raw_max)):
            raise InvalidInputError("scaling bounds must be finite")
        if not self.raw_max > self.raw_min:
            raise InvalidInputError(f"raw_max ({self.raw_max}) must exceed raw_min ({self.raw_min})")


def fit_scaling(raw_labels) -> ScalingParams:
    values = np.asarray(raw_labels, dtype=np.float64).ravel()
    if values.size < 2:
        raise InvalidInputError("need at least two values to fit scaling")
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        raise InvalidInputError("all labels equal; cannot fit min-max scaling")
    return ScalingParams(lo, hi)


def apply_scaling(params: ScalingParams, raw):
    """Map raw labels linearly onto [-1, 1]; out-of-range inputs are clamped."""
    scaled = 2.0 * (np.asarray(raw, dtype=np.float64) - params.raw_min) / (params.raw_max - params.raw_min) - 1.0
    scaled = np.clip(scaled, -1.0, 1.0)
    return float(scaled) if scaled.ndim == 0 else scaled


def entropy_log2(selection_counts: Mapping | Iterable) -> float:
    """Shannon entropy in bits of a count distribution.

    Accepts a mapping ``identifier -> count`` or a plain sequence of counts.
    """
    counts = selection_counts.values() if isinstance(selection_counts, Mapping) else selection_counts
    c = np.asarray(list(counts), dtype=np.float64)
    if c.size == 0 or np.any(c < 0) or c.sum() <= 0:
        raise InvalidInputError("need at least one positive count")
    p = c[c > 0] / c.sum()
    h = -float(np.sum(p * np.log2(p)))
    return max(h, 0.0)


@dataclass(frozen=True)
class PairedTestResult:
    t_statistic: float
    degrees_of_freedom: int
    p_value: float
    significant_at_95: bool
    mean_difference: float


def paired_t_test(a, b) -> PairedTestResult:
    """Two-sided paired t-test on ``a - b``.

    Uses the sample (n-1) standard deviation of the differences; the p-value
    is ``I_{df/(df+t^2)}(df/2, 1/2)`` (regularized incomplete beta).
    """
    a, b = _pair(a, b)
    d = a - b
    n = d.size
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise DegenerateError("paired differences have zero variance")
    mean_d = d.mean()
    t = mean_d / (sd / np.sqrt(n))
    df = n - 1
    p = float(betainc(df / 2.0, 0.5, df / (df + t * t)))
    p = min(max(p, 0.0), 1.0)
    return PairedTestResult(float(t), df, p, p < 0.05, float(mean_d))
