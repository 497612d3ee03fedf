import math
from typing import Sequence, Tuple

import numpy as np
from scipy import special, stats

from model.models import TTestResult
from utils.errors import DegenerateVarianceError, ShapeError, UndefinedCorrelationError

VARIANCE_RTOL = 1e-12


def _as_pair(x: Sequence[float], y: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ShapeError(f"paired samples differ in length: {x.size} vs {y.size}")
    if x.size < 2:
        raise ShapeError(f"need at least 2 paired values, got {x.size}")
    return x, y


def student_t_two_sided_p(t: float, df: int) -> float:
    """P(|T| >= |t|) for Student's t via the regularized incomplete beta."""
    if math.isinf(t):
        return 0.0
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(x: Sequence[float], y: Sequence[float]) -> TTestResult:
    """
    Paired t-test on index-aligned samples.

    Differences whose spread is at rounding level relative to the data
    (a constant offset on every case) count as zero variance.

    Raises:
        DegenerateVarianceError: when every paired difference is identical
    """
    x, y = _as_pair(x, y)
    d = x - y
    n = d.size
    sd = float(np.std(d, ddof=1))
    scale = max(1.0, abs(float(np.mean(d))), float(np.max(np.abs(x))), float(np.max(np.abs(y))))
    if not math.isfinite(sd) or sd <= VARIANCE_RTOL * scale:
        raise DegenerateVarianceError(
            f"paired differences have zero variance (all equal to {d[0]:g}); t is undefined"
        )
    t = float(np.mean(d) / (sd / math.sqrt(n)))
    df = n - 1
    return TTestResult(t=t, p=student_t_two_sided_p(t, df), df=df)


def pearson_r(x: Sequence[float], y: Sequence[float]) -> float:
    x, y = _as_pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation is undefined for a constant sample")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def one_way_anova(*groups: Sequence[float]) -> Tuple[float, float]:
    """One-way ANOVA F statistic and p-value across groups."""
    cleaned = [np.asarray(g, dtype=np.float64) for g in groups]
    cleaned = [g[np.isfinite(g)] for g in cleaned]
    if len(cleaned) < 2 or any(g.size < 2 for g in cleaned):
        raise ShapeError("ANOVA needs at least two groups with two finite values each")
    result = stats.f_oneway(*cleaned)
    return float(result.statistic), float(result.pvalue)
