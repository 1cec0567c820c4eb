import numpy as np
import pandas as pd
from scipy import stats

from src.errors import PreconditionError, UndefinedCorrelationError

MIN_POINTS = 3


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise PreconditionError(f"correlation inputs must be equal-length 1-d sequences, got {x.shape} and {y.shape}")
    if len(x) < MIN_POINTS:
        raise PreconditionError(f"correlation needs at least {MIN_POINTS} points, got {len(x)}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise PreconditionError("correlation inputs must be finite")
    return x, y


def _check_nonconstant(x, y):
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelationError("correlation is undefined for a constant input")


def pearson(x, y) -> float:
    """Sample Pearson linear correlation (PCC)."""
    x, y = _pair(x, y)
    _check_nonconstant(x, y)
    r = stats.pearsonr(x, y).statistic
    return float(np.clip(r, -1.0, 1.0))


def average_ranks(x) -> np.ndarray:
    """1-based ranks; tied values share the mean of their ranks."""
    return stats.rankdata(np.asarray(x, dtype=np.float64), method="average")


def spearman(x, y) -> float:
    """Spearman rank correlation (SRCC): Pearson correlation of average ranks."""
    x, y = _pair(x, y)
    _check_nonconstant(x, y)
    return pearson(average_ranks(x), average_ranks(y))


def linear_regression(x, y):
    """Least-squares slope and intercept of y on x."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.ptp(x) == 0:
        return np.nan, np.nan
    fit = stats.linregress(x, y)
    return float(fit.slope), float(fit.intercept)


def clean_value(val):
    if isinstance(val, (int, float, np.floating)):
        if np.isnan(val) or np.isinf(val):
            return None
        return float(val)
    return val


def correlation_summary(predicted: pd.Series, subjective: pd.Series) -> dict:
    """PCC/SRCC/n for one row group; correlations below 3 points or on constant input are None."""
    n = int(len(predicted))
    pcc = srcc = np.nan
    if n >= MIN_POINTS:
        try:
            pcc = pearson(predicted, subjective)
            srcc = spearman(predicted, subjective)
        except UndefinedCorrelationError:
            pass
    return {"pcc": clean_value(pcc), "srcc": clean_value(srcc), "n_items": n}
