"""Workload forecasting: the maximum predicted total workload over a horizon.

Pluggable by design; the default seasonal-naive-with-trend method repeats
yesterday's minutes scaled by the day-over-day mean ratio.  An oracle method
reads the true future from a trace and upper-bounds attainable planner
quality in simulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MINUTES_PER_DAY = 1440
LOOKBACK_DAYS = 14
TREND_CLAMP = (0.8, 1.25)

METHODS = ("seasonal_naive_trend", "last_value", "oracle")


class EmptyHistoryError(ValueError):
    pass


@dataclass(frozen=True)
class ForecastRequest:
    """History ends at `now_ts` inclusive; the forecast covers the next
    `horizon` minutes (now_ts, now_ts + horizon]."""

    history: np.ndarray
    horizon: int = 60
    now_ts: int = 0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if len(self.history) == 0:
            raise EmptyHistoryError("history must be non-empty")


def _last_value_max(hist: np.ndarray) -> float:
    tail = hist[-60:]
    if np.all(np.isnan(tail)):
        tail = hist[-MINUTES_PER_DAY:]
    if np.all(np.isnan(tail)):
        raise EmptyHistoryError("no usable history values")
    return float(np.nanmax(tail))


def forecast_max(req: ForecastRequest, method: str = "seasonal_naive_trend",
                 future: np.ndarray | None = None) -> float:
    """Maximum predicted workload over the horizon.

    seasonal_naive_trend predicts minute u as the value 24h earlier scaled by
    the clamped ratio of the last day's mean to the prior day's mean; needs
    two full days of history and otherwise falls back to last_value.
    last_value returns the max of the trailing hour.  oracle reads the true
    future (simulation only).
    """
    if method not in METHODS:
        raise ValueError(f"unknown forecast method {method!r}")
    hist = np.asarray(req.history, dtype=np.float64)
    # Bounded lookback: older history cannot change the result.
    if len(hist) > LOOKBACK_DAYS * MINUTES_PER_DAY:
        hist = hist[-LOOKBACK_DAYS * MINUTES_PER_DAY:]

    if method == "oracle":
        if future is None:
            raise ValueError("oracle method needs the true future series")
        fut = np.asarray(future, dtype=np.float64)[: req.horizon]
        if len(fut) == 0 or np.all(np.isnan(fut)):
            raise EmptyHistoryError("oracle future is empty")
        return float(np.nanmax(fut))

    if method == "last_value":
        return _last_value_max(hist)

    if len(hist) < 2 * MINUTES_PER_DAY:
        return _last_value_max(hist)
    last_day = hist[-MINUTES_PER_DAY:]
    prior_day = hist[-2 * MINUTES_PER_DAY: -MINUTES_PER_DAY]
    m_last = np.nanmean(last_day) if not np.all(np.isnan(last_day)) else np.nan
    m_prior = np.nanmean(prior_day) if not np.all(np.isnan(prior_day)) else np.nan
    if not np.isfinite(m_last) or not np.isfinite(m_prior) or m_prior <= 0:
        return _last_value_max(hist)
    growth = min(max(m_last / m_prior, TREND_CLAMP[0]), TREND_CLAMP[1])

    # Minute now+u repeats minute now+u-1440, i.e. history index -1440+u.
    horizon = min(req.horizon, MINUTES_PER_DAY)
    base = hist[len(hist) - MINUTES_PER_DAY: len(hist) - MINUTES_PER_DAY + horizon]
    if np.all(np.isnan(base)):
        return _last_value_max(hist)
    return float(np.nanmax(base) * growth)
