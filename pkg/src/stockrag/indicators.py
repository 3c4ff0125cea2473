"""Per-stock technical indicators: VWAP, MACD, Bollinger bands and KDJ.

All series are numpy float arrays in chronological order.  Numeric nulls are
NaN; signal series are lists holding a label string or ``None``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DomainError

BULLISH, BEARISH = "bullish", "bearish"
EXCEED_UPPER, EXCEED_LOWER = "exceed_upper", "exceed_lower"
OVERBOUGHT, OVERSOLD = "overbought", "oversold"


@dataclass(frozen=True)
class IndicatorParams:
    macd_fast: int = 12
    macd_slow: int = 26
    macd_signal: int = 9
    bollinger_window: int = 20
    bollinger_k: float = 2.0
    kdj_window: int = 9
    kdj_smoothing: float = 1 / 3
    kdj_seed: float = 50.0
    overbought_k: float = 80.0
    overbought_d: float = 70.0
    overbought_j: float = 90.0
    oversold_k: float = 20.0
    oversold_d: float = 30.0
    oversold_j: float = 10.0
    smr_window: int = 5
    mom_window: int = 20


DEFAULT_PARAMS = IndicatorParams()


def compute_vwap(high: float, low: float, close: float) -> float:
    """Typical price (H + L + C) / 3, used as the engine's VWAP column."""
    for v in (high, low, close):
        if not math.isfinite(v):
            raise DomainError(f"non-finite price {v!r}")
    return (high + low + close) / 3


def ema(x: np.ndarray, span: int) -> np.ndarray:
    """Recursive EMA with alpha = 2 / (span + 1), seeded at the first value.

    Written as ``e + a * (x - e)`` so a constant input stays exactly constant.
    """
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    if x.size == 0:
        return out
    a = 2.0 / (span + 1)
    e = x[0]
    out[0] = e
    for t in range(1, x.size):
        e = e + a * (x[t] - e)
        out[t] = e
    return out


def _sign_crossings(diff: np.ndarray, start: int, up: str, down: str) -> list[str | None]:
    """Label strict sign changes of ``diff`` from index ``start`` on."""
    out: list[str | None] = [None] * diff.size
    for t in range(max(start, 1), diff.size):
        prev, cur = diff[t - 1], diff[t]
        if prev < 0 < cur:
            out[t] = up
        elif prev > 0 > cur:
            out[t] = down
    return out


class MACDResult(NamedTuple):
    histogram: np.ndarray
    crossover: list


def compute_macd(adj_close, params: IndicatorParams = DEFAULT_PARAMS) -> MACDResult:
    """MACD histogram and crossover events.

    The histogram is null for the first ``slow - 1`` days.  Crossovers need the
    signal line warmed up as well, so they start at ``slow + signal - 2``.
    """
    x = np.asarray(adj_close, dtype=float)
    n = x.size
    hist = np.full(n, np.nan)
    if n < 2:
        return MACDResult(hist, [None] * n)
    line = ema(x, params.macd_fast) - ema(x, params.macd_slow)
    signal = ema(line, params.macd_signal)
    warm = params.macd_slow - 1
    hist[warm:] = (line - signal)[warm:]
    cross = _sign_crossings(hist, params.macd_slow + params.macd_signal - 2, BULLISH, BEARISH)
    return MACDResult(hist, cross)


class BollingerResult(NamedTuple):
    signal: list
    exceeding_upper: np.ndarray
    exceeding_lower: np.ndarray


def compute_bollinger(adj_close, params: IndicatorParams = DEFAULT_PARAMS) -> BollingerResult:
    x = np.asarray(adj_close, dtype=float)
    n, w = x.size, params.bollinger_window
    upper_gap = np.full(n, np.nan)
    lower_gap = np.full(n, np.nan)
    signal: list[str | None] = [None] * n
    if n >= w:
        windows = np.lib.stride_tricks.sliding_window_view(x, w)
        mid = windows.mean(axis=1)
        band = params.bollinger_k * windows.std(axis=1)
        up = x[w - 1:] - (mid + band)
        lo = (mid - band) - x[w - 1:]
        for i, t in enumerate(range(w - 1, n)):
            if up[i] > 0:
                upper_gap[t] = up[i]
                signal[t] = EXCEED_UPPER
            elif lo[i] > 0:
                lower_gap[t] = lo[i]
                signal[t] = EXCEED_LOWER
    return BollingerResult(signal, upper_gap, lower_gap)


class KDJResult(NamedTuple):
    k: np.ndarray
    d: np.ndarray
    j: np.ndarray
    condition: list
    crossover: list


def compute_kdj(high, low, close, params: IndicatorParams = DEFAULT_PARAMS) -> KDJResult:
    """Stochastic K/D/J with 1/3 smoothing seeded at 50.

    A flat window (max high == min low) gives RSV = 50.
    """
    h, l, c = (np.asarray(a, dtype=float) for a in (high, low, close))
    n, w = c.size, params.kdj_window
    k = np.full(n, np.nan)
    d = np.full(n, np.nan)
    kp = dp = params.kdj_seed
    s = params.kdj_smoothing
    for t in range(w - 1, n):
        hh = h[t - w + 1:t + 1].max()
        ll = l[t - w + 1:t + 1].min()
        rsv = 50.0 if hh == ll else 100.0 * (c[t] - ll) / (hh - ll)
        kp = s * rsv + (1 - s) * kp
        dp = s * kp + (1 - s) * dp
        k[t], d[t] = kp, dp
    j = 3 * k - 2 * d

    condition: list[str | None] = [None] * n
    for t in range(w - 1, n):
        if k[t] > params.overbought_k and d[t] > params.overbought_d and j[t] > params.overbought_j:
            condition[t] = OVERBOUGHT
        elif k[t] < params.oversold_k and d[t] < params.oversold_d and j[t] < params.oversold_j:
            condition[t] = OVERSOLD
    crossover = _sign_crossings(k - d, w, BULLISH, BEARISH)
    return KDJResult(k, d, j, condition, crossover)
