"""The 18 alpha factors kept in the feature table.

Sixteen follow the formulaic-alpha reference definitions verbatim; the
remaining two (``alpha_smr`` and ``alpha_mom``) are local short-term reversal
and momentum factors.  Time-series operators run per stock over that stock's
own trading days; ``rank`` and ``scale`` run cross-sectionally per date.

Conventions:
  * ``stddev`` is the sample standard deviation (ddof=1).
  * ``correlation`` is Pearson over the window; a flat window gives null.
  * ``rank`` is the average-tie fractional rank in (0, 1] among stocks with
    a non-null value on that date.
  * ``scale`` divides by the cross-sectional sum of absolute values.
  * Division by zero and any other non-finite result is null.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from datetime import date

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.stats import rankdata

from .indicators import DEFAULT_PARAMS, IndicatorParams

logger = logging.getLogger(__name__)

ALPHA_COLUMNS = (
    "alpha_smr", "alpha_mom", "alpha_002", "alpha_006", "alpha_009", "alpha_012",
    "alpha_021", "alpha_023", "alpha_024", "alpha_028", "alpha_032", "alpha_041",
    "alpha_046", "alpha_049", "alpha_051", "alpha_053", "alpha_054", "alpha_101",
)
CROSS_SECTIONAL = ("alpha_002", "alpha_028", "alpha_032")

PANEL_FIELDS = ("open", "high", "low", "close", "volume", "vwap")


class _Panel:
    """Stock-major concatenation of per-stock series with a shared date grid."""

    def __init__(self, dates: Mapping[str, Sequence[date]], fields: Mapping[str, Mapping[str, np.ndarray]]):
        self.stocks = sorted(dates)
        calendar = sorted({d for s in self.stocks for d in dates[s]})
        pos = {d: i for i, d in enumerate(calendar)}
        self.n_dates = len(calendar)
        self.segments = []
        rows, cols = [], []
        start = 0
        for si, s in enumerate(self.stocks):
            n = len(dates[s])
            self.segments.append((start, start + n))
            rows.extend(pos[d] for d in dates[s])
            cols.extend([si] * n)
            start += n
        self.size = start
        self.rows = np.asarray(rows, dtype=int)
        self.cols = np.asarray(cols, dtype=int)
        self.data = {
            f: np.concatenate([np.asarray(fields[s][f], dtype=float) for s in self.stocks])
            if self.stocks else np.empty(0)
            for f in PANEL_FIELDS
        }

    def __call__(self, name: str) -> np.ndarray:
        return self.data[name]

    def split(self, x: np.ndarray) -> dict[str, np.ndarray]:
        return {s: x[a:b] for s, (a, b) in zip(self.stocks, self.segments)}

    # time-series operators

    def _rolling(self, x: np.ndarray, w: int, fn) -> np.ndarray:
        out = np.full(self.size, np.nan)
        for a, b in self.segments:
            if b - a >= w:
                out[a + w - 1:b] = fn(sliding_window_view(x[a:b], w))
        return out

    def ts_sum(self, x, w):
        return self._rolling(x, w, lambda v: v.sum(axis=1))

    def ts_mean(self, x, w):
        return self._rolling(x, w, lambda v: v.mean(axis=1))

    def ts_std(self, x, w):
        return self._rolling(x, w, lambda v: v.std(axis=1, ddof=1))

    def ts_min(self, x, w):
        return self._rolling(x, w, lambda v: v.min(axis=1))

    def ts_max(self, x, w):
        return self._rolling(x, w, lambda v: v.max(axis=1))

    def delay(self, x, k):
        out = np.full(self.size, np.nan)
        for a, b in self.segments:
            if b - a > k:
                out[a + k:b] = x[a:b - k]
        return out

    def delta(self, x, k):
        return x - self.delay(x, k)

    def correlation(self, x, y, w):
        out = np.full(self.size, np.nan)
        for a, b in self.segments:
            if b - a < w:
                continue
            xv = sliding_window_view(x[a:b], w)
            yv = sliding_window_view(y[a:b], w)
            xc = xv - xv.mean(axis=1, keepdims=True)
            yc = yv - yv.mean(axis=1, keepdims=True)
            denom = np.sqrt((xc * xc).sum(axis=1) * (yc * yc).sum(axis=1))
            flat = (np.ptp(xv, axis=1) == 0) | (np.ptp(yv, axis=1) == 0)
            with np.errstate(invalid="ignore", divide="ignore"):
                r = (xc * yc).sum(axis=1) / denom
            r[flat] = np.nan
            out[a + w - 1:b] = r
        return out

    # cross-sectional operators

    def _grid(self, x):
        grid = np.full((self.n_dates, len(self.stocks)), np.nan)
        grid[self.rows, self.cols] = x
        return grid

    def rank(self, x):
        grid = self._grid(x)
        ranked = np.full_like(grid, np.nan)
        for t in range(self.n_dates):
            ok = np.isfinite(grid[t])
            m = int(ok.sum())
            if m:
                ranked[t, ok] = rankdata(grid[t, ok], method="average") / m
        return ranked[self.rows, self.cols]

    def scale(self, x):
        grid = self._grid(x)
        out = np.full_like(grid, np.nan)
        for t in range(self.n_dates):
            ok = np.isfinite(grid[t])
            total = np.abs(grid[t, ok]).sum()
            if ok.any() and total > 0:
                out[t, ok] = grid[t, ok] / total
        return out[self.rows, self.cols]


def _alpha_formulas(p: _Panel, params: IndicatorParams) -> dict[str, np.ndarray]:
    o, h, l, c, v, vwap = (p(f) for f in PANEL_FIELDS)
    adv20 = p.ts_mean(v, 20)
    d1 = p.delta(c, 1)
    out: dict[str, np.ndarray] = {}
    with np.errstate(divide="ignore", invalid="ignore"):
        out["alpha_smr"] = -(c / p.delay(c, params.smr_window) - 1)
        out["alpha_mom"] = c / p.delay(c, params.mom_window) - 1
        out["alpha_002"] = -1 * p.correlation(p.rank(p.delta(np.log(v), 2)), p.rank((c - o) / o), 6)
        out["alpha_006"] = -1 * p.correlation(o, v, 10)

        lo5, hi5 = p.ts_min(d1, 5), p.ts_max(d1, 5)
        a9 = np.where(0 < lo5, d1, np.where(hi5 < 0, d1, -d1))
        a9[np.isnan(lo5) | np.isnan(hi5)] = np.nan
        out["alpha_009"] = a9

        out["alpha_012"] = np.sign(p.delta(v, 1)) * (-1 * d1)

        m8, s8, m2 = p.ts_sum(c, 8) / 8, p.ts_std(c, 8), p.ts_sum(c, 2) / 2
        ratio = v / adv20
        a21 = np.where(m8 + s8 < m2, -1.0, np.where(m2 < m8 - s8, 1.0, np.where((1 < ratio) | (ratio == 1), 1.0, -1.0)))
        a21[np.isnan(m8) | np.isnan(s8) | np.isnan(m2) | np.isnan(ratio)] = np.nan
        out["alpha_021"] = a21

        m20h = p.ts_sum(h, 20) / 20
        a23 = np.where(m20h < h, -1 * p.delta(h, 2), 0.0)
        a23[np.isnan(m20h)] = np.nan
        out["alpha_023"] = a23

        drift = p.delta(p.ts_sum(c, 100) / 100, 100) / p.delay(c, 100)
        a24 = np.where((drift < 0.05) | (drift == 0.05), -1 * (c - p.ts_min(c, 100)), -1 * p.delta(c, 3))
        a24[np.isnan(drift)] = np.nan
        out["alpha_024"] = a24

        out["alpha_028"] = p.scale(p.correlation(adv20, l, 5) + (h + l) / 2 - c)
        out["alpha_032"] = p.scale(p.ts_sum(c, 7) / 7 - c) + 20 * p.scale(p.correlation(vwap, p.delay(c, 5), 230))
        out["alpha_041"] = np.sqrt(h * l) - vwap

        slope = (p.delay(c, 20) - p.delay(c, 10)) / 10 - (p.delay(c, 10) - c) / 10
        a46 = np.where(0.25 < slope, -1.0, np.where(slope < 0, 1.0, -1 * d1))
        a49 = np.where(slope < -0.1, 1.0, -1 * d1)
        a51 = np.where(slope < -0.05, 1.0, -1 * d1)
        for a in (a46, a49, a51):
            a[np.isnan(slope)] = np.nan
        out["alpha_046"], out["alpha_049"], out["alpha_051"] = a46, a49, a51

        out["alpha_053"] = -1 * p.delta(((c - l) - (h - c)) / (c - l), 9)
        out["alpha_054"] = (-1 * ((l - c) * o ** 5)) / ((l - h) * c ** 5)
        out["alpha_101"] = (c - o) / ((h - l) + 0.001)
    for a in out.values():
        a[~np.isfinite(a)] = np.nan
    return out


def compute_alphas(
    dates: Mapping[str, Sequence[date]],
    fields: Mapping[str, Mapping[str, np.ndarray]],
    params: IndicatorParams = DEFAULT_PARAMS,
) -> dict[str, dict[str, np.ndarray]]:
    """Compute all alpha columns for a panel.

    ``dates[stock]`` lists the stock's trading days in order and
    ``fields[stock]`` maps open/high/low/close/volume/vwap to aligned arrays.
    Returns ``{stock: {alpha_name: array}}`` with NaN for null.
    """
    panel = _Panel(dates, fields)
    columns = _alpha_formulas(panel, params)
    if len(panel.stocks) < 2:
        logger.warning("panel has %d stock(s); cross-sectional alphas %s are null",
                       len(panel.stocks), ", ".join(CROSS_SECTIONAL))
        for name in CROSS_SECTIONAL:
            columns[name][:] = np.nan
    per_stock = {name: panel.split(columns[name]) for name in ALPHA_COLUMNS}
    return {s: {name: per_stock[name][s] for name in ALPHA_COLUMNS} for s in panel.stocks}
