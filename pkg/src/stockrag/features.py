"""The 34-column feature table and its JSON-lines datastore form."""

from __future__ import annotations

import json
import math
from bisect import bisect_left
from collections.abc import Iterator
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

import numpy as np

from .alphas import ALPHA_COLUMNS, compute_alphas
from .indicators import (
    DEFAULT_PARAMS,
    IndicatorParams,
    compute_bollinger,
    compute_kdj,
    compute_macd,
)
from .market import MOVEMENTS, BarTable, compute_return, label_movement

CORE_COLUMNS = ("open", "high", "low", "close", "adj_close", "volume")
INDICATORS = (
    "movement", *CORE_COLUMNS,
    "macd_histogram", "macd_crossover", "bollinger_bands", "exceeding_upper",
    "exceeding_lower", "overbought_and_oversold_conditions", "kdj_crossover",
    "returns", "VWAP", *ALPHA_COLUMNS,
)
SIGNAL_COLUMNS = frozenset({
    "movement", "macd_crossover", "bollinger_bands",
    "overbought_and_oversold_conditions", "kdj_crossover",
})
NUMERIC_COLUMNS = tuple(c for c in INDICATORS if c not in SIGNAL_COLUMNS)
DATASTORE_FIELDS = ("stock_name", "query_date", *INDICATORS)

assert len(INDICATORS) == 34


@dataclass
class StockFeatures:
    """Columns for one stock; numeric columns are float arrays (NaN = null)."""

    dates: list[date]
    columns: dict[str, object] = field(default_factory=dict)
    _py: dict[str, list] = field(default_factory=dict, repr=False, compare=False)

    def index(self, d: date) -> int:
        i = bisect_left(self.dates, d)
        if i == len(self.dates) or self.dates[i] != d:
            raise KeyError(d)
        return i

    def value(self, name: str, i: int):
        """Python value at row ``i``: float, int, label string or None."""
        v = self.columns[name][i]
        if name in SIGNAL_COLUMNS:
            return v
        v = float(v)
        if math.isnan(v):
            return None
        return int(v) if name == "volume" else v

    def values(self, name: str) -> list:
        """Whole column as Python values; cached, so build the table first."""
        col = self._py.get(name)
        if col is None:
            col = self._py[name] = [self.value(name, i) for i in range(len(self.dates))]
        return col


@dataclass
class FeatureTable:
    stocks: dict[str, StockFeatures] = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(s.dates) for s in self.stocks.values())

    def __getitem__(self, stock: str) -> StockFeatures:
        return self.stocks[stock]

    def calendar(self) -> list[date]:
        """Sorted union of all trading dates in the table."""
        return sorted({d for s in self.stocks.values() for d in s.dates})

    def restrict(self, tickers) -> "FeatureTable":
        keep = set(tickers)
        return FeatureTable({s: f for s, f in self.stocks.items() if s in keep})

    def row(self, stock: str, d: date) -> dict:
        sf = self.stocks[stock]
        i = sf.index(d)
        rec = {"stock_name": stock, "query_date": d.isoformat()}
        for name in INDICATORS:
            rec[name] = sf.value(name, i)
        return rec

    def rows(self) -> Iterator[dict]:
        for stock in sorted(self.stocks):
            for d in self.stocks[stock].dates:
                yield self.row(stock, d)


def build_feature_table(bars: BarTable, params: IndicatorParams = DEFAULT_PARAMS) -> FeatureTable:
    """Join returns, movement, VWAP, MACD, Bollinger, KDJ and alphas per stock.

    ``returns`` are held in percent; :func:`write_datastore` converts them to
    fractions on disk.
    """
    table = FeatureTable()
    panel_dates, panel_fields = {}, {}
    for stock in bars.stocks:
        rows = bars.bars[stock]
        n = len(rows)
        cols: dict[str, object] = {
            name: np.array([getattr(b, name) for b in rows], dtype=float) for name in CORE_COLUMNS
        }
        adj = cols["adj_close"]
        returns = np.full(n, np.nan)
        movement: list[str | None] = [None] * n
        for t in range(1, n):
            returns[t] = compute_return(adj[t], adj[t - 1])
            movement[t] = label_movement(returns[t])
        cols["returns"] = returns
        cols["movement"] = movement
        # vectorised typical price; compute_vwap is the scalar form
        cols["VWAP"] = (cols["high"] + cols["low"] + cols["close"]) / 3

        macd = compute_macd(adj, params)
        cols["macd_histogram"], cols["macd_crossover"] = macd.histogram, macd.crossover
        boll = compute_bollinger(adj, params)
        cols["bollinger_bands"] = boll.signal
        cols["exceeding_upper"], cols["exceeding_lower"] = boll.exceeding_upper, boll.exceeding_lower
        kdj = compute_kdj(cols["high"], cols["low"], cols["close"], params)
        cols["overbought_and_oversold_conditions"] = kdj.condition
        cols["kdj_crossover"] = kdj.crossover

        dates = [b.date for b in rows]
        table.stocks[stock] = StockFeatures(dates, cols)
        panel_dates[stock] = dates
        panel_fields[stock] = {
            "open": cols["open"], "high": cols["high"], "low": cols["low"],
            "close": cols["close"], "volume": cols["volume"], "vwap": cols["VWAP"],
        }

    alphas = compute_alphas(panel_dates, panel_fields, params) if panel_dates else {}
    for stock, cols in alphas.items():
        table.stocks[stock].columns.update(cols)
    return table


def write_datastore(table: FeatureTable, path: str | Path) -> int:
    """Write one JSON record per (stock, date); returns the record count."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in table.rows():
            if rec["returns"] is not None:
                rec["returns"] = rec["returns"] / 100
            fh.write(json.dumps(rec) + "\n")
            n += 1
    return n


def read_datastore(path: str | Path) -> FeatureTable:
    per_stock: dict[str, list[dict]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                per_stock.setdefault(rec["stock_name"], []).append(rec)
    table = FeatureTable()
    for stock, recs in per_stock.items():
        recs.sort(key=lambda r: r["query_date"])
        cols: dict[str, object] = {}
        for name in INDICATORS:
            vals = [r[name] for r in recs]
            if name in SIGNAL_COLUMNS:
                cols[name] = vals
            else:
                cols[name] = np.array([np.nan if v is None else v for v in vals], dtype=float)
        cols["returns"] = cols["returns"] * 100
        for v in cols["movement"]:
            if v is not None and v not in MOVEMENTS:
                raise ValueError(f"{path}: unknown movement {v!r}")
        table.stocks[stock] = StockFeatures([date.fromisoformat(r["query_date"]) for r in recs], cols)
    return table
