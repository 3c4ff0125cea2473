"""Synthetic market with a planted indicator-to-movement rule.

Volume is drawn first (log-normal around a per-stock base).  The return on
day ``d`` then follows :func:`volume_rule` applied to the five volumes before
``d``: rise when the latest volume is above the window mean, fall otherwise.
A fraction of days is flipped against the rule and another fraction is made
a small "freeze" move.  Prices follow the resulting geometric walk.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .market import BAR_FIELDS, PartitionSpec

PLANTED_INDICATOR = "volume"


def volume_rule(window) -> int:
    """+1 when the last value exceeds the window mean, else -1."""
    return 1 if window[-1] > sum(window) / len(window) else -1


@dataclass(frozen=True)
class MarketSpec:
    n_stocks: int = 10
    n_days: int = 500
    start: date = date(2014, 6, 2)
    seed: int = 0
    flip_rate: float = 0.1
    freeze_rate: float = 0.1


def trading_days(start: date, n: int) -> list[date]:
    out, d = [], start
    while len(out) < n:
        if d.weekday() < 5:
            out.append(d)
        d += timedelta(days=1)
    return out


def tickers(n: int) -> list[str]:
    return [f"SYN{i:02d}" for i in range(n)]


def generate_market(spec: MarketSpec = MarketSpec()) -> list[dict]:
    """Rows in the ingest CSV schema, ordered by stock then date."""
    rng = np.random.default_rng(spec.seed)
    days = trading_days(spec.start, spec.n_days)
    rows = []
    for stock in tickers(spec.n_stocks):
        base_vol = rng.uniform(5e5, 5e6)
        vol = np.round(base_vol * np.exp(0.35 * rng.standard_normal(spec.n_days))).astype(int)
        adj_factor = rng.uniform(0.6, 1.0)
        close = rng.uniform(20, 200)
        prev = close
        for t, d in enumerate(days):
            if t > 0:
                u = rng.random()
                if u < spec.freeze_rate:
                    r = rng.uniform(-0.003, 0.003)
                else:
                    sign = volume_rule(vol[t - 5:t]) if t >= 5 else (1 if rng.random() < 0.5 else -1)
                    if u < spec.freeze_rate + spec.flip_rate:
                        sign = -sign
                    r = sign * rng.uniform(0.008, 0.03)
                close = prev * (1 + r)
            open_ = prev * (1 + 0.004 * rng.standard_normal())
            high = max(open_, close) * (1 + abs(0.006 * rng.standard_normal()))
            low = min(open_, close) * (1 - abs(0.006 * rng.standard_normal()))
            rows.append({
                "stock": stock,
                "date": d.isoformat(),
                "open": round(open_, 4),
                "high": round(high, 4),
                "low": round(low, 4),
                "close": round(close, 4),
                "adj_close": round(close * adj_factor, 4),
                "volume": int(vol[t]),
            })
            prev = close
    return rows


def default_partition(n_stocks: int) -> PartitionSpec:
    names = tickers(n_stocks)
    n_train = max(1, round(0.6 * n_stocks))
    n_valid = max(1, round(0.1 * n_stocks)) if n_stocks > 2 else 0
    return PartitionSpec.from_mapping({
        "train": names[:n_train],
        "valid": names[n_train:n_train + n_valid],
        "test": names[n_train + n_valid:],
    })


def write_market_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=BAR_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
