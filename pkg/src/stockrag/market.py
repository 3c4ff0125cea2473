"""Daily bar ingestion, returns, movement labels and stock-wise partitions."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

from .errors import DataError, DomainError, PartitionError

logger = logging.getLogger(__name__)

BAR_FIELDS = ("stock", "date", "open", "high", "low", "close", "adj_close", "volume")
PRICE_FIELDS = ("open", "high", "low", "close", "adj_close")

RISE, FALL, FREEZE = "rise", "fall", "freeze"
MOVEMENTS = (RISE, FALL, FREEZE)

RISE_THRESHOLD = 0.55
FALL_THRESHOLD = -0.5

SPLITS = ("train", "valid", "test")


@dataclass(frozen=True)
class Bar:
    stock: str
    date: date
    open: float
    high: float
    low: float
    close: float
    adj_close: float
    volume: int

    @property
    def is_anomalous(self) -> bool:
        """True when the OHLC range does not contain open and close."""
        lo, hi = min(self.open, self.close), max(self.open, self.close)
        return not (self.low <= lo <= hi <= self.high)


@dataclass
class BarTable:
    """Bars grouped per stock, each list strictly increasing in date."""

    bars: dict[str, list[Bar]] = field(default_factory=dict)
    anomalies: list[tuple[str, date]] = field(default_factory=list)

    @property
    def stocks(self) -> list[str]:
        return sorted(self.bars)

    def __len__(self) -> int:
        return sum(len(v) for v in self.bars.values())

    def __iter__(self):
        for stock in self.stocks:
            yield from self.bars[stock]

    def restrict(self, tickers: Iterable[str]) -> "BarTable":
        keep = set(tickers)
        return BarTable(
            {s: b for s, b in self.bars.items() if s in keep},
            [a for a in self.anomalies if a[0] in keep],
        )


def _parse_field(row: Mapping[str, object], name: str, index: int):
    if name not in row or row[name] is None or str(row[name]).strip() == "":
        raise DataError(f"row {index}: missing field {name!r}")
    raw = row[name]
    try:
        if name == "stock":
            return str(raw).strip()
        if name == "date":
            return raw if isinstance(raw, date) else date.fromisoformat(str(raw).strip())
        if name == "volume":
            vol = float(raw)
            if not math.isfinite(vol) or vol < 0 or vol != int(vol):
                raise ValueError
            return int(vol)
        value = float(raw)
    except (TypeError, ValueError):
        raise DataError(f"row {index}: malformed field {name!r}: {raw!r}") from None
    if not math.isfinite(value) or value <= 0:
        raise DataError(f"row {index}: field {name!r} must be a positive price, got {raw!r}")
    return value


def ingest_bars(source: Iterable[Mapping[str, object]]) -> BarTable:
    """Validate a stream of records and group them into a :class:`BarTable`.

    Rows whose OHLC values are internally inconsistent are kept but recorded
    in ``BarTable.anomalies``.
    """
    table = BarTable()
    seen: set[tuple[str, date]] = set()
    for index, row in enumerate(source):
        values = {name: _parse_field(row, name, index) for name in BAR_FIELDS}
        bar = Bar(**values)
        key = (bar.stock, bar.date)
        if key in seen:
            raise DataError(f"duplicate bar for stock={bar.stock!r} date={bar.date.isoformat()}")
        seen.add(key)
        table.bars.setdefault(bar.stock, []).append(bar)
        if bar.is_anomalous:
            table.anomalies.append(key)
    for stock in table.bars:
        table.bars[stock].sort(key=lambda b: b.date)
    if table.anomalies:
        logger.warning("%d bars have inconsistent OHLC ranges", len(table.anomalies))
    return table


def read_bars_csv(path: str | Path) -> BarTable:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [f for f in BAR_FIELDS if f not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: header lacks columns {missing}")
        return ingest_bars(reader)


def write_bars_jsonl(table: BarTable, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for bar in table:
            rec = {
                "stock": bar.stock,
                "date": bar.date.isoformat(),
                **{f: getattr(bar, f) for f in PRICE_FIELDS},
                "volume": bar.volume,
            }
            fh.write(json.dumps(rec) + "\n")


def read_bars_jsonl(path: str | Path) -> BarTable:
    with open(path, encoding="utf-8") as fh:
        return ingest_bars(json.loads(line) for line in fh if line.strip())


def compute_return(adj_close_d: float, adj_close_prev: float) -> float:
    """Percentage change from the previous adjusted close."""
    if not adj_close_prev > 0:
        raise DomainError(f"previous price must be positive, got {adj_close_prev!r}")
    return (adj_close_d - adj_close_prev) / adj_close_prev * 100


def label_movement(return_pct: float) -> str:
    """Map a percent return to rise / fall / freeze.

    Both thresholds are inclusive on the freeze side, so -0.5 and 0.55 are
    freeze.
    """
    if not math.isfinite(return_pct):
        raise DomainError(f"return must be finite, got {return_pct!r}")
    if return_pct > RISE_THRESHOLD:
        return RISE
    if return_pct < FALL_THRESHOLD:
        return FALL
    return FREEZE


@dataclass(frozen=True)
class PartitionSpec:
    splits: dict[str, tuple[str, ...]]

    def __post_init__(self):
        unknown = set(self.splits) - set(SPLITS)
        if unknown:
            raise PartitionError(f"unknown split names {sorted(unknown)}")
        owner: dict[str, str] = {}
        for name, tickers in self.splits.items():
            for t in tickers:
                if t in owner and owner[t] != name:
                    raise PartitionError(f"ticker {t!r} appears in both {owner[t]!r} and {name!r}")
                owner[t] = name

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Iterable[str]]) -> "PartitionSpec":
        return cls({k: tuple(v) for k, v in mapping.items()})

    @classmethod
    def load(cls, path: str | Path) -> "PartitionSpec":
        with open(path, encoding="utf-8") as fh:
            return cls.from_mapping(json.load(fh))

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({k: list(v) for k, v in self.splits.items()}, fh, indent=2)
            fh.write("\n")

    def tickers(self, split: str) -> tuple[str, ...]:
        return self.splits.get(split, ())

    @property
    def universe(self) -> set[str]:
        return {t for ts in self.splits.values() for t in ts}


def partition_universe(tickers: Iterable[str], spec: PartitionSpec) -> dict[str, str]:
    owner = {t: name for name, ts in spec.splits.items() for t in ts}
    out = {}
    for t in tickers:
        if t not in owner:
            raise PartitionError(f"ticker {t!r} is not assigned to any split")
        out[t] = owner[t]
    return out


def builtin_partition(name: str) -> PartitionSpec:
    """Stock-wise partitions shipped with the package (acl18, bigdata22, stock23)."""
    path = Path(__file__).parent / "data" / f"partition_{name.lower()}.json"
    if not path.exists():
        raise PartitionError(f"no built-in partition named {name!r}")
    return PartitionSpec.load(path)
