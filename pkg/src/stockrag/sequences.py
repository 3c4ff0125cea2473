"""Query and candidate windows, their JSON form, and the candidate pool.

A query for (stock, d) carries the five adjusted closes before d; its label
is the movement on d.  A candidate for (stock, d, indicator) carries that
indicator's five values before d together with the movement on d.  A pool
"as of" a date holds every candidate dated strictly before it, which is
what keeps retrieval free of look-ahead.
"""

from __future__ import annotations

import json
from bisect import bisect_left
from collections import Counter
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path

from .errors import InsufficientHistory, PoolError
from .features import INDICATORS, FeatureTable
from .market import FALL, RISE

WINDOW = 5
_INDICATOR_SET = frozenset(INDICATORS)


@dataclass(frozen=True)
class Query:
    query_stock: str
    query_date: date
    recent_date_list: tuple[date, ...]
    adjusted_close_list: tuple[float, ...]
    ground_truth: str | None = None

    @property
    def id(self) -> str:
        return f"{self.query_stock}|{self.query_date.isoformat()}"

    def to_dict(self) -> dict:
        return {
            "query_stock": self.query_stock,
            "query_date": self.query_date.isoformat(),
            "recent_date_list": [d.isoformat() for d in self.recent_date_list],
            "adjusted_close_list": list(self.adjusted_close_list),
        }

    @classmethod
    def from_dict(cls, obj: dict, ground_truth: str | None = None) -> "Query":
        return cls(
            obj["query_stock"],
            date.fromisoformat(obj["query_date"]),
            tuple(date.fromisoformat(d) for d in obj["recent_date_list"]),
            tuple(obj["adjusted_close_list"]),
            ground_truth,
        )


@dataclass(frozen=True)
class Candidate:
    candidate_stock: str
    candidate_date: date
    candidate_movement: str
    indicator: str
    recent_date_list: tuple[date, ...]
    value_list: tuple

    def __post_init__(self):
        if self.indicator not in _INDICATOR_SET:
            raise ValueError(f"unknown indicator {self.indicator!r}")

    @property
    def id(self) -> str:
        return f"{self.candidate_stock}|{self.candidate_date.isoformat()}|{self.indicator}"

    @property
    def sort_key(self) -> tuple:
        """Pool order and the secondary key of every ranking tie-break."""
        return (self.candidate_date, self.candidate_stock, self.indicator)

    def to_dict(self) -> dict:
        return {
            "candidate_stock": self.candidate_stock,
            "candidate_date": self.candidate_date.isoformat(),
            "candidate_movement": self.candidate_movement,
            "recent_date_list": [d.isoformat() for d in self.recent_date_list],
            f"{self.indicator}_list": list(self.value_list),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Candidate":
        keys = [k for k in obj if k.endswith("_list") and k != "recent_date_list"]
        if len(keys) != 1:
            raise ValueError(f"candidate must carry exactly one indicator list, got {keys}")
        key = keys[0]
        return cls(
            obj["candidate_stock"],
            date.fromisoformat(obj["candidate_date"]),
            obj["candidate_movement"],
            key[: -len("_list")],
            tuple(date.fromisoformat(d) for d in obj["recent_date_list"]),
            tuple(obj[key]),
        )


def serialize_query(q: Query) -> str:
    return json.dumps(q.to_dict())


def serialize_candidate(c: Candidate) -> str:
    return json.dumps(c.to_dict())


def parse_query(text: str) -> Query:
    return Query.from_dict(json.loads(text))


def parse_candidate(text: str) -> Candidate:
    return Candidate.from_dict(json.loads(text))


def build_query(stock: str, d: date, table: FeatureTable) -> Query | None:
    """Build the query for ``stock`` on ``d``; ``None`` when ``d`` is a freeze day.

    Raises :class:`InsufficientHistory` when fewer than five earlier trading
    days exist.
    """
    sf = table[stock]
    i = sf.index(d)
    if i < WINDOW:
        raise InsufficientHistory(f"{stock} {d}: {i} prior trading days, need {WINDOW}")
    truth = sf.columns["movement"][i]
    if truth not in (RISE, FALL):
        return None
    adj = sf.columns["adj_close"]
    return Query(
        stock, d,
        tuple(sf.dates[i - WINDOW:i]),
        tuple(float(adj[j]) for j in range(i - WINDOW, i)),
        truth,
    )


def one_year_after(d: date) -> date:
    try:
        return d.replace(year=d.year + 1)
    except ValueError:  # 29 February
        return d.replace(year=d.year + 1, day=28)


def enumerate_queries(table: FeatureTable, tickers: Iterable[str], dataset_start: date) -> list[Query]:
    """All rise/fall queries dated strictly after the one-year anniversary of
    ``dataset_start``, ordered by (date, stock)."""
    first_allowed = one_year_after(dataset_start) + timedelta(days=1)
    out = []
    for stock in tickers:
        if stock not in table.stocks:
            continue
        sf = table[stock]
        for i in range(bisect_left(sf.dates, first_allowed), len(sf.dates)):
            if i < WINDOW:
                continue
            q = build_query(stock, sf.dates[i], table)
            if q is not None:
                out.append(q)
    out.sort(key=lambda q: (q.query_date, q.query_stock))
    return out


def candidates_on(table: FeatureTable, stock: str, i: int) -> list[Candidate]:
    """Every complete candidate for row ``i`` of ``stock``."""
    sf = table[stock]
    if i < WINDOW:
        return []
    movement = sf.columns["movement"][i]
    if movement is None:
        return []
    dates = tuple(sf.dates[i - WINDOW:i])
    out = []
    for name in INDICATORS:
        values = tuple(sf.values(name)[i - WINDOW:i])
        if None in values:
            continue
        out.append(Candidate(stock, sf.dates[i], movement, name, dates, values))
    return out


def _candidates_between(table: FeatureTable, lo: date, hi: date) -> list[Candidate]:
    """Candidates with ``lo <= candidate_date < hi``, in pool order."""
    out = []
    for stock in table.stocks:
        sf = table[stock]
        for i in range(bisect_left(sf.dates, lo), bisect_left(sf.dates, hi)):
            out.extend(candidates_on(table, stock, i))
    out.sort(key=lambda c: c.sort_key)
    return out


@dataclass
class CandidatePool:
    """Append-only, date-ordered candidate store.

    ``as_of`` is the high-water mark: every candidate satisfies
    ``dataset_start <= candidate_date < as_of``.
    """

    dataset_start: date
    as_of: date
    candidates: list[Candidate] = field(default_factory=list)

    def __post_init__(self):
        self._dates = [c.candidate_date for c in self.candidates]

    def __len__(self) -> int:
        return len(self.candidates)

    def __iter__(self) -> Iterator[Candidate]:
        return iter(self.candidates)

    def visible_count(self, query_date: date) -> int:
        return bisect_left(self._dates, query_date)

    def view(self, query_date: date) -> Sequence[Candidate]:
        """Candidates a query dated ``query_date`` may see."""
        return self.candidates[: self.visible_count(query_date)]

    def counts(self) -> dict[str, int]:
        return dict(sorted(Counter(c.indicator for c in self.candidates).items()))

    def manifest(self) -> dict:
        return {
            "dataset_start": self.dataset_start.isoformat(),
            "high_water": self.as_of.isoformat(),
            "count": len(self),
            "indicator_counts": self.counts(),
        }


def build_pool(table: FeatureTable, as_of: date, dataset_start: date) -> CandidatePool:
    lo = dataset_start
    cands = _candidates_between(table, lo, as_of) if as_of > lo else []
    return CandidatePool(dataset_start, as_of, cands)


def next_trading_day(table: FeatureTable, d: date) -> date | None:
    cal = table.calendar()
    i = bisect_left(cal, d)
    if i < len(cal) and cal[i] == d:
        i += 1
    return cal[i] if i < len(cal) else None


def advance_pool(pool: CandidatePool, table: FeatureTable, new_day: date) -> CandidatePool:
    """Move the high-water mark to ``new_day`` and append the days in between.

    ``new_day`` must be the pool's current high-water date (a no-op) or the
    first trading day after it.  The old pool is left untouched.
    """
    if new_day == pool.as_of:
        return pool
    expected = next_trading_day(table, pool.as_of)
    if new_day != expected:
        raise PoolError(
            f"cannot advance pool from {pool.as_of} to {new_day}; next trading day is {expected}"
        )
    lo = max(pool.as_of, pool.dataset_start)
    added = _candidates_between(table, lo, new_day)
    return CandidatePool(pool.dataset_start, new_day, pool.candidates + added)


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".manifest.json")


def save_pool(pool: CandidatePool, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in pool.candidates:
            fh.write(serialize_candidate(c) + "\n")
    with open(manifest_path(path), "w", encoding="utf-8") as fh:
        json.dump(pool.manifest(), fh, indent=2)
        fh.write("\n")


def load_pool(path: str | Path) -> CandidatePool:
    with open(manifest_path(path), encoding="utf-8") as fh:
        man = json.load(fh)
    with open(path, encoding="utf-8") as fh:
        cands = [parse_candidate(line) for line in fh if line.strip()]
    if len(cands) != man["count"]:
        raise PoolError(f"{path}: manifest says {man['count']} candidates, file has {len(cands)}")
    return CandidatePool(date.fromisoformat(man["dataset_start"]), date.fromisoformat(man["high_water"]), cands)


def save_queries(queries: Iterable[Query], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for q in queries:
            fh.write(json.dumps({**q.to_dict(), "ground_truth": q.ground_truth}) + "\n")
            n += 1
    return n


def load_queries(path: str | Path) -> list[Query]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out.append(Query.from_dict(obj, obj.get("ground_truth")))
    return out
