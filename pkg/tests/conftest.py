import random
from datetime import date

import pytest

from stockrag.features import build_feature_table
from stockrag.market import ingest_bars
from stockrag.synthetic import MarketSpec, generate_market, trading_days


def random_panel(n_stocks: int, n_days: int, seed: int) -> dict:
    """Aligned random-walk OHLCV panel: {stock: {field: list}} plus dates."""
    rng = random.Random(seed)
    days = trading_days(date(2020, 1, 6), n_days)
    panel = {}
    for s in range(n_stocks):
        close = rng.uniform(20, 80)
        cols = {f: [] for f in ("open", "high", "low", "close", "volume", "vwap")}
        for _ in days:
            o = close * (1 + rng.gauss(0, 0.01))
            close = close * (1 + rng.gauss(0, 0.02))
            h = max(o, close) * (1 + abs(rng.gauss(0, 0.01)))
            lo = min(o, close) * (1 - abs(rng.gauss(0, 0.01)))
            cols["open"].append(o)
            cols["high"].append(h)
            cols["low"].append(lo)
            cols["close"].append(close)
            cols["volume"].append(float(rng.randint(100_000, 5_000_000)))
            cols["vwap"].append((h + lo + close) / 3)
        panel[f"S{s}"] = cols
    return {"dates": days, "panel": panel}


@pytest.fixture(scope="session")
def market_rows():
    return generate_market(MarketSpec(n_stocks=4, n_days=320, seed=11))


@pytest.fixture(scope="session")
def bars(market_rows):
    return ingest_bars(market_rows)


@pytest.fixture(scope="session")
def table(bars):
    return build_feature_table(bars)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one acceptance criterion's verdict; all verdicts print at the end of the run."""
    results = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")
        results.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(results):
        terminalreporter.write_line(line)
