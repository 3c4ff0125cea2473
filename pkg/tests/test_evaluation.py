import json
import math
import random
from datetime import date, timedelta

import mpmath
import numpy as np
import pytest

import oracles
from stockrag.errors import DomainError, ForecasterError
from stockrag.evaluation import (
    ABSTAIN,
    NoRetriever,
    RandomRetriever,
    accuracy,
    confusion,
    indicator_hit_rate,
    indicator_occurrences,
    mcc,
    mcc_from_confusion,
    mi_report,
    movement_prediction_correlation,
    mutual_information,
    normalize_scores,
    parse_prediction,
    pearson,
    read_logs,
    run_experiment,
    select_top,
    summarize,
    write_report,
)
from stockrag.scorer import load_template
from stockrag.sequences import Candidate, CandidatePool, Query


def window(d):
    return tuple(d - timedelta(days=k) for k in range(5, 0, -1))


def make_pool(n=120):
    rng = random.Random(0)
    cands = []
    for i in range(n):
        d = date(2015, 1, 1) + timedelta(days=i // 4)
        cands.append(Candidate(f"S{i % 4}", d, rng.choice(["rise", "fall", "freeze"]),
                               rng.choice(["close", "volume", "high", "alpha_009"]), window(d),
                               tuple(rng.uniform(1, 9) for _ in range(5))))
    cands.sort(key=lambda c: c.sort_key)
    return CandidatePool(date(2015, 1, 1), date(2015, 1, 1) + timedelta(days=n // 4), cands)


def make_queries(n=12):
    rng = random.Random(1)
    out = []
    for i in range(n):
        d = date(2015, 1, 10) + timedelta(days=i)
        out.append(Query(f"S{i % 4}", d, window(d), tuple(rng.uniform(1, 9) for _ in range(5)),
                         rng.choice(["rise", "fall"])))
    return out


class CountingForecaster:
    def __init__(self, fail_after=None):
        self.calls = 0
        self.fail_after = fail_after

    def logits(self, prompt):
        self.calls += 1
        if self.fail_after is not None and self.calls > self.fail_after:
            raise ForecasterError("service unavailable")
        up = prompt.count('"candidate_movement": "rise"')
        return {"rise": float(up), "fall": 1.0}


# -- ACC / MCC ----------------------------------------------------------------------


def test_accuracy_examples():
    assert accuracy(["rise"] * 4, ["rise"] * 4) == 1.0
    assert accuracy(["rise", "fall"], ["fall", "rise"]) == 0.0
    assert accuracy(["rise", "fall", "rise", "rise", ABSTAIN], ["rise", "fall", "rise", "fall", "fall"]) == 0.6
    with pytest.raises(DomainError):
        accuracy(["rise"], ["rise", "fall"])
    with pytest.raises(DomainError):
        mcc([], [])


def test_mcc_examples():
    assert mcc(["rise", "fall", "fall"], ["rise", "fall", "fall"]) == 1.0
    assert mcc(["rise"] * 4, ["rise", "fall", "rise", "fall"]) == 0.0
    assert abs(mcc_from_confusion(3, 4, 2, 1) - 10 / math.sqrt(600)) <= 1e-12


def test_abstain_folds_into_wrong_class():
    assert confusion([ABSTAIN, ABSTAIN], ["rise", "fall"]) == (0, 0, 1, 1)


def test_mcc_equals_pearson_of_binaries():
    rng = random.Random(0)
    for _ in range(1000):
        n = rng.randint(2, 40)
        labels = [rng.choice(["rise", "fall"]) for _ in range(n)]
        preds = [rng.choice(["rise", "fall"]) for _ in range(n)]
        a = [p == "rise" for p in preds]
        b = [y == "rise" for y in labels]
        assert abs(mcc(preds, labels) - oracles.pearson_binary(a, b)) <= 1e-10


def test_parse_prediction():
    assert parse_prediction("I think it will Rise tomorrow") == "rise"
    assert parse_prediction("fall, then rise") == "fall"
    assert parse_prediction("rising prices") == ABSTAIN
    assert parse_prediction("") == ABSTAIN


# -- correlation ------------------------------------------------------------------------


def mp_pearson(x, y):
    mpmath.mp.dps = 60
    x = [mpmath.mpf(v) for v in x]
    y = [mpmath.mpf(v) for v in y]
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    r = sxy / mpmath.sqrt(sxx * syy)
    df = n - 2
    t2 = r * r * df / (1 - r * r)
    p = mpmath.betainc(mpmath.mpf(df) / 2, mpmath.mpf(1) / 2, 0, df / (df + t2), regularized=True)
    return float(r), float(p)


def test_pearson_vs_high_precision():
    rng = np.random.default_rng(4)
    x = rng.normal(size=50)
    y = 0.3 * x + rng.normal(size=50)
    r, p = pearson(x, y)
    want_r, want_p = mp_pearson(x.tolist(), y.tolist())
    assert abs(r - want_r) <= 1e-10
    assert abs(p - want_p) <= 1e-10


def test_pearson_degenerate():
    assert pearson([1, 2, 3], [1, 2, 3])[0] == pytest.approx(1.0)
    assert pearson([1, 2, 3], [3, 2, 1])[0] == pytest.approx(-1.0)
    assert pearson([1, 1, 1], [1, 2, 3]) == (None, None)
    assert pearson([1, 2], [1, 2]) == (None, None)


def test_movement_prediction_correlation():
    logs = [{"retrieved": [{"movement": m}], "prediction": p}
            for m, p in [("rise", "rise"), ("fall", "fall"), ("freeze", ABSTAIN), ("rise", "rise")]]
    r, _ = movement_prediction_correlation(logs)
    assert r == pytest.approx(1.0)


# -- mutual information -------------------------------------------------------------------


def test_mi_two_by_two_closed_form():
    cells = {(0, 0): 30, (0, 1): 10, (1, 0): 20, (1, 1): 40}
    x, y = [], []
    for (a, b), n in cells.items():
        x += [a] * n
        y += [b] * n
    total = sum(cells.values())
    px = {a: sum(v for (i, _), v in cells.items() if i == a) / total for a in (0, 1)}
    py = {b: sum(v for (_, j), v in cells.items() if j == b) / total for b in (0, 1)}
    want = sum(n / total * math.log((n / total) / (px[a] * py[b])) for (a, b), n in cells.items())
    assert abs(mutual_information(x, y) - want) <= 1e-12


def test_mi_independent_is_small():
    rng = np.random.default_rng(0)
    x, y = rng.uniform(size=10_000), rng.uniform(size=10_000)
    assert mutual_information(x, y) < 0.02


def test_mi_identity_is_entropy_and_maximal():
    rng = np.random.default_rng(1)
    y = rng.normal(size=4000)
    mi_self = mutual_information(y, y)
    assert mi_self == pytest.approx(math.log(16), rel=1e-9)
    others = {"self": y, "noisy": y + rng.normal(size=4000), "indep": rng.normal(size=4000)}
    assert select_top(others, y, 1) == ["self"]


def test_mi_edge_cases():
    assert mutual_information(np.ones(100), np.arange(100)) == 0.0
    with pytest.raises(DomainError):
        mutual_information(np.arange(49), np.arange(49))
    with pytest.raises(DomainError):
        mutual_information(np.arange(60), np.arange(60), estimator="magic")
    assert normalize_scores({"a": 1.0, "b": 3.0, "c": 2.0}) == {"a": 0.0, "b": 1.0, "c": 0.5}
    assert normalize_scores({"a": 2.0, "b": 2.0}) == {"a": 0.0, "b": 0.0}


def test_mi_knn_estimator_runs():
    rng = np.random.default_rng(2)
    x = rng.normal(size=500)
    assert mutual_information(x, x + 0.1 * rng.normal(size=500), estimator="knn") > 1.0


def test_mi_report_on_table(table):
    rep = mi_report(table, top=5)
    assert len(rep["selected"]) == 5
    norm = [v["normalized"] for v in rep["scores"].values()]
    assert max(norm) == 1.0 and min(norm) == 0.0
    assert list(rep["scores"])[:5] == rep["selected"]


# -- logs and experiments ---------------------------------------------------------------


def test_occurrences():
    logs = [{"retrieved": [{"indicator": "adj_close"}] * 5}]
    assert indicator_occurrences(logs) == {"adj_close": 5}
    assert indicator_occurrences([]) == {}
    assert indicator_hit_rate(logs, "adj_close") == 1.0
    assert indicator_hit_rate([], "adj_close") == 0.0


def test_no_retrieval_mode():
    f = CountingForecaster()
    report, logs = run_experiment(make_queries(), NoRetriever(), f, load_template("bare"), k=5)
    assert report.k == 0 and all(log["retrieved"] == [] for log in logs)
    assert f.calls == len(logs) == report.queries


def test_experiment_sum_law_and_temporal_safety(tmp_path):
    pool = make_pool()
    qs = make_queries()
    report, logs = run_experiment(qs, RandomRetriever(pool, seed=3), CountingForecaster(), load_template("rag"),
                                  k=5, log_path=tmp_path / "log.jsonl")
    full = all(len(log["retrieved"]) == 5 for log in logs)
    assert full
    assert sum(report.occurrences.values()) == report.queries * report.k
    for q, log in zip(qs, logs):
        for r in log["retrieved"]:
            assert date.fromisoformat(r["id"].split("|")[1]) < q.query_date
    assert read_logs(tmp_path / "log.jsonl") == logs


def test_parallel_matches_serial():
    pool = make_pool()
    qs = make_queries(20)
    a = run_experiment(qs, RandomRetriever(pool, 1), CountingForecaster(), load_template("rag"))
    b = run_experiment(qs, RandomRetriever(pool, 1), CountingForecaster(), load_template("rag"), max_workers=4)
    assert a == b


def test_partial_log_on_forecaster_failure(tmp_path):
    path = tmp_path / "log.jsonl"
    with pytest.raises(ForecasterError):
        run_experiment(make_queries(), RandomRetriever(make_pool(), 0), CountingForecaster(fail_after=4),
                       load_template("rag"), log_path=path)
    assert len(read_logs(path)) == 4


def test_report_deterministic_from_log(tmp_path):
    report, logs = run_experiment(make_queries(), RandomRetriever(make_pool(), 7), CountingForecaster(),
                                  load_template("rag"), log_path=tmp_path / "log.jsonl")
    again = summarize(read_logs(tmp_path / "log.jsonl"), report.retriever, report.k)
    assert again == report
    write_report(report, tmp_path / "a.json", tmp_path / "a.csv")
    write_report(again, tmp_path / "b.json", tmp_path / "b.csv")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == "indicator,count"
    assert json.loads((tmp_path / "a.json").read_text())["queries"] == len(logs)
