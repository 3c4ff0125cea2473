"""Metrics, mutual-information feature selection and retrieval experiments."""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import Counter
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .baselines import dtw_to_many, rank_by_distance, retrieve_random
from .errors import DomainError, ForecasterError
from .features import NUMERIC_COLUMNS, SIGNAL_COLUMNS, FeatureTable
from .forecasters import Forecaster, predict_text
from .market import FALL, FREEZE, RISE
from .retriever import retrieve_topk
from .scorer import assemble_prompt
from .sequences import CandidatePool, Query

logger = logging.getLogger(__name__)

ABSTAIN = "abstain"
MOVEMENT_VALUE = {RISE: 1, FREEZE: 0, FALL: -1, ABSTAIN: 0}


# -- classification metrics ---------------------------------------------------


def _check_pairs(predictions, labels):
    if len(predictions) != len(labels):
        raise DomainError(f"{len(predictions)} predictions vs {len(labels)} labels")
    if not labels:
        raise DomainError("no predictions to score")


def accuracy(predictions: Sequence[str], labels: Sequence[str]) -> float:
    """Fraction correct; abstentions count as wrong."""
    _check_pairs(predictions, labels)
    return sum(p == y for p, y in zip(predictions, labels)) / len(labels)


def confusion(predictions: Sequence[str], labels: Sequence[str]) -> tuple[int, int, int, int]:
    """(TP, TN, FP, FN) with rise as the positive class.

    An abstention is scored as the class opposite to the label.
    """
    tp = tn = fp = fn = 0
    for p, y in zip(predictions, labels):
        if p not in (RISE, FALL):
            p = FALL if y == RISE else RISE
        if y == RISE:
            tp += p == RISE
            fn += p == FALL
        else:
            tn += p == FALL
            fp += p == RISE
    return tp, tn, fp, fn


def mcc_from_confusion(tp: int, tn: int, fp: int, fn: int) -> float:
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(denom)


def mcc(predictions: Sequence[str], labels: Sequence[str]) -> float:
    _check_pairs(predictions, labels)
    return mcc_from_confusion(*confusion(predictions, labels))


def parse_prediction(text: str) -> str:
    """First of 'rise' / 'fall' appearing as a word in ``text``, else abstain."""
    m = re.search(r"\b(rise|fall)\b", text, flags=re.IGNORECASE)
    return m.group(1).lower() if m else ABSTAIN


# -- mutual information ---------------------------------------------------------


def _discretize(x: np.ndarray, bins: int) -> np.ndarray:
    values, codes = np.unique(x, return_inverse=True)
    if values.size <= bins:
        return codes
    ranks = stats.rankdata(x, method="min")
    return np.floor((ranks - 1) * bins / x.size).astype(int)


def mutual_information(feature, target, bins: int = 16, estimator: str = "binned", seed: int = 0) -> float:
    """Mutual information in nats.

    ``binned`` discretises each axis into equal-frequency bins (or uses the
    raw categories when there are no more than ``bins`` distinct values) and
    applies the plug-in estimator.  ``knn`` delegates to scikit-learn's
    nearest-neighbour estimator.
    """
    x = np.asarray(feature, dtype=float)
    y = np.asarray(target, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DomainError("feature and target must be 1-D arrays of equal length")
    if x.size < 50:
        raise DomainError(f"need at least 50 samples, got {x.size}")
    if np.ptp(x) == 0:
        return 0.0
    if estimator == "knn":
        from sklearn.feature_selection import mutual_info_regression

        return float(mutual_info_regression(x.reshape(-1, 1), y, random_state=seed)[0])
    if estimator != "binned":
        raise DomainError(f"unknown MI estimator {estimator!r}")
    cx, cy = _discretize(x, bins), _discretize(y, bins)
    joint = np.zeros((cx.max() + 1, cy.max() + 1))
    np.add.at(joint, (cx, cy), 1.0)
    pxy = joint / x.size
    px = pxy.sum(axis=1, keepdims=True)
    py = pxy.sum(axis=0, keepdims=True)
    nz = pxy > 0
    return float(max(0.0, (pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])).sum()))


def mi_scores(features: Mapping[str, np.ndarray], target, **kw) -> dict[str, float]:
    """Raw MI per feature."""
    return {name: mutual_information(values, target, **kw) for name, values in features.items()}


def normalize_scores(scores: Mapping[str, float]) -> dict[str, float]:
    """Min-max scale into [0, 1]; all-equal scores map to 0."""
    if not scores:
        return {}
    lo, hi = min(scores.values()), max(scores.values())
    span = hi - lo
    return {k: (v - lo) / span if span > 0 else 0.0 for k, v in scores.items()}


def select_top(features: Mapping[str, np.ndarray], target, k: int, **kw) -> list[str]:
    """Names of the ``k`` features with the highest MI, ties broken by name."""
    scores = mi_scores(features, target, **kw)
    return [n for n, _ in sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]


def forward_return_samples(table: FeatureTable, columns: Sequence[str] = NUMERIC_COLUMNS):
    """Per column, aligned (feature at t, return at t+1) samples without nulls."""
    out = {}
    for name in columns:
        xs, ys = [], []
        for stock in sorted(table.stocks):
            sf = table[stock]
            x = np.asarray(sf.columns[name], dtype=float)
            r = np.asarray(sf.columns["returns"], dtype=float)
            if x.size < 2:
                continue
            xs.append(x[:-1])
            ys.append(r[1:])
        if not xs:
            continue
        x, y = np.concatenate(xs), np.concatenate(ys)
        ok = np.isfinite(x) & np.isfinite(y)
        out[name] = (x[ok], y[ok])
    return out


def mi_report(table: FeatureTable, columns: Sequence[str] = NUMERIC_COLUMNS, top: int = 18,
              bins: int = 16, estimator: str = "binned", min_samples: int = 50) -> dict:
    samples = forward_return_samples(table, columns)
    raw = {
        name: mutual_information(x, y, bins=bins, estimator=estimator)
        for name, (x, y) in samples.items() if x.size >= min_samples
    }
    norm = normalize_scores(raw)
    ranked = sorted(raw, key=lambda n: (-raw[n], n))
    return {
        "estimator": estimator,
        "bins": bins,
        "scores": {n: {"mi": raw[n], "normalized": norm[n]} for n in ranked},
        "selected": ranked[:top],
    }


# -- retrieval logs and correlation ---------------------------------------------


def indicator_occurrences(logs: Sequence[Mapping]) -> dict[str, int]:
    counts = Counter(r["indicator"] for log in logs for r in log["retrieved"])
    return dict(sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])))


def indicator_hit_rate(logs: Sequence[Mapping], indicator: str) -> float:
    total = sum(len(log["retrieved"]) for log in logs)
    if not total:
        return 0.0
    return sum(r["indicator"] == indicator for log in logs for r in log["retrieved"]) / total


def pearson(x, y) -> tuple[float | None, float | None]:
    """Pearson r and two-sided p from the t approximation with n - 2 dof."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    if n < 3:
        return None, None
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        return None, None
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1 - r * r))
    return r, float(2 * stats.t.sf(abs(t), n - 2))


def movement_prediction_correlation(logs: Sequence[Mapping]) -> tuple[float | None, float | None]:
    """Correlation between the mean retrieved movement and the prediction."""
    xs, ys = [], []
    for log in logs:
        if not log["retrieved"]:
            continue
        xs.append(sum(MOVEMENT_VALUE[r["movement"]] for r in log["retrieved"]) / len(log["retrieved"]))
        ys.append(MOVEMENT_VALUE[log["prediction"]])
    return pearson(xs, ys)


# -- experiment -------------------------------------------------------------------


class _Rows(Sequence):
    """Read-only view of ``items`` at ``index`` positions."""

    def __init__(self, items, index):
        self.items, self.index = items, index

    def __len__(self):
        return len(self.index)

    def __getitem__(self, i):
        return self.items[self.index[i]]


class EmbeddingRetriever:
    name = "finseer"

    def __init__(self, pool: CandidatePool, encoder, embeddings: np.ndarray | None = None):
        self.pool = pool
        self.encoder = encoder
        self.embeddings = embeddings if embeddings is not None else encoder.encode(pool.candidates)

    def retrieve(self, query: Query, k: int):
        n = self.pool.visible_count(query.query_date)
        return retrieve_topk(query, self.pool.candidates[:n], self.encoder, k, self.embeddings[:n])


class DTWRetriever:
    name = "dtw"

    def __init__(self, pool: CandidatePool):
        self.pool = pool
        self.index = np.array(
            [i for i, c in enumerate(pool.candidates) if c.indicator not in SIGNAL_COLUMNS], dtype=int
        )
        self.values = np.array([pool.candidates[i].value_list for i in self.index], dtype=float).reshape(-1, 5)

    def retrieve(self, query: Query, k: int):
        n = self.pool.visible_count(query.query_date)
        m = int(np.searchsorted(self.index, n))
        if m == 0:
            return []
        dist = dtw_to_many(query.adjusted_close_list, self.values[:m])
        return rank_by_distance(_Rows(self.pool.candidates, self.index[:m]), dist, k)


class RandomRetriever:
    name = "random"

    def __init__(self, pool: CandidatePool, seed: int = 0):
        self.pool = pool
        self.seed = seed

    def retrieve(self, query: Query, k: int):
        view = self.pool.view(query.query_date)
        return [(c, None) for c in retrieve_random(query, view, k, f"{self.seed}|{query.id}")]


class NoRetriever:
    name = "none"

    def retrieve(self, query: Query, k: int):
        return []


@dataclass
class EvalReport:
    retriever: str
    k: int
    queries: int
    abstains: int
    acc: float
    mcc: float
    correlation: float | None
    p_value: float | None
    occurrences: dict[str, int] = field(default_factory=dict)
    hit_rate: float | None = None
    planted_indicator: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(logs: Sequence[Mapping], retriever: str, k: int, planted: str | None = None) -> EvalReport:
    preds = [log["prediction"] for log in logs]
    labels = [log["ground_truth"] for log in logs]
    r, p = movement_prediction_correlation(logs)
    return EvalReport(
        retriever=retriever,
        k=k,
        queries=len(logs),
        abstains=sum(x == ABSTAIN for x in preds),
        acc=accuracy(preds, labels),
        mcc=mcc(preds, labels),
        correlation=r,
        p_value=p,
        occurrences=indicator_occurrences(logs),
        hit_rate=indicator_hit_rate(logs, planted) if planted else None,
        planted_indicator=planted,
    )


def _log_entry(query: Query, retriever: str, k: int, retrieved, prediction: str) -> dict:
    return {
        "query_id": query.id,
        "query_stock": query.query_stock,
        "query_date": query.query_date.isoformat(),
        "ground_truth": query.ground_truth,
        "retriever": retriever,
        "k": k,
        "retrieved": [
            {"id": c.id, "indicator": c.indicator, "movement": c.candidate_movement, "score": s}
            for c, s in retrieved
        ],
        "prediction": prediction,
    }


def run_experiment(
    queries: Sequence[Query],
    retriever,
    forecaster: Forecaster,
    template: str,
    k: int = 5,
    log_path: str | Path | None = None,
    max_workers: int = 1,
    planted: str | None = None,
) -> tuple[EvalReport, list[dict]]:
    """Retrieve, prompt and predict for every query, then aggregate.

    Log lines are written (and flushed) in query order as they complete, so a
    forecaster outage leaves the finished prefix on disk.
    """
    k_eff = 0 if isinstance(retriever, NoRetriever) else k

    def one(q: Query) -> dict:
        retrieved = retriever.retrieve(q, k_eff)
        prompt = assemble_prompt(q, [c for c, _ in retrieved], template)
        return _log_entry(q, retriever.name, k_eff, retrieved, parse_prediction(predict_text(forecaster, prompt)))

    logs: list[dict] = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        if max_workers > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as ex:
                results = ex.map(one, queries)
                for entry in results:
                    logs.append(entry)
                    if fh:
                        fh.write(json.dumps(entry) + "\n")
                        fh.flush()
        else:
            for q in queries:
                entry = one(q)
                logs.append(entry)
                if fh:
                    fh.write(json.dumps(entry) + "\n")
                    fh.flush()
    except ForecasterError:
        logger.error("forecaster failed after %d of %d queries; partial log kept", len(logs), len(queries))
        raise
    finally:
        if fh:
            fh.close()
    return summarize(logs, retriever.name, k_eff, planted), logs


def read_logs(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_report(report: EvalReport, json_path: str | Path, csv_path: str | Path) -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["indicator", "count"])
        writer.writerows(report.occurrences.items())
