"""Candidate scoring with forecaster feedback and training-example mining."""

from __future__ import annotations

import json
import logging
import math
import random
import string
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DomainError, ForecasterError, TemplateError
from .forecasters import CLASSES, Forecaster
from .sequences import Candidate, Query, serialize_candidate, serialize_query

logger = logging.getLogger(__name__)

N_NEGATIVES = 15
TEMPLATE_FIELDS = frozenset({"query", "candidates"})

_DATA = Path(__file__).parent / "data"


def load_template(name: str = "rag") -> str:
    """Built-in prompt templates: ``rag`` (with candidates) and ``bare``."""
    return (_DATA / f"prompt_{name}.txt").read_text(encoding="utf-8")


def assemble_prompt(query: Query, candidates: Sequence[Candidate], template: str) -> str:
    """Fill ``{query}`` and ``{candidates}``; candidates keep their given order."""
    names = {f for _, f, _, _ in string.Formatter().parse(template) if f is not None}
    unknown = names - TEMPLATE_FIELDS
    if unknown:
        raise TemplateError(f"unknown placeholder(s) {sorted(unknown)}")
    if "query" not in names:
        raise TemplateError("template has no {query} placeholder")
    if candidates and "candidates" not in names:
        raise TemplateError("template has no {candidates} placeholder")
    return template.format(
        query=serialize_query(query),
        candidates="\n".join(serialize_candidate(c) for c in candidates),
    )


def class_probability(logits: Mapping[str, float], true_class: str) -> float:
    """Softmax probability of ``true_class``, computed with max subtraction."""
    if true_class not in logits:
        raise DomainError(f"class {true_class!r} missing from logits {sorted(logits)}")
    top = max(logits.values())
    total = sum(math.exp(z - top) for z in logits.values())
    return math.exp(logits[true_class] - top) / total


@dataclass(frozen=True)
class ScoredCandidate:
    candidate: Candidate
    score: float

    @property
    def rank_key(self) -> tuple:
        return (-self.score, *self.candidate.sort_key)


def rank_scored(items) -> list[ScoredCandidate]:
    """Sort by score descending, then candidate date, stock, indicator."""
    return sorted(items, key=lambda s: s.rank_key)


def score_candidates(
    query: Query,
    candidates: Sequence[Candidate],
    forecaster: Forecaster,
    template: str,
    max_workers: int = 1,
) -> list[ScoredCandidate]:
    """One single-candidate prompt per candidate, scored against the true class."""
    if query.ground_truth not in CLASSES:
        raise DomainError(f"query {query.id} has no rise/fall ground truth")

    def one(c: Candidate) -> ScoredCandidate | None:
        try:
            logits = forecaster.logits(assemble_prompt(query, [c], template))
        except ForecasterError as exc:
            logger.debug("scoring %s failed: %s", c.id, exc)
            return None
        return ScoredCandidate(c, class_probability(logits, query.ground_truth))

    if max_workers > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(one, candidates))
    else:
        results = [one(c) for c in candidates]
    scored = [r for r in results if r is not None]
    if len(scored) < len(results):
        logger.warning("query %s: %d candidate(s) unscored", query.id, len(results) - len(scored))
    return rank_scored(scored)


def compute_weights(teacher_scores, alpha: float) -> np.ndarray:
    """Temperature softmax of teacher scores."""
    if not alpha > 0:
        raise ConfigError(f"alpha must be positive, got {alpha!r}")
    z = np.asarray(teacher_scores, dtype=float) / alpha
    z = np.exp(z - z.max())
    return z / z.sum()


@dataclass(frozen=True)
class TrainingExample:
    query: Query
    positive: Candidate
    negatives: tuple[Candidate, ...]
    teacher_scores: tuple[float, ...]
    weights: tuple[float, ...]

    @property
    def candidates(self) -> tuple[Candidate, ...]:
        return (self.positive, *self.negatives)

    def to_dict(self) -> dict:
        return {
            "query": {**self.query.to_dict(), "ground_truth": self.query.ground_truth},
            "positive": self.positive.to_dict(),
            "negatives": [c.to_dict() for c in self.negatives],
            "teacher_scores": list(self.teacher_scores),
            "weights": list(self.weights),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainingExample":
        return cls(
            Query.from_dict(obj["query"], obj["query"].get("ground_truth")),
            Candidate.from_dict(obj["positive"]),
            tuple(Candidate.from_dict(c) for c in obj["negatives"]),
            tuple(obj["teacher_scores"]),
            tuple(obj["weights"]),
        )


def mine_training_example(
    scored: Sequence[ScoredCandidate], query: Query, alpha: float = 0.05, n_negatives: int = N_NEGATIVES
) -> TrainingExample:
    """Top-1 as positive, bottom ``n_negatives`` as negatives."""
    if len(scored) < n_negatives + 1:
        raise DomainError(f"query {query.id}: {len(scored)} scored candidates, need {n_negatives + 1}")
    ranked = rank_scored(scored)
    chosen = [ranked[0], *ranked[-n_negatives:]]
    scores = tuple(s.score for s in chosen)
    return TrainingExample(
        query,
        chosen[0].candidate,
        tuple(s.candidate for s in chosen[1:]),
        scores,
        tuple(float(w) for w in compute_weights(scores, alpha)),
    )


def sample_for_scoring(view: Sequence[Candidate], query: Query, n: int, seed: int) -> list[Candidate]:
    """Uniform sample of ``n`` visible candidates, reproducible per (seed, query)."""
    rng = random.Random(f"{seed}|{query.id}")
    if n >= len(view):
        return list(view)
    return [view[i] for i in sorted(rng.sample(range(len(view)), n))]


def save_examples(examples, path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict()) + "\n")
            n += 1
    return n


def load_examples(path: str | Path) -> list[TrainingExample]:
    with open(path, encoding="utf-8") as fh:
        return [TrainingExample.from_dict(json.loads(line)) for line in fh if line.strip()]
