"""Forecaster backends.

A forecaster maps a prompt to per-class logits over ``("rise", "fall")``.
Two implementations ship: :class:`RemoteForecaster`, an HTTP client for an
LLM service, and :class:`SyntheticForecaster`, a seeded stand-in whose
answers depend on which indicators the prompt exposes.

Remote contract::

    POST <url>  {"prompt": "...", "classes": ["rise", "fall"]}
    200         {"logits": {"rise": 1.3, "fall": -0.2}}

A response carrying ``logprobs`` instead of ``logits`` is accepted as is,
since the softmax is shift invariant.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
import time
from collections.abc import Mapping
from datetime import date
from typing import Protocol

import httpx
import numpy as np

from .errors import ForecasterError
from .sequences import WINDOW

logger = logging.getLogger(__name__)

CLASSES = ("rise", "fall")
RETRYABLE_STATUS = frozenset({408, 429, 500, 502, 503, 504})


class Forecaster(Protocol):
    def logits(self, prompt: str) -> dict[str, float]: ...


def predict_text(forecaster: Forecaster, prompt: str) -> str:
    """Free-text answer: the arg-max class name."""
    logits = forecaster.logits(prompt)
    return max(CLASSES, key=lambda c: (logits[c], c == CLASSES[0]))


def _parse_logits(payload, classes=CLASSES) -> dict[str, float]:
    if not isinstance(payload, Mapping):
        raise ForecasterError(f"response is not an object: {payload!r:.200}")
    raw = payload.get("logits", payload.get("logprobs"))
    if not isinstance(raw, Mapping):
        raise ForecasterError("response has neither 'logits' nor 'logprobs'")
    out = {}
    for c in classes:
        try:
            v = float(raw[c])
        except (KeyError, TypeError, ValueError):
            raise ForecasterError(f"response lacks a numeric logit for {c!r}") from None
        if not math.isfinite(v):
            raise ForecasterError(f"non-finite logit for {c!r}: {v}")
        out[c] = v
    return out


class _HttpEndpoint:
    def __init__(self, url, token=None, timeout=30.0, max_retries=3, backoff=0.5, client=None):
        self.url = url
        self.max_retries = max_retries
        self.backoff = backoff
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.client = client or httpx.Client(timeout=timeout)
        self.headers = headers

    def _post(self, body: dict):
        last = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.client.post(self.url, json=body, headers=self.headers)
            except httpx.TransportError as exc:
                last = f"{type(exc).__name__}: {exc}"
                logger.info("POST %s failed (attempt %d): %s", self.url, attempt + 1, last)
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last = f"HTTP {resp.status_code}"
                logger.info("POST %s returned %s (attempt %d)", self.url, resp.status_code, attempt + 1)
                continue
            if resp.is_error:
                raise ForecasterError(f"POST {self.url}: HTTP {resp.status_code}")
            try:
                return resp.json()
            except json.JSONDecodeError:
                raise ForecasterError(f"POST {self.url}: response is not JSON") from None
        raise ForecasterError(f"POST {self.url}: giving up after {self.max_retries + 1} attempts ({last})")

    def close(self):
        self.client.close()


class RemoteForecaster(_HttpEndpoint):
    def logits(self, prompt: str) -> dict[str, float]:
        return _parse_logits(self._post({"prompt": prompt, "classes": list(CLASSES)}))


class RemoteEmbedder(_HttpEndpoint):
    """Text embedding service: ``{"prompt": ...}`` -> ``{"embedding": [...]}``."""

    def embed(self, text: str) -> np.ndarray:
        payload = self._post({"prompt": text})
        try:
            v = np.asarray(payload["embedding"], dtype=float)
        except (KeyError, TypeError, ValueError):
            raise ForecasterError("embedding response lacks a numeric 'embedding' list") from None
        norm = np.linalg.norm(v)
        if v.ndim != 1 or not np.isfinite(norm) or norm == 0:
            raise ForecasterError("embedding must be a non-zero finite vector")
        return v / norm


def extract_json_objects(text: str) -> list[dict]:
    """Every top-level JSON object embedded in ``text``, in order."""
    dec = json.JSONDecoder()
    out, i = [], 0
    while True:
        i = text.find("{", i)
        if i < 0:
            return out
        try:
            obj, end = dec.raw_decode(text, i)
        except json.JSONDecodeError:
            i += 1
            continue
        if isinstance(obj, dict):
            out.append(obj)
        i = end


class SyntheticForecaster:
    """Deterministic stand-in for an LLM forecaster.

    Each candidate in the prompt gets a relevance ``sigmoid(weight[indicator]
    + bias)``; the evidence is the chance that at least one candidate is
    relevant.  The logit margin for rise over fall is ``direction * gain *
    evidence`` plus Gaussian noise seeded by the prompt, where ``direction``
    is ``rule(window)`` applied to the query stock's own ``planted`` column
    over the five days before the query date, looked up in ``table``.
    Without a relevant candidate the answer is close to a coin flip.
    """

    def __init__(self, table, planted: str, rule, weights: Mapping[str, float] | None = None,
                 gain: float = 4.0, noise: float = 0.75, bias: float = 0.0, seed: int = 0,
                 default_weight: float = -4.0, planted_weight: float = 6.0):
        self.table = table
        self.planted = planted
        self.rule = rule
        self.weights = dict(weights) if weights is not None else {planted: planted_weight}
        self.default_weight = default_weight
        self.gain = gain
        self.noise = noise
        self.bias = bias
        self.seed = seed

    def relevance(self, indicator: str) -> float:
        z = self.weights.get(indicator, self.default_weight) + self.bias
        return 1.0 / (1.0 + math.exp(-z))

    def direction(self, stock: str, query_date) -> int:
        sf = self.table[stock]
        try:
            i = sf.index(query_date)
        except KeyError:
            return 0
        if i < WINDOW:
            return 0
        window = [sf.value(self.planted, j) for j in range(i - WINDOW, i)]
        if any(v is None for v in window):
            return 0
        return self.rule(window)

    def logits(self, prompt: str) -> dict[str, float]:
        objs = extract_json_objects(prompt)
        query = next((o for o in objs if "query_stock" in o), None)
        if query is None:
            raise ForecasterError("prompt contains no query object")
        miss = 1.0
        for o in objs:
            if "candidate_stock" not in o:
                continue
            key = next(k for k in o if k.endswith("_list") and k != "recent_date_list")
            miss *= 1.0 - self.relevance(key[:-5])
        evidence = 1.0 - miss
        direction = self.direction(query["query_stock"], date.fromisoformat(query["query_date"]))
        digest = hashlib.blake2b(f"{self.seed}\x00{prompt}".encode(), digest_size=8).digest()
        eps = random.Random(int.from_bytes(digest, "little")).gauss(0.0, 1.0)
        margin = direction * self.gain * evidence + self.noise * eps
        return {"rise": margin / 2, "fall": -margin / 2}
