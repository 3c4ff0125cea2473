"""Trainable sequence encoder and similarity retrieval.

Sequences are featurized into a fixed-width vector, passed through a small
tanh MLP and L2-normalised.  Training distils teacher weights over each
example's candidates into the softmax of query/candidate inner products
divided by a temperature.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DomainError, TrainingDiverged
from .features import INDICATORS
from .scorer import TrainingExample
from .sequences import WINDOW, Candidate, Query, serialize_candidate, serialize_query

logger = logging.getLogger(__name__)

QUERY_SLOT = "query_adjusted_close"
SLOTS = (*INDICATORS, QUERY_SLOT)
_SLOT_INDEX = {name: i for i, name in enumerate(SLOTS)}
MOVEMENT_SLOTS = ("rise", "fall", "freeze", "absent")
SIGNAL_CODES = {
    "bullish": 1.0, "bearish": -1.0,
    "exceed_upper": 1.0, "exceed_lower": -1.0,
    "overbought": 1.0, "oversold": -1.0,
    "rise": 1.0, "fall": -1.0, "freeze": 0.0,
}
ZSCORE_EPS = 1e-8
FEATURE_DIM = len(SLOTS) + WINDOW + len(MOVEMENT_SLOTS) + 1

PARAMS_MAGIC = b"FSEER1"
CACHE_MAGIC = b"FSEMB1"


def feature_layout() -> dict:
    """Offsets of each block in the feature vector, for manifests."""
    a = len(SLOTS)
    return {
        "indicator_onehot": [0, a],
        "window_zscore": [a, a + WINDOW],
        "movement_onehot": [a + WINDOW, a + WINDOW + len(MOVEMENT_SLOTS)],
        "log_magnitude": [FEATURE_DIM - 1, FEATURE_DIM],
        "dim": FEATURE_DIM,
    }


def _encode_values(values) -> np.ndarray:
    out = np.empty(len(values))
    for i, v in enumerate(values):
        out[i] = SIGNAL_CODES[v] if isinstance(v, str) else float(v)
    return out


def featurize(item: Query | Candidate) -> np.ndarray:
    x = np.zeros(FEATURE_DIM)
    if isinstance(item, Query):
        slot, values, movement = QUERY_SLOT, item.adjusted_close_list, "absent"
    else:
        if item.indicator not in _SLOT_INDEX:
            raise DomainError(f"unknown indicator {item.indicator!r}")
        slot, values, movement = item.indicator, item.value_list, item.candidate_movement
    v = _encode_values(values)
    a = len(SLOTS)
    x[_SLOT_INDEX[slot]] = 1.0
    x[a:a + WINDOW] = (v - v.mean()) / max(v.std(), ZSCORE_EPS)
    x[a + WINDOW + MOVEMENT_SLOTS.index(movement)] = 1.0
    x[-1] = math.log10(1.0 + float(np.abs(v).mean()))
    return x


def featurize_many(items) -> np.ndarray:
    if not items:
        return np.zeros((0, FEATURE_DIM))
    return np.stack([featurize(i) for i in items])


@dataclass
class EmbedderParams:
    layers: list[tuple[np.ndarray, np.ndarray]]
    seed: int = 0

    @property
    def dims(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    def copy(self) -> "EmbedderParams":
        return EmbedderParams([(w.copy(), b.copy()) for w, b in self.layers], self.seed)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    def digest(self) -> str:
        return hashlib.sha256(self.flat().astype("<f4").tobytes()).hexdigest()


def init_params(dims: Sequence[int], seed: int = 0) -> EmbedderParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-a, a, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return EmbedderParams(layers, seed)


def default_dims(hidden: Sequence[int] = (128, 128), out_dim: int = 64) -> list[int]:
    return [FEATURE_DIM, *hidden, out_dim]


def _forward(params: EmbedderParams, x: np.ndarray):
    """Returns (unit embeddings, pre-normalisation norms, per-layer activations)."""
    acts = [x]
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        z = h @ w + b
        h = z if i == last else np.tanh(z)
        if not np.all(np.isfinite(h)):
            raise DomainError(f"non-finite activation in layer {i}")
        acts.append(h)
    norm = np.linalg.norm(h, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise DomainError(f"zero-norm output in layer {last}")
    return h / norm, norm, acts


def embed(params: EmbedderParams, features: np.ndarray) -> np.ndarray:
    """Forward pass plus L2 normalisation; accepts one vector or a batch."""
    features = np.asarray(features, dtype=float)
    if features.shape[-1] != params.dims[0]:
        raise DomainError(f"feature width {features.shape[-1]} != encoder input {params.dims[0]}")
    return _forward(params, features)[0]


def _backward(params, acts, e, norm, grad_e):
    grad_h = (grad_e - e * np.sum(e * grad_e, axis=-1, keepdims=True)) / norm
    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        if i != len(params.layers) - 1:
            grad_h = grad_h * (1.0 - acts[i + 1] ** 2)
        grads[i] = (acts[i].T @ grad_h, grad_h.sum(axis=0))
        grad_h = grad_h @ w.T
    return grads


def similarity(e_q, e_c) -> float:
    e_q, e_c = np.asarray(e_q, dtype=float), np.asarray(e_c, dtype=float)
    if e_q.shape != e_c.shape:
        raise DomainError(f"embedding length mismatch {e_q.shape} vs {e_c.shape}")
    return float(e_q @ e_c)


def _batch_loss(params, xq, xc, w, tau):
    """Mean distillation loss over a batch and its parameter gradient.

    ``xq`` is (B, d), ``xc`` is (B, M, d) and ``w`` is (B, M).
    """
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau!r}")
    bsz, m, d = xc.shape
    x = np.concatenate([xq, xc.reshape(bsz * m, d)])
    e, norm, acts = _forward(params, x)
    eq, ec = e[:bsz], e[bsz:].reshape(bsz, m, -1)
    s = np.einsum("bd,bmd->bm", eq, ec) / tau
    s_max = s.max(axis=1, keepdims=True)
    lse = s_max + np.log(np.exp(s - s_max).sum(axis=1, keepdims=True))
    logp = s - lse
    loss = float(-(w * logp).sum() / bsz)

    p = np.exp(logp)
    g_s = (p * w.sum(axis=1, keepdims=True) - w) / (bsz * tau)
    g_eq = np.einsum("bm,bmd->bd", g_s, ec)
    g_ec = g_s[:, :, None] * eq[:, None, :]
    grad_e = np.concatenate([g_eq, g_ec.reshape(bsz * m, -1)])
    return loss, _backward(params, acts, e, norm, grad_e)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.05
    tau: float = 0.02
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    hidden: tuple[int, ...] = (128, 128)
    out_dim: int = 64

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha!r}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


def example_arrays(examples: Sequence[TrainingExample]):
    xq = featurize_many([ex.query for ex in examples])
    xc = np.stack([featurize_many(ex.candidates) for ex in examples])
    w = np.asarray([ex.weights for ex in examples], dtype=float)
    return xq, xc, w


def distill_loss(example: TrainingExample, params: EmbedderParams, config: TrainConfig):
    """Loss and gradient (list of (dW, db)) for a single example."""
    xq, xc, w = example_arrays([example])
    return _batch_loss(params, xq, xc, w, config.tau)


@dataclass
class TrainResult:
    params: EmbedderParams
    loss_curve: list[float] = field(default_factory=list)


def train(examples: Sequence[TrainingExample], config: TrainConfig = TrainConfig(),
          init: EmbedderParams | None = None) -> TrainResult:
    """Minibatch Adam on the distillation loss; deterministic given the seed."""
    if not examples:
        raise DataError("no training examples")
    xq, xc, w = example_arrays(examples)
    params = init.copy() if init is not None else init_params(default_dims(config.hidden, config.out_dim), config.seed)
    rng = np.random.default_rng(config.seed + 1)
    arrays = [a for layer in params.layers for a in layer]
    m_state = [np.zeros_like(a) for a in arrays]
    v_state = [np.zeros_like(a) for a in arrays]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    curve = []
    n = len(examples)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = _batch_loss(params, xq[idx], xc[idx], w[idx], config.tau)
            if not math.isfinite(loss):
                raise TrainingDiverged(
                    f"loss became {loss} at epoch {epoch} step {step}; "
                    f"last epoch mean {curve[-1] if curve else 'n/a'}"
                )
            total += loss * len(idx)
            step += 1
            flat_grads = [g for pair in grads for g in pair]
            for j, g in enumerate(flat_grads):
                m_state[j] = beta1 * m_state[j] + (1 - beta1) * g
                v_state[j] = beta2 * v_state[j] + (1 - beta2) * g * g
                m_hat = m_state[j] / (1 - beta1 ** step)
                v_hat = v_state[j] / (1 - beta2 ** step)
                arrays[j] = arrays[j] - config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
            params = EmbedderParams(list(zip(arrays[::2], arrays[1::2])), params.seed)
        curve.append(total / n)
        logger.info("epoch %d mean loss %.6f", epoch, curve[-1])
    return TrainResult(params, curve)


# -- encoders and retrieval -------------------------------------------------


class NumericEncoder:
    """Embeds queries and candidates with trained params.

    Outputs are rounded to float32 so cached and freshly computed embeddings
    rank identically.
    """

    def __init__(self, params: EmbedderParams):
        self.params = params

    @property
    def key(self) -> str:
        return self.params.digest()

    def encode(self, items) -> np.ndarray:
        if not items:
            return np.zeros((0, self.params.dims[-1]), dtype=np.float32)
        out = []
        for start in range(0, len(items), 8192):
            out.append(embed(self.params, featurize_many(items[start:start + 8192])))
        return np.concatenate(out).astype(np.float32)


class TextEncoder:
    """Embeds the JSON serialisation through an external embedding service."""

    def __init__(self, embedder):
        self.embedder = embedder

    @property
    def key(self) -> str:
        return f"remote:{self.embedder.url}"

    def encode(self, items) -> np.ndarray:
        texts = [serialize_query(i) if isinstance(i, Query) else serialize_candidate(i) for i in items]
        return np.asarray([self.embedder.embed(t) for t in texts], dtype=np.float32)


def retrieve_topk(query: Query, candidates: Sequence[Candidate], encoder, k: int,
                  candidate_embeddings: np.ndarray | None = None) -> list[tuple[Candidate, float]]:
    """Top ``k`` candidates by inner product, ties broken by (date, stock, indicator).

    ``candidates`` must already be restricted to what the query may see.
    """
    n = len(candidates)
    if n == 0 or k <= 0:
        return []
    emb = candidate_embeddings[:n] if candidate_embeddings is not None else encoder.encode(candidates)
    eq = encoder.encode([query])[0]
    sims = emb @ eq
    if k < n:
        cutoff = np.partition(sims, n - k)[n - k]
        pool = np.flatnonzero(sims >= cutoff)
    else:
        pool = np.arange(n)
    ranked = sorted(pool, key=lambda i: (-sims[i], *candidates[i].sort_key))
    return [(candidates[i], float(sims[i])) for i in ranked[:k]]


# -- binary formats -----------------------------------------------------------


def save_params(params: EmbedderParams, path: str | Path) -> None:
    """``FSEER1`` | u32 layers | u64 seed | u32 dims... | f32 W,b per layer | u64 checksum."""
    dims = params.dims
    body = bytearray(PARAMS_MAGIC)
    body += struct.pack("<IQ", len(params.layers), params.seed)
    body += struct.pack(f"<{len(dims)}I", *dims)
    for w, b in params.layers:
        body += w.astype("<f4").tobytes() + b.astype("<f4").tobytes()
    checksum = hashlib.blake2b(bytes(body), digest_size=8).digest()
    Path(path).write_bytes(bytes(body) + checksum)


def load_params(path: str | Path) -> EmbedderParams:
    raw = Path(path).read_bytes()
    if raw[:6] != PARAMS_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:6]!r}")
    body, checksum = raw[:-8], raw[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != checksum:
        raise DataError(f"{path}: checksum mismatch")
    n_layers, seed = struct.unpack_from("<IQ", body, 6)
    off = 6 + 12
    dims = struct.unpack_from(f"<{n_layers + 1}I", body, off)
    off += 4 * (n_layers + 1)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = np.frombuffer(body, "<f4", fan_in * fan_out, off).reshape(fan_in, fan_out).astype(float)
        off += 4 * fan_in * fan_out
        b = np.frombuffer(body, "<f4", fan_out, off).astype(float)
        off += 4 * fan_out
        layers.append((w, b))
    if off != len(body):
        raise DataError(f"{path}: {len(body) - off} trailing bytes")
    return EmbedderParams(layers, seed)


def save_embedding_cache(matrix: np.ndarray, path: str | Path) -> None:
    """``FSEMB1`` | u64 count | u32 dim | row-major f32."""
    matrix = np.asarray(matrix, dtype="<f4")
    count, dim = matrix.shape
    Path(path).write_bytes(CACHE_MAGIC + struct.pack("<QI", count, dim) + matrix.tobytes())


def load_embedding_cache(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:6] != CACHE_MAGIC:
        raise DataError(f"{path}: bad magic {raw[:6]!r}")
    count, dim = struct.unpack_from("<QI", raw, 6)
    data = np.frombuffer(raw, "<f4", count * dim, 18)
    return data.reshape(count, dim).astype(np.float32)
