import math
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stockrag.errors import ConfigError, DataError, DomainError, TrainingDiverged
from stockrag.features import INDICATORS
from stockrag.retriever import (
    FEATURE_DIM,
    EmbedderParams,
    NumericEncoder,
    TrainConfig,
    _batch_loss,
    default_dims,
    distill_loss,
    embed,
    example_arrays,
    featurize,
    init_params,
    load_embedding_cache,
    load_params,
    retrieve_topk,
    save_embedding_cache,
    save_params,
    similarity,
    train,
)
from stockrag.scorer import TrainingExample, compute_weights
from stockrag.sequences import Candidate, Query

DAY0 = date(2016, 3, 1)


def window(d):
    return tuple(d - timedelta(days=k) for k in range(5, 0, -1))


def candidate(i, indicator="close", movement="rise", values=None, stock="S"):
    d = DAY0 + timedelta(days=i)
    rng = np.random.default_rng(i)
    vals = tuple(values) if values is not None else tuple(float(v) for v in rng.uniform(1, 50, 5))
    return Candidate(stock, d, movement, indicator, window(d), vals)


def query(i=0, values=(10.0, 10.5, 10.2, 10.9, 11.0), truth="rise"):
    d = date(2017, 1, 2) + timedelta(days=i)
    return Query("Q", d, window(d), tuple(values), truth)


def example(seed, weights=None):
    rng = np.random.default_rng(seed)
    cands = [candidate(int(rng.integers(0, 10_000)), indicator=str(rng.choice(INDICATORS[:10])),
                       movement=str(rng.choice(["rise", "fall", "freeze"]))) for _ in range(16)]
    scores = tuple(sorted(rng.uniform(size=16), reverse=True))
    w = tuple(weights) if weights is not None else tuple(compute_weights(scores, 0.05))
    q = query(seed, values=tuple(rng.uniform(5, 15, 5)))
    return TrainingExample(q, cands[0], tuple(cands[1:]), scores, w)


def small_params(seed=0):
    return init_params([FEATURE_DIM, 12, 8, 6], seed)


# -- features and encoder ------------------------------------------------------------


def test_feature_vector_layout():
    x = featurize(candidate(1, indicator="volume", movement="fall", values=[1, 2, 3, 4, 5]))
    assert x.shape == (FEATURE_DIM,) == (45,)
    assert x[INDICATORS.index("volume")] == 1 and x[: len(INDICATORS) + 1].sum() == 1
    z = x[len(INDICATORS) + 1: len(INDICATORS) + 6]
    assert z.mean() == pytest.approx(0, abs=1e-12) and z.std() == pytest.approx(1, abs=1e-12)
    xq = featurize(query())
    assert xq[len(INDICATORS)] == 1


def test_signal_columns_featurize():
    x = featurize(candidate(2, indicator="kdj_crossover", values=["bullish", "bearish", "bullish", "bullish",
                                                                  "bearish"]))
    assert np.all(np.isfinite(x))
    with pytest.raises(ValueError, match="unknown indicator"):
        candidate(3, indicator="nonsense")


def test_embeddings_unit_norm():
    p = init_params(default_dims(), seed=3)
    assert p.dims == [45, 128, 128, 64]
    xs = np.stack([featurize(candidate(i)) for i in range(50)])
    e = embed(p, xs)
    assert np.max(np.abs(np.linalg.norm(e, axis=1) - 1)) <= 1e-6


def test_similarity_errors():
    with pytest.raises(DomainError):
        similarity(np.ones(3), np.ones(4))
    with pytest.raises(DomainError):
        embed(small_params(), np.ones(10))


def test_zero_output_rejected():
    p = small_params()
    zero = EmbedderParams([(w * 0, b * 0) for w, b in p.layers])
    with pytest.raises(DomainError, match="zero-norm"):
        embed(zero, featurize(query()))


def test_init_is_seeded():
    assert small_params(4).digest() == small_params(4).digest() != small_params(5).digest()


# -- loss and gradient ---------------------------------------------------------------


def reference_loss(params, ex, tau):
    """Direct per-example loss: -sum_i w_i log softmax(s/tau)_i."""
    eq = embed(params, featurize(ex.query))
    sims = np.array([similarity(eq, embed(params, featurize(c))) for c in ex.candidates]) / tau
    m = sims.max()
    logp = sims - (m + math.log(np.exp(sims - m).sum()))
    return float(-(np.asarray(ex.weights) * logp).sum())


def test_loss_matches_reference():
    p = small_params(1)
    for seed in range(5):
        ex = example(seed)
        loss, _ = distill_loss(ex, p, TrainConfig(tau=0.02))
        assert loss == pytest.approx(reference_loss(p, ex, 0.02), rel=1e-10)


def test_uniform_weights_equal_sims_give_log16():
    p = small_params(2)
    c = candidate(5)
    ex = TrainingExample(query(), c, (c,) * 15, (0.5,) * 16, (1 / 16,) * 16)
    loss, grads = distill_loss(ex, p, TrainConfig(tau=0.02))
    assert loss == pytest.approx(math.log(16), abs=1e-9)
    assert max(float(np.max(np.abs(g))) for pair in grads for g in pair) <= 1e-9


def test_gradient_central_differences():
    p = small_params(7)
    xq, xc, w = example_arrays([example(11), example(12)])
    tau = 0.5
    _, grads = _batch_loss(p, xq, xc, w, tau)
    rng = np.random.default_rng(0)
    h = 1e-6
    for li, (wmat, bvec) in enumerate(p.layers):
        for arr, g in ((wmat, grads[li][0]), (bvec, grads[li][1])):
            for _ in range(6):
                idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
                old = arr[idx]
                arr[idx] = old + h
                up, _ = _batch_loss(p, xq, xc, w, tau)
                arr[idx] = old - h
                down, _ = _batch_loss(p, xq, xc, w, tau)
                arr[idx] = old
                numeric = (up - down) / (2 * h)
                assert g[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-7)


def test_loss_rejects_bad_tau():
    with pytest.raises(ConfigError):
        TrainConfig(tau=0)
    with pytest.raises(ConfigError):
        TrainConfig(alpha=-1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 2.0))
def test_loss_bounded_below_by_entropy(seed, tau):
    # cross-entropy >= entropy of the teacher weights
    ex = example(seed)
    loss, _ = distill_loss(ex, small_params(seed % 7), TrainConfig(tau=tau))
    w = np.asarray(ex.weights)
    w = w[w > 0]
    assert loss >= float(-(w * np.log(w)).sum()) - 1e-9


# -- training -------------------------------------------------------------------------


def test_training_lowers_loss_and_is_deterministic():
    exs = [example(s) for s in range(40)]
    cfg = TrainConfig(epochs=8, batch_size=8, hidden=(16, 16), out_dim=8, learning_rate=3e-3, seed=2)
    a = train(exs, cfg)
    b = train(exs, cfg)
    assert a.loss_curve == b.loss_curve
    assert a.params.digest() == b.params.digest()
    assert a.loss_curve[-1] < a.loss_curve[0]


def test_training_needs_examples():
    with pytest.raises(DataError):
        train([], TrainConfig())


def test_diverged_message_names_step(monkeypatch):
    import stockrag.retriever as r

    monkeypatch.setattr(r, "_batch_loss", lambda *a: (float("nan"), None))
    with pytest.raises(TrainingDiverged, match="epoch 0 step 0"):
        train([example(0)], TrainConfig(epochs=1))


# -- retrieval --------------------------------------------------------------------------


def test_topk_matches_bruteforce():
    enc = NumericEncoder(small_params(9))
    cands = [candidate(i, indicator=INDICATORS[i % len(INDICATORS)]) for i in range(300)]
    cands = [c for c in cands if not isinstance(c.value_list[0], str)]
    q = query()
    got = retrieve_topk(q, cands, enc, 7)
    eq = enc.encode([q])[0]
    sims = enc.encode(cands) @ eq
    want = sorted(range(len(cands)), key=lambda i: (-sims[i], *cands[i].sort_key))[:7]
    assert [c for c, _ in got] == [cands[i] for i in want]
    assert retrieve_topk(q, cands, enc, 0) == [] and retrieve_topk(q, [], enc, 3) == []
    assert len(retrieve_topk(q, cands[:4], enc, 10)) == 4


def test_topk_tie_break():
    enc = NumericEncoder(small_params(9))
    same = [Candidate(s, d, "rise", "close", window(d), (1.0, 2.0, 3.0, 4.0, 5.0))
            for s in ("B", "A") for d in (DAY0 + timedelta(days=3), DAY0)]
    got = [c for c, _ in retrieve_topk(query(), same, enc, 4)]
    assert [(c.candidate_date, c.candidate_stock) for c in got] == sorted(
        (c.candidate_date, c.candidate_stock) for c in same)


def test_cached_embeddings_rank_identically(tmp_path):
    enc = NumericEncoder(small_params(3))
    cands = [candidate(i) for i in range(200)]
    save_embedding_cache(enc.encode(cands), tmp_path / "e.fsemb")
    cached = load_embedding_cache(tmp_path / "e.fsemb")
    assert cached.dtype == np.float32
    q = query()
    assert retrieve_topk(q, cands, enc, 10) == retrieve_topk(q, cands, enc, 10, candidate_embeddings=cached)


# -- binary formats -----------------------------------------------------------------


def test_params_roundtrip(tmp_path):
    p = init_params(default_dims(), seed=5)
    path = tmp_path / "p.fseer"
    save_params(p, path)
    back = load_params(path)
    assert back.dims == p.dims and back.seed == 5
    for (w1, b1), (w2, b2) in zip(p.layers, back.layers):
        assert np.array_equal(w1.astype(np.float32), w2.astype(np.float32))
        assert np.array_equal(b1.astype(np.float32), b2.astype(np.float32))
    save_params(back, tmp_path / "again.fseer")
    assert (tmp_path / "again.fseer").read_bytes() == path.read_bytes()


def test_params_corruption_detected(tmp_path):
    path = tmp_path / "p.fseer"
    save_params(small_params(), path)
    raw = bytearray(path.read_bytes())
    raw[40] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="checksum"):
        load_params(path)
    path.write_bytes(b"XXXXXX" + bytes(raw[6:]))
    with pytest.raises(DataError, match="magic"):
        load_params(path)


def test_cache_header(tmp_path):
    m = np.arange(12, dtype=np.float32).reshape(3, 4)
    save_embedding_cache(m, tmp_path / "c")
    raw = (tmp_path / "c").read_bytes()
    assert raw[:6] == b"FSEMB1" and len(raw) == 6 + 12 + 48
    assert np.array_equal(load_embedding_cache(tmp_path / "c"), m)
    (tmp_path / "bad").write_bytes(b"nope" + raw)
    with pytest.raises(DataError):
        load_embedding_cache(tmp_path / "bad")
