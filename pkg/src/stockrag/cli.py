"""Command-line entry point.

Every subcommand reads ``--config`` (default ``config.ini``), writes its
artifacts under the configured output directory, records them in
``manifest.json`` and prints one JSON summary line on stdout.

Exit status: 0 success, 1 engine error, 2 usage, 3 bad config, 4 manifest
mismatch, 5 forecaster failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import random
import sys
from datetime import date
from pathlib import Path

from . import __version__
from .config import RETRIEVERS, EngineConfig, load_config, render_config
from .errors import ConfigError, DataError, EngineError, ManifestMismatch, PoolError
from .evaluation import (
    DTWRetriever,
    EmbeddingRetriever,
    NoRetriever,
    RandomRetriever,
    mi_report,
    run_experiment,
    write_report,
)
from .features import FeatureTable, build_feature_table, read_datastore, write_datastore
from .forecasters import RemoteEmbedder, RemoteForecaster, SyntheticForecaster
from .market import SPLITS, PartitionSpec, builtin_partition, read_bars_csv, read_bars_jsonl, write_bars_jsonl
from .retriever import (
    NumericEncoder,
    TextEncoder,
    TrainConfig,
    load_embedding_cache,
    load_params,
    save_embedding_cache,
    save_params,
    train,
)
from .scorer import load_examples, load_template, mine_training_example, sample_for_scoring, save_examples, score_candidates
from .sequences import (
    CandidatePool,
    advance_pool,
    build_pool,
    enumerate_queries,
    load_pool,
    load_queries,
    next_trading_day,
    save_pool,
    save_queries,
)
from .synthetic import MarketSpec, default_partition, generate_market, volume_rule, write_market_csv

logger = logging.getLogger("stockrag")

RULES = {"volume_rule": volume_rule}
MANIFEST = "manifest.json"


# -- manifest ---------------------------------------------------------------------


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Per-artifact provenance: content hash, config hash, input hashes, version."""

    def __init__(self, out: Path):
        self.path = out / MANIFEST
        self.out = out
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                self.entries = json.load(fh)["artifacts"]
        else:
            self.entries = {}

    def record(self, name: str, cfg: EngineConfig, inputs=(), external=None, **extra) -> None:
        entry = {
            "sha256": sha256_file(self.out / name),
            "config_hash": cfg.digest(),
            "inputs": {i: self.entries[i]["sha256"] for i in inputs},
            "tool_version": __version__,
        }
        if external:
            entry["external_inputs"] = external
        entry.update(extra)
        self.entries[name] = entry
        self.save()

    def save(self) -> None:
        with open(self.path, "w", encoding="utf-8") as fh:
            json.dump({"artifacts": dict(sorted(self.entries.items()))}, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def verify(self, names, cfg: EngineConfig) -> None:
        problems = []
        for name in names:
            path = self.out / name
            if not path.exists():
                raise DataError(f"missing artifact {path}")
            entry = self.entries.get(name)
            if entry is None:
                problems.append(f"{name}: no manifest entry")
                continue
            if sha256_file(path) != entry["sha256"]:
                problems.append(f"{name}: content changed since it was built")
            if entry["config_hash"] != cfg.digest():
                problems.append(f"{name}: built under a different config")
            for dep, digest in entry["inputs"].items():
                dep_entry = self.entries.get(dep)
                if dep_entry is None or dep_entry["sha256"] != digest:
                    problems.append(f"{name}: input {dep} changed since it was built")
        if problems:
            raise ManifestMismatch("; ".join(problems) + " (use --force to override)")


# -- shared loaders ----------------------------------------------------------------


def _partition(cfg: EngineConfig) -> PartitionSpec:
    p = cfg.data.partition
    return builtin_partition(p) if p in ("acl18", "bigdata22", "stock23") else PartitionSpec.load(cfg.path(p))


def _require(path: Path) -> Path:
    if not path.exists():
        raise DataError(f"missing artifact {path}; run the earlier pipeline step first")
    return path


def _table(cfg: EngineConfig) -> FeatureTable:
    return read_datastore(_require(cfg.out / "datastore.jsonl"))


def _dataset_start(cfg: EngineConfig, table: FeatureTable) -> date:
    if cfg.start_date:
        return cfg.start_date
    cal = table.calendar()
    if not cal:
        raise DataError("feature table is empty")
    return cal[0]


def _split_table(cfg: EngineConfig, table: FeatureTable, split: str) -> FeatureTable:
    return table.restrict(_partition(cfg).tickers(split))


def build_forecaster(cfg: EngineConfig, table: FeatureTable, seed: int):
    f = cfg.forecaster
    if f.kind == "remote":
        return RemoteForecaster(f.url, token=os.environ.get(f.token_env), timeout=f.timeout,
                                max_retries=f.max_retries, backoff=f.backoff)
    if f.rule not in RULES:
        raise ConfigError(f"[forecaster] unknown rule {f.rule!r}; known: {sorted(RULES)}")
    return SyntheticForecaster(
        table, f.planted, RULES[f.rule], gain=f.gain, noise=f.noise, seed=seed,
        default_weight=f.default_weight, planted_weight=f.planted_weight,
    )


def _encoder(cfg: EngineConfig, out: Path):
    if cfg.retrieval.encoder == "text":
        e = cfg.embedder
        return TextEncoder(RemoteEmbedder(e.url, token=os.environ.get(e.token_env), timeout=e.timeout,
                                          max_retries=e.max_retries))
    return NumericEncoder(load_params(_require(out / "params.fseer")))


def build_retriever(cfg: EngineConfig, name: str, pool: CandidatePool, split: str, seed: int, man: Manifest):
    if name == "none":
        return NoRetriever()
    if name == "dtw":
        return DTWRetriever(pool)
    if name == "random":
        return RandomRetriever(pool, seed)
    encoder = _encoder(cfg, man.out)
    cache = f"embeddings_{split}.fsemb"
    pool_name = f"pool_{split}.jsonl"
    deps = {pool_name: man.entries.get(pool_name, {}).get("sha256")}
    if cfg.retrieval.encoder == "numeric":
        deps["params.fseer"] = man.entries.get("params.fseer", {}).get("sha256")
    entry = man.entries.get(cache)
    if (man.out / cache).exists() and entry and entry["inputs"] == deps and entry.get("encoder") == encoder.key:
        emb = load_embedding_cache(man.out / cache)
    else:
        emb = encoder.encode(pool.candidates)
        save_embedding_cache(emb, man.out / cache)
        man.record(cache, cfg, inputs=[d for d in deps if d in man.entries], encoder=encoder.key)
    return EmbeddingRetriever(pool, encoder, emb)


def _emit(summary: dict) -> None:
    print(json.dumps(summary), flush=True)


# -- subcommands -------------------------------------------------------------------


def cmd_synth(args) -> dict:
    target = Path(args.dir)
    target.mkdir(parents=True, exist_ok=True)
    spec = MarketSpec(n_stocks=args.stocks, n_days=args.days, seed=args.seed)
    rows = generate_market(spec)
    write_market_csv(rows, target / "market.csv")
    default_partition(args.stocks).save(target / "partition.json")
    cfg = EngineConfig(seed=args.seed)
    (target / "config.ini").write_text(render_config(cfg), encoding="utf-8")
    return {"command": "synth", "dir": str(target), "rows": len(rows), "stocks": args.stocks}


def cmd_ingest(cfg: EngineConfig, args) -> dict:
    src = cfg.path(cfg.data.bars_csv)
    bars = read_bars_csv(src)
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    write_bars_jsonl(bars, out / "bars.jsonl")
    Manifest(out).record("bars.jsonl", cfg, external={str(cfg.data.bars_csv): sha256_file(src)})
    return {"command": "ingest", "bars": len(bars), "stocks": len(bars.stocks), "anomalies": len(bars.anomalies)}


def cmd_features(cfg: EngineConfig, args) -> dict:
    out = cfg.out
    bars = read_bars_jsonl(_require(out / "bars.jsonl"))
    universe = _partition(cfg).universe
    missing = sorted(universe - set(bars.stocks))
    if missing:
        logger.warning("partition tickers without bars: %s", ", ".join(missing))
    table = build_feature_table(bars.restrict(universe & set(bars.stocks)), cfg.indicators)
    n = write_datastore(table, out / "datastore.jsonl")
    Manifest(out).record("datastore.jsonl", cfg, inputs=["bars.jsonl"])
    return {"command": "features", "records": n, "stocks": len(table.stocks)}


def cmd_queries(cfg: EngineConfig, args) -> dict:
    out = cfg.out
    table = _table(cfg)
    start = _dataset_start(cfg, table)
    spec = _partition(cfg)
    man = Manifest(out)
    counts = {}
    for split in SPLITS:
        name = f"queries_{split}.jsonl"
        counts[split] = save_queries(enumerate_queries(table, spec.tickers(split), start), out / name)
        man.record(name, cfg, inputs=["datastore.jsonl"])
    return {"command": "queries", "dataset_start": start.isoformat(), "counts": counts}


def cmd_pool(cfg: EngineConfig, args) -> dict:
    out = cfg.out
    table = _table(cfg)
    start = _dataset_start(cfg, table)
    man = Manifest(out)
    splits = [args.split] if args.split else list(SPLITS)
    summary = {"command": "pool", "pools": {}}
    for split in splits:
        sub = _split_table(cfg, table, split)
        name = f"pool_{split}.jsonl"
        if args.advance:
            pool = load_pool(_require(out / name))
            before = len(pool)
            for _ in range(args.advance):
                nxt = next_trading_day(sub, pool.as_of)
                if nxt is None:
                    raise PoolError(f"{name}: no trading day after {pool.as_of}")
                pool = advance_pool(pool, sub, nxt)
            added = len(pool) - before
        else:
            cal = sub.calendar()
            if not cal:
                raise DataError(f"split {split!r} has no feature rows")
            as_of = date.fromisoformat(args.as_of) if args.as_of else cal[-1]
            pool = build_pool(sub, as_of, start)
            added = len(pool)
        save_pool(pool, out / name)
        man.record(name, cfg, inputs=["datastore.jsonl"], high_water=pool.as_of.isoformat())
        summary["pools"][split] = {"count": len(pool), "added": added, "high_water": pool.as_of.isoformat()}
    return summary


def cmd_score(cfg: EngineConfig, args) -> dict:
    out = cfg.out
    s = cfg.scoring
    table = _table(cfg)
    qname, pname = f"queries_{s.split}.jsonl", f"pool_{s.split}.jsonl"
    queries = load_queries(_require(out / qname))
    pool = load_pool(_require(out / pname))
    if len(queries) > s.max_examples:
        keep = sorted(random.Random(f"{cfg.seed}|score").sample(range(len(queries)), s.max_examples))
        queries = [queries[i] for i in keep]
    forecaster = build_forecaster(cfg, table, cfg.seed)
    template = load_template("rag")
    examples, skipped = [], 0
    for q in queries:
        view = pool.view(q.query_date)
        if len(view) <= s.n_negatives:
            skipped += 1
            continue
        cands = sample_for_scoring(view, q, s.n_candidates, cfg.seed)
        scored = score_candidates(q, cands, forecaster, template, s.max_workers)
        if len(scored) <= s.n_negatives:
            skipped += 1
            continue
        examples.append(mine_training_example(scored, q, s.alpha, s.n_negatives))
    n = save_examples(examples, out / "training_examples.jsonl")
    Manifest(out).record("training_examples.jsonl", cfg, inputs=[qname, pname, "datastore.jsonl"])
    return {"command": "score", "examples": n, "skipped": skipped}


def _train_config(cfg: EngineConfig) -> TrainConfig:
    t = cfg.training
    return TrainConfig(alpha=cfg.scoring.alpha, tau=t.tau, learning_rate=t.learning_rate,
                       batch_size=t.batch_size, epochs=t.epochs, seed=cfg.seed,
                       hidden=t.hidden_sizes, out_dim=t.out_dim)


def cmd_train(cfg: EngineConfig, args) -> dict:
    out = cfg.out
    examples = load_examples(_require(out / "training_examples.jsonl"))
    result = train(examples, _train_config(cfg))
    save_params(result.params, out / "params.fseer")
    with open(out / "loss_curve.json", "w", encoding="utf-8") as fh:
        json.dump(result.loss_curve, fh)
        fh.write("\n")
    man = Manifest(out)
    man.record("params.fseer", cfg, inputs=["training_examples.jsonl"])
    man.record("loss_curve.json", cfg, inputs=["training_examples.jsonl"])
    return {
        "command": "train",
        "examples": len(examples),
        "epochs": len(result.loss_curve),
        "final_loss": result.loss_curve[-1] if result.loss_curve else None,
        "params_sha256": man.entries["params.fseer"]["sha256"],
    }


def _retrieval_inputs(cfg: EngineConfig, name: str, split: str) -> list[str]:
    inputs = [f"queries_{split}.jsonl", f"pool_{split}.jsonl"]
    if name == "finseer" and cfg.retrieval.encoder == "numeric":
        inputs.append("params.fseer")
    return inputs


def cmd_retrieve(cfg: EngineConfig, args) -> dict:
    out = cfg.out
    split = cfg.retrieval.split
    k = cfg.retrieval.k if args.k is None else args.k
    seed = cfg.seed if args.seed is None else args.seed
    man = Manifest(out)
    queries = load_queries(_require(out / f"queries_{split}.jsonl"))
    pool = load_pool(_require(out / f"pool_{split}.jsonl"))
    retriever = build_retriever(cfg, args.retriever, pool, split, seed, man)
    name = f"retrieval_{args.retriever}.jsonl"
    with open(out / name, "w", encoding="utf-8") as fh:
        for q in queries:
            hits = retriever.retrieve(q, k)
            fh.write(json.dumps({
                "query_id": q.id,
                "retrieved": [
                    {"id": c.id, "indicator": c.indicator, "movement": c.candidate_movement, "score": sc}
                    for c, sc in hits
                ],
            }) + "\n")
    man.record(name, cfg, inputs=_retrieval_inputs(cfg, args.retriever, split), seed=seed, k=k)
    return {"command": "retrieve", "retriever": args.retriever, "queries": len(queries), "k": k}


def cmd_evaluate(cfg: EngineConfig, args) -> dict:
    out = cfg.out
    split = cfg.retrieval.split
    seed = cfg.seed if args.seed is None else args.seed
    k = cfg.retrieval.k if args.k is None else args.k
    man = Manifest(out)
    inputs = ["datastore.jsonl", *_retrieval_inputs(cfg, args.retriever, split)]
    if not args.force:
        man.verify(inputs, cfg)
    table = _table(cfg)
    queries = load_queries(out / f"queries_{split}.jsonl")
    pool = load_pool(out / f"pool_{split}.jsonl")
    retriever = build_retriever(cfg, args.retriever, pool, split, seed, man)
    forecaster = build_forecaster(cfg, table, seed)
    template = load_template("bare" if args.retriever == "none" else "rag")
    planted = cfg.forecaster.planted if cfg.forecaster.kind == "synthetic" else None
    stem = f"{args.retriever}"
    log_name, report_name, csv_name = f"eval_{stem}.log.jsonl", f"report_{stem}.json", f"occurrences_{stem}.csv"
    report, _ = run_experiment(queries, retriever, forecaster, template, k, out / log_name,
                               cfg.retrieval.max_workers, planted)
    write_report(report, out / report_name, out / csv_name)
    for name in (log_name, report_name, csv_name):
        man.record(name, cfg, inputs=inputs, seed=seed, k=k)
    return {"command": "evaluate", **{key: getattr(report, key) for key in
                                      ("retriever", "k", "queries", "abstains", "acc", "mcc", "hit_rate")}}


def cmd_mi(cfg: EngineConfig, args) -> dict:
    out = cfg.out
    m = cfg.mi
    table = _split_table(cfg, _table(cfg), m.split)
    report = mi_report(table, top=m.top, bins=m.bins, estimator=m.estimator)
    with open(out / "mi_report.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    Manifest(out).record("mi_report.json", cfg, inputs=["datastore.jsonl"])
    return {"command": "mi", "features": len(report["scores"]), "selected": report["selected"]}


def cmd_pipeline(cfg: EngineConfig, args) -> dict:
    steps = [cmd_ingest, cmd_features, cmd_queries]
    for step in steps:
        _emit(step(cfg, args))
    _emit(cmd_pool(cfg, argparse.Namespace(split=None, as_of=None, advance=0)))
    _emit(cmd_score(cfg, args))
    _emit(cmd_train(cfg, args))
    reports = {}
    for name in args.retrievers:
        ns = argparse.Namespace(retriever=name, seed=None, k=None, force=False)
        res = cmd_evaluate(cfg, ns)
        _emit(res)
        reports[name] = {"acc": res["acc"], "mcc": res["mcc"], "hit_rate": res["hit_rate"]}
    return {"command": "pipeline", "reports": reports}


# -- argument parsing --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", default="config.ini", help="engine config file (INI)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="stockrag", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("synth", help="write a synthetic market, partition and config")
    p.add_argument("dir")
    p.add_argument("--stocks", type=int, default=10)
    p.add_argument("--days", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")

    sub.add_parser("ingest", parents=[common], help="CSV bars -> bars.jsonl")
    sub.add_parser("features", parents=[common], help="bars -> feature table datastore")
    sub.add_parser("queries", parents=[common], help="enumerate query files per split")
    p = sub.add_parser("pool", parents=[common], help="build or advance candidate pools")
    p.add_argument("--split", choices=SPLITS)
    p.add_argument("--as-of", help="high-water date for a fresh build (default: last trading day)")
    p.add_argument("--advance", type=int, default=0, metavar="N", help="append N trading days to an existing pool")
    sub.add_parser("score", parents=[common], help="mine training examples with the forecaster")
    sub.add_parser("train", parents=[common], help="fit the embedder on mined examples")
    for name, helptext in (("retrieve", "top-k retrieval for the query file"),
                           ("evaluate", "run an experiment and write its report")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        choices = RETRIEVERS if name == "evaluate" else RETRIEVERS[:3]
        p.add_argument("--retriever", choices=choices, default="finseer")
        p.add_argument("--seed", type=int)
        p.add_argument("--k", type=int)
        if name == "evaluate":
            p.add_argument("--force", action="store_true", help="skip manifest hash checks")
    sub.add_parser("mi", parents=[common], help="mutual-information feature report")
    p = sub.add_parser("pipeline", parents=[common], help="ingest through evaluate in one go")
    p.add_argument("--retrievers", nargs="+", choices=RETRIEVERS, default=list(RETRIEVERS))
    return parser


COMMANDS = {
    "ingest": cmd_ingest,
    "features": cmd_features,
    "queries": cmd_queries,
    "pool": cmd_pool,
    "score": cmd_score,
    "train": cmd_train,
    "retrieve": cmd_retrieve,
    "evaluate": cmd_evaluate,
    "mi": cmd_mi,
    "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            _emit(cmd_synth(args))
            return 0
        if getattr(args, "k", None) is not None and args.k < 0:
            raise ConfigError(f"--k must be >= 0, got {args.k}")
        cfg = load_config(args.config)
        _emit(COMMANDS[args.command](cfg, args))
        return 0
    except EngineError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error (OSError): {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
