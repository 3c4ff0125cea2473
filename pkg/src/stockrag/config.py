"""Engine configuration: one INI file with sections, validated on load.

Every constant the pipeline relies on is a key here, so the defaults that
fill gaps in the method description are visible (and overridable) at run
time.  Relative paths resolve against the config file's directory.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import date
from io import StringIO
from pathlib import Path

from .errors import ConfigError
from .indicators import IndicatorParams
from .market import SPLITS

RETRIEVERS = ("finseer", "dtw", "random", "none")
BUILTIN_PARTITIONS = ("acl18", "bigdata22", "stock23")


@dataclass(frozen=True)
class DataConfig:
    bars_csv: str = "market.csv"
    partition: str = "partition.json"
    dataset_start: str = ""


@dataclass(frozen=True)
class ScoringConfig:
    split: str = "train"
    n_candidates: int = 64
    n_negatives: int = 15
    alpha: float = 0.05
    max_examples: int = 2000
    max_workers: int = 1


@dataclass(frozen=True)
class TrainingConfig:
    tau: float = 0.02
    learning_rate: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    hidden: str = "128,128"
    out_dim: int = 64

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(int(h) for h in self.hidden.split(",") if h.strip())


@dataclass(frozen=True)
class RetrievalConfig:
    split: str = "test"
    k: int = 5
    encoder: str = "numeric"
    max_workers: int = 1


@dataclass(frozen=True)
class ForecasterConfig:
    kind: str = "synthetic"
    url: str = ""
    token_env: str = "STOCKRAG_FORECASTER_TOKEN"
    timeout: float = 30.0
    max_retries: int = 3
    backoff: float = 0.5
    planted: str = "volume"
    rule: str = "volume_rule"
    gain: float = 4.0
    noise: float = 0.75
    planted_weight: float = 6.0
    default_weight: float = -4.0


@dataclass(frozen=True)
class EmbedderConfig:
    url: str = ""
    token_env: str = "STOCKRAG_EMBEDDER_TOKEN"
    timeout: float = 30.0
    max_retries: int = 3


@dataclass(frozen=True)
class MIConfig:
    split: str = "train"
    bins: int = 16
    estimator: str = "binned"
    top: int = 18


@dataclass(frozen=True)
class EngineConfig:
    base_dir: Path = Path(".")
    seed: int = 0
    output_dir: str = "out"
    data: DataConfig = field(default_factory=DataConfig)
    indicators: IndicatorParams = field(default_factory=IndicatorParams)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    forecaster: ForecasterConfig = field(default_factory=ForecasterConfig)
    embedder: EmbedderConfig = field(default_factory=EmbedderConfig)
    mi: MIConfig = field(default_factory=MIConfig)

    def path(self, p: str) -> Path:
        return (self.base_dir / p).resolve()

    @property
    def out(self) -> Path:
        return self.path(self.output_dir)

    @property
    def start_date(self) -> date | None:
        return date.fromisoformat(self.data.dataset_start) if self.data.dataset_start else None

    def canonical(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_seed(self, seed: int) -> "EngineConfig":
        return replace(self, seed=seed)


_SECTIONS = {
    "data": DataConfig,
    "indicators": IndicatorParams,
    "scoring": ScoringConfig,
    "training": TrainingConfig,
    "retrieval": RetrievalConfig,
    "forecaster": ForecasterConfig,
    "embedder": EmbedderConfig,
    "mi": MIConfig,
}


def _coerce(cls, section: str, raw: dict):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, text in raw.items():
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        default = getattr(cls(), key)
        try:
            if isinstance(default, bool):
                value = text.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                value = int(text)
            elif isinstance(default, float):
                value = float(text)
            else:
                value = text.strip()
        except ValueError:
            raise ConfigError(f"[{section}] {key} = {text!r} is not a valid {type(default).__name__}") from None
        kwargs[key] = value
    return cls(**kwargs)


def _validate(cfg: EngineConfig, check_paths: bool) -> None:
    def need(ok, msg):
        if not ok:
            raise ConfigError(msg)

    s, t, r, f, m = cfg.scoring, cfg.training, cfg.retrieval, cfg.forecaster, cfg.mi
    need(s.alpha > 0, f"[scoring] alpha must be > 0, got {s.alpha}")
    need(t.tau > 0, f"[training] tau must be > 0, got {t.tau}")
    need(t.learning_rate > 0, "[training] learning_rate must be > 0")
    need(t.batch_size >= 1 and t.epochs >= 0, "[training] batch_size >= 1 and epochs >= 0 required")
    need(t.out_dim >= 1 and all(h >= 1 for h in t.hidden_sizes), "[training] layer sizes must be positive")
    need(r.k >= 0, f"[retrieval] k must be >= 0, got {r.k}")
    need(s.n_negatives >= 1 and s.n_candidates > s.n_negatives,
         "[scoring] n_candidates must exceed n_negatives >= 1")
    need(s.max_examples >= 1, "[scoring] max_examples must be >= 1")
    need(s.max_workers >= 1 and r.max_workers >= 1, "max_workers must be >= 1")
    for name, split in (("scoring", s.split), ("retrieval", r.split), ("mi", m.split)):
        need(split in SPLITS, f"[{name}] split must be one of {SPLITS}, got {split!r}")
    need(r.encoder in ("numeric", "text"), f"[retrieval] encoder must be numeric or text, got {r.encoder!r}")
    need(r.encoder != "text" or cfg.embedder.url, "[retrieval] encoder = text needs [embedder] url")
    need(f.kind in ("synthetic", "remote"), f"[forecaster] kind must be synthetic or remote, got {f.kind!r}")
    need(f.kind != "remote" or f.url, "[forecaster] kind = remote needs a url")
    need(m.estimator in ("binned", "knn"), f"[mi] estimator must be binned or knn, got {m.estimator!r}")
    need(m.bins >= 2 and m.top >= 1, "[mi] bins >= 2 and top >= 1 required")
    p = cfg.indicators
    need(min(p.macd_fast, p.macd_slow, p.macd_signal, p.bollinger_window, p.kdj_window,
             p.smr_window, p.mom_window) >= 1, "[indicators] windows must be >= 1")
    need(p.macd_fast < p.macd_slow, "[indicators] macd_fast must be below macd_slow")
    need(0 < p.kdj_smoothing <= 1, "[indicators] kdj_smoothing must lie in (0, 1]")
    if cfg.data.dataset_start:
        try:
            date.fromisoformat(cfg.data.dataset_start)
        except ValueError:
            raise ConfigError(f"[data] dataset_start {cfg.data.dataset_start!r} is not YYYY-MM-DD") from None
    if check_paths:
        need(cfg.path(cfg.data.bars_csv).exists(), f"[data] bars_csv {cfg.path(cfg.data.bars_csv)} does not exist")
        if cfg.data.partition not in BUILTIN_PARTITIONS:
            need(cfg.path(cfg.data.partition).exists(),
                 f"[data] partition {cfg.path(cfg.data.partition)} does not exist")


def load_config(path: str | Path, check_paths: bool = True) -> EngineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = set(parser.sections()) - set(_SECTIONS) - {"run", "output"}
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    kwargs = {name: _coerce(cls, name, dict(parser[name])) for name, cls in _SECTIONS.items() if name in parser}
    run = dict(parser["run"]) if "run" in parser else {}
    if set(run) - {"seed"}:
        raise ConfigError(f"[run] unknown key(s) {sorted(set(run) - {'seed'})}")
    output = dict(parser["output"]) if "output" in parser else {}
    if set(output) - {"dir"}:
        raise ConfigError(f"[output] unknown key(s) {sorted(set(output) - {'dir'})}")
    try:
        seed = int(run.get("seed", 0))
    except ValueError:
        raise ConfigError(f"[run] seed {run['seed']!r} is not an integer") from None
    cfg = EngineConfig(base_dir=path.parent.resolve(), seed=seed, output_dir=output.get("dir", "out"), **kwargs)
    _validate(cfg, check_paths)
    return cfg


def render_config(cfg: EngineConfig) -> str:
    """INI text for ``cfg``; ``load_config`` of the result reproduces it."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["run"] = {"seed": str(cfg.seed)}
    parser["output"] = {"dir": cfg.output_dir}
    for name in _SECTIONS:
        parser[name] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in asdict(getattr(cfg, name)).items()}
    buf = StringIO()
    parser.write(buf)
    return buf.getvalue()
