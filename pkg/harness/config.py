"""Bench configuration: TOML tables loaded into frozen dataclasses."""

import hashlib
import json
import logging
import math
import tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from numeric.errors import ConfigError

logger = logging.getLogger("gestalt.harness")

DEFAULTS_PATH = Path(__file__).parent / "defaults.toml"

FAMILIES = ("locate", "relation", "containment", "occlusion", "path", "causal_why")
VARIANTS = ("gestalt_tower", "dot_product_attention", "no_closure", "no_continuity",
            "attention_weights_vs_causal_weights")


def _require(condition: bool, message: str):
    if not condition:
        raise ConfigError(message)


@dataclass(frozen=True)
class SegmentationConfig:
    k: int = 64
    compactness: float = 0.1
    iters: int = 10
    min_region: int = 4

    def __post_init__(self):
        _require(self.k >= 1, "segmentation.k must be >= 1")
        _require(self.compactness >= 0, "segmentation.compactness must be >= 0")
        _require(self.iters >= 1, "segmentation.iters must be >= 1")
        _require(self.min_region >= 1, "segmentation.min_region must be >= 1")


@dataclass(frozen=True)
class TowerConfig:
    tau: float = 8.0
    metric: str = "euclidean"
    hops: float = math.inf
    k_clusters: int = 0
    bridge_gap_max: float = 5.0
    decay: float = 0.7
    edge_threshold: float = 0.1
    entity_threshold: float = 0.001
    prior_threshold: float = 0.5
    gate_init: tuple = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        _require(self.tau > 0, "tower.tau must be positive")
        _require(self.metric in ("euclidean", "manhattan"), f"tower.metric {self.metric!r} unknown")
        _require(self.hops >= 1, "tower.hops must be >= 1")
        _require(self.k_clusters >= 0, "tower.k_clusters must be >= 0")
        _require(self.bridge_gap_max >= 0, "tower.bridge_gap_max must be >= 0")
        _require(0 < self.decay < 1, "tower.decay must lie in (0, 1)")
        _require(0 < self.prior_threshold <= 1, "tower.prior_threshold must lie in (0, 1]")
        _require(len(self.gate_init) == 4, "tower.gate_init needs 4 logits")


@dataclass(frozen=True)
class TextConfig:
    mask_p: float = 0.5
    dropout_p: float = 0.1
    lexicon: str = ""
    max_tokens: int = 64

    def __post_init__(self):
        _require(0 <= self.mask_p <= 1, "text.mask_p must lie in [0, 1]")
        _require(0 <= self.dropout_p < 1, "text.dropout_p must lie in [0, 1)")
        _require(self.max_tokens >= 2, "text.max_tokens must be >= 2")


@dataclass(frozen=True)
class FusionConfig:
    width: int = 32
    conv_channels: int = 16
    decoder_width: int = 128
    blocks: int = 4
    intervention_blocks: tuple = (3, 4)
    expert_hidden: int = 64
    sparsify_k: int = 16
    delta: float = 0.05
    strengthen_factor: float = 1.1
    strengthen_cap: float = 4.0
    strengthen_top_k: int = 8
    max_answer_len: int = 4

    def __post_init__(self):
        for name in ("width", "conv_channels", "decoder_width", "blocks", "expert_hidden",
                     "sparsify_k", "strengthen_top_k", "max_answer_len"):
            _require(getattr(self, name) >= 1, f"fusion.{name} must be >= 1")
        _require(self.delta >= 0, "fusion.delta must be >= 0")
        _require(self.strengthen_factor >= 1, "fusion.strengthen_factor must be >= 1")
        _require(self.strengthen_cap >= 1, "fusion.strengthen_cap must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 5
    batch_size: int = 16
    learning_rate: float = 0.003
    lambda_closure: float = 0.5
    lambda_causal: float = 0.2
    intervention_every: int = 0
    variant: str = "gestalt_tower"

    def __post_init__(self):
        _require(self.epochs >= 1 and self.batch_size >= 1, "train.epochs and batch_size must be >= 1")
        _require(self.learning_rate > 0, "train.learning_rate must be positive")
        _require(self.lambda_closure >= 0 and self.lambda_causal >= 0, "loss weights must be >= 0")
        _require(self.intervention_every >= 0, "train.intervention_every must be >= 0")
        _require(self.variant in VARIANTS, f"train.variant {self.variant!r} unknown")


@dataclass(frozen=True)
class DataConfig:
    canvas: int = 64
    min_objects: int = 2
    max_objects: int = 4
    n_train: int = 500
    n_eval: int = 200
    families: tuple = FAMILIES
    workers: int = 1

    def __post_init__(self):
        _require(self.canvas >= 32, "data.canvas must be >= 32")
        _require(1 <= self.min_objects <= self.max_objects <= 5, "need 1 <= min_objects <= max_objects <= 5")
        _require(self.n_train >= 1 and self.n_eval >= 1, "dataset sizes must be >= 1")
        _require(bool(self.families) and set(self.families) <= set(FAMILIES),
                 f"data.families must be a non-empty subset of {list(FAMILIES)}")
        _require(self.workers >= 1, "data.workers must be >= 1")


@dataclass(frozen=True)
class BenchConfig:
    segmentation: SegmentationConfig = field(default_factory=SegmentationConfig)
    tower: TowerConfig = field(default_factory=TowerConfig)
    text: TextConfig = field(default_factory=TextConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def with_train(self, **changes) -> "BenchConfig":
        return replace(self, train=replace(self.train, **changes))


_TABLES = {f.name: f.default_factory for f in fields(BenchConfig)}


def _coerce(table: str, cls, values: dict):
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"[{table}] unknown keys: {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for key, value in values.items():
        default = getattr(defaults, key)
        if isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{table}.{key} must be a list")
            value = tuple(value)
        elif isinstance(default, bool) or isinstance(value, bool):
            raise ConfigError(f"{table}.{key} has the wrong type")
        elif isinstance(default, float):
            if not isinstance(value, (int, float)):
                raise ConfigError(f"{table}.{key} must be a number")
            value = float(value)
        elif not isinstance(value, type(default)):
            raise ConfigError(f"{table}.{key} must be {type(default).__name__}, got {type(value).__name__}")
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path: Optional[Path] = None) -> BenchConfig:
    """Defaults from defaults.toml with an optional user file merged over them."""
    with DEFAULTS_PATH.open("rb") as fh:
        merged = tomllib.load(fh)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        try:
            with path.open("rb") as fh:
                user = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        unknown = set(user) - set(_TABLES)
        if unknown:
            raise ConfigError(f"unknown config tables: {sorted(unknown)}")
        for table, values in user.items():
            merged[table] = {**merged.get(table, {}), **values}
        logger.info(f"loaded config overrides from {path}")
    tables = {name: _coerce(name, type(factory()), merged.get(name, {})) for name, factory in _TABLES.items()}
    return BenchConfig(**tables)


def _jsonable(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def config_hash(config: BenchConfig) -> str:
    """sha256 over the tables that shape the model's parameters and inputs."""
    shaping = {name: asdict(getattr(config, name)) for name in ("segmentation", "tower", "text", "fusion")}
    shaping["variant"] = config.train.variant
    canonical = json.dumps(_jsonable(shaping), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
