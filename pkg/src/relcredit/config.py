"""Run configuration: nested dataclasses with a strict JSON round trip."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field

from .boosted import GbdtParams, LogisticConfig
from .contrastive import AugmentConfig, PretrainConfig
from .features import PreprocessConfig
from .gnn import HeteroSageConfig, RelAttnConfig, TrainConfig
from .graph import GraphFeatureConfig
from .ingest import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    source: str = "synthetic"            # "synthetic" | "directory"
    directory: str | None = None
    schema_path: str | None = None       # JSON schema file; default: built-in layout for the source
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass
class SplitConfig:
    fractions: list = field(default_factory=lambda: [0.7, 0.1, 0.2])
    seed: int = 42


@dataclass
class GnnSection:
    archs: list = field(default_factory=lambda: ["sage", "relattn"])
    fanout: list = field(default_factory=lambda: [10, 10])
    train: TrainConfig = field(default_factory=TrainConfig)
    sage: HeteroSageConfig = field(default_factory=HeteroSageConfig)
    relattn: RelAttnConfig = field(default_factory=RelAttnConfig)


@dataclass
class ContrastiveSection:
    enabled: bool = True
    encoder: str = "sage"
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)


def _linear_preprocess() -> PreprocessConfig:
    return PreprocessConfig(center=False, log_twins=True, corr_threshold=0.98)


@dataclass
class TabularSection:
    protocol: str = "split"              # "split": fixed train/val/test; "cv": k folds over train+val
    folds: int = 5
    fold_seed: int = 42
    calibrate: bool = True
    preprocess: PreprocessConfig = field(default_factory=_linear_preprocess)
    logistic: LogisticConfig = field(default_factory=LogisticConfig)
    gbdt: GbdtParams = field(default_factory=GbdtParams)


@dataclass
class HybridSection:
    embedding_arch: str = "relattn"


@dataclass
class MetricsSection:
    group_columns: list = field(default_factory=lambda: ["CODE_GENDER", "AGE_GROUP"])
    tau: float = 0.5
    k_fractions: list = field(default_factory=lambda: [0.05, 0.10])
    age_bin_edges: list = field(default_factory=lambda: [35.0, 50.0])
    calibration_bins: int = 10


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    graph: GraphFeatureConfig = field(default_factory=GraphFeatureConfig)
    gnn: GnnSection = field(default_factory=GnnSection)
    contrastive: ContrastiveSection = field(default_factory=ContrastiveSection)
    tabular: TabularSection = field(default_factory=TabularSection)
    hybrid: HybridSection = field(default_factory=HybridSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)


def _build(tp, value, path: str):
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        hints = typing.get_type_hints(tp)
        names = {f.name for f in dataclasses.fields(tp)}
        unknown = set(value) - names
        if unknown:
            raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
        kwargs = {k: _build(hints[k], v, f"{path}.{k}") for k, v in value.items()}
        try:
            return tp(**kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{path}: {e}") from e
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _build(args[0], value, path) if len(args) == 1 else value
    if origin is tuple and isinstance(value, list):
        return tuple(value)
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp in (int, float, str, bool) and not isinstance(value, tp):
        raise ConfigError(f"{path}: expected {tp.__name__}, got {type(value).__name__}")
    return value


def config_from_dict(d: dict) -> RunConfig:
    return _build(RunConfig, d, "config")


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    return config_from_dict(raw)


def canonical_json(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))


def config_hash(cfg: RunConfig, exclude_out: bool = True) -> str:
    d = config_to_dict(cfg)
    if exclude_out:
        d.pop("out", None)
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def apply_seed(cfg: RunConfig) -> RunConfig:
    """Propagate the run seed into every stochastic stage (data split seed stays separate)."""
    cfg.gnn.train.seed = cfg.seed
    cfg.contrastive.pretrain.seed = cfg.seed
    cfg.contrastive.pretrain.augment.seed = cfg.seed
    cfg.tabular.gbdt.seed = cfg.seed
    return cfg
