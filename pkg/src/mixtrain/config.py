"""Experiment configuration (YAML) with defaults that reproduce the reference recipe."""

from __future__ import annotations

import copy
import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from mixtrain.augment import StrategyConfig
from mixtrain.dataio import BACKGROUND, GSC_KEYWORDS, PROTOCOL_TARGETS, ClassMap, ConfigurationError
from mixtrain.evaluation import CONDITIONS
from mixtrain.model import BackboneConfig
from mixtrain.train import TrainConfig

CORPUS_ROOT_ENV = "MIXTRAIN_CORPUS_ROOT"
INTERFERENCE_TABLE_ENV = "MIXTRAIN_INTERFERENCE_TABLE"


@dataclass
class DataConfig:
    keyword_root: str | None = None
    interference_table: str | None = None
    interference_train_count: int = 11000
    interference_test_count: int = 900
    keywords: list[str] = field(default_factory=lambda: list(GSC_KEYWORDS))
    eval_targets: list[str] = field(default_factory=lambda: list(PROTOCOL_TARGETS))
    use_background: bool = True
    subsample_per_class: float = 1.0

    def class_map(self) -> ClassMap:
        classes = list(self.keywords) + ([BACKGROUND] if self.use_background else [])
        return ClassMap(classes, self.eval_targets)


@dataclass
class EvalConfig:
    conditions: list[str] = field(default_factory=lambda: list(CONDITIONS))
    mixed_items: int = 5000
    weak_items: int = 5000
    ratio_measure: str = "peak"
    batch_size: int = 64

    def __post_init__(self):
        bad = [c for c in self.conditions if c not in CONDITIONS]
        if bad:
            raise ConfigurationError(f"unknown eval conditions {bad}; expected a subset of {CONDITIONS}")


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        self.train.seed = self.seed
        self.train.strategy.rng_seed = self.seed

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        return d

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def needs_interference(self) -> bool:
        return self.train.strategy.needs_interference or "noisy_10x" in self.eval.conditions

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def validate_paths(self) -> None:
        root = self.data.keyword_root
        if not root or not Path(root).is_dir():
            raise ConfigurationError(f"keyword corpus root does not exist: {root!r}")
        table = self.data.interference_table
        if self.needs_interference and (not table or not Path(table).is_file()):
            raise ConfigurationError(
                f"strategy {self.train.strategy.name!r} / conditions {self.eval.conditions} need an "
                f"interference transcript table, got {table!r}"
            )


class _KeywordSafeLoader(yaml.SafeLoader):
    """SafeLoader where only true/false are booleans; yes/no/on/off are keywords."""


_KeywordSafeLoader.yaml_implicit_resolvers = {
    ch: [(tag, rx) for tag, rx in resolvers if tag != "tag:yaml.org,2002:bool"]
    for ch, resolvers in yaml.SafeLoader.yaml_implicit_resolvers.items()
}
_KeywordSafeLoader.add_implicit_resolver(
    "tag:yaml.org,2002:bool", re.compile(r"^(?:true|True|TRUE|false|False|FALSE)$"), list("tTfF")
)


def parse_yaml(text: str):
    return yaml.load(text, Loader=_KeywordSafeLoader)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    unknown = set(raw) - {"data", "train", "eval", "output_dir", "seed"}
    if unknown:
        raise ConfigurationError(f"unknown top-level config keys: {sorted(unknown)}")
    base = ExperimentConfig().to_dict()
    merged = _merge(base, raw)
    t = merged["train"]
    try:
        train = TrainConfig(
            **{k: v for k, v in t.items() if k not in ("strategy", "backbone")},
            strategy=StrategyConfig(**t["strategy"]),
            backbone=BackboneConfig(**t["backbone"]),
        )
        data = DataConfig(**merged["data"])
        ev = EvalConfig(**merged["eval"])
    except TypeError as exc:
        raise ConfigurationError(f"bad config: {exc}") from exc
    data_classes = len(data.keywords) + int(data.use_background)
    if "num_classes" not in raw.get("train", {}).get("backbone", {}):
        train.backbone.num_classes = data_classes
    return ExperimentConfig(data, train, ev, merged["output_dir"], int(merged["seed"]))


def load_config(path=None, *, seed=None, strategy=None, out=None, conditions=None) -> ExperimentConfig:
    """Read a YAML config (optional) and apply CLI and environment overrides."""
    raw = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        raw = parse_yaml(text) or {}
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
    raw = copy.deepcopy(raw)
    if seed is not None:
        raw["seed"] = seed
    if strategy is not None:
        raw.setdefault("train", {}).setdefault("strategy", {})["name"] = strategy
    if out is not None:
        raw["output_dir"] = str(out)
    if conditions is not None:
        raw.setdefault("eval", {})["conditions"] = list(conditions)
    if os.environ.get(CORPUS_ROOT_ENV):
        raw.setdefault("data", {})["keyword_root"] = os.environ[CORPUS_ROOT_ENV]
    if os.environ.get(INTERFERENCE_TABLE_ENV):
        raw.setdefault("data", {})["interference_table"] = os.environ[INTERFERENCE_TABLE_ENV]
    try:
        return config_from_dict(raw)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)
