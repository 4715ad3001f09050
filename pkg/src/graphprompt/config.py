"""Run configuration: one YAML/JSON document covering every pipeline stage."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path

import yaml

from .encoder import EncoderConfig
from .errors import ConfigError, GraphPromptError
from .graph import GraphCollection, SyntheticSpec, generate_synthetic, load_tu_dataset
from .pretrain import PretrainConfig
from .sampling import GRAPH, NODE
from .seeding import derive_seed
from .tuning import TuneConfig

DATA_DIR_ENV = "GRAPHPROMPT_DATA"

DEFAULTS = {
    "dataset": {"name": None, "path": None, "synthetic": None},
    "encoder": {"num_layers": 3, "hidden_dim": 32, "embedding_mode": "concat", "epsilon": 0.0},
    "pretrain": {
        "tau": 1.0, "triplets_per_graph": 100, "batch_size": 128, "learning_rate": 1e-3,
        "max_epochs": 200, "patience": 20, "delta": 1, "negatives": 1, "seed": None,
    },
    "tune": {
        "tau": 1.0, "learning_rate": 1e-2, "max_epochs": 200, "patience": 20,
        "variant": "prompt", "delta": 1,
    },
    "protocol": {"level": "graph", "k": 5, "num_tasks": None, "class_subset": None, "min_graph_nodes": 50},
    "output_dir": "runs",
    "seed": 0,
    "jobs": None,
}

SYNTHETIC_KEYS = {
    "num_graphs", "nodes_per_graph", "edge_prob", "feature_dim", "node_class_count",
    "graph_class_count", "cross_factor", "separation", "noise", "seed",
}

DEFAULT_NUM_TASKS = {NODE: 10, GRAPH: 100}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key != "synthetic":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass(frozen=True)
class RunConfig:
    """Validated, fully merged configuration. ``raw`` is the effective document."""

    raw: dict

    @classmethod
    def from_dict(cls, doc: dict | None) -> "RunConfig":
        merged = _merge(DEFAULTS, doc or {})
        ds = merged["dataset"]
        if ds["synthetic"] is not None:
            if not isinstance(ds["synthetic"], dict):
                raise ConfigError("dataset.synthetic must be a mapping")
            unknown = set(ds["synthetic"]) - SYNTHETIC_KEYS
            if unknown:
                raise ConfigError(f"unknown config key 'dataset.synthetic.{sorted(unknown)[0]}'")
        elif not ds["path"]:
            if ds["name"] and os.environ.get(DATA_DIR_ENV):
                ds["path"] = str(Path(os.environ[DATA_DIR_ENV]) / ds["name"])
            else:
                raise ConfigError("missing required config key 'dataset.path'")
        if ds["path"] and not ds["name"]:
            raise ConfigError("missing required config key 'dataset.name'")
        proto = merged["protocol"]
        if proto["level"] not in (NODE, GRAPH):
            raise ConfigError(f"protocol.level must be 'node' or 'graph', got {proto['level']!r}")
        cfg = cls(merged)
        try:
            cfg.pretrain_config()
            cfg.tune_config()
        except GraphPromptError as exc:
            raise ConfigError(str(exc)) from exc
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "RunConfig":
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping")
        if overrides:
            doc = _merge(_merge(DEFAULTS, doc), overrides)
        return cls.from_dict(doc)

    def with_overrides(self, overrides: dict) -> "RunConfig":
        return RunConfig.from_dict(_merge(self.raw, overrides))

    # -- derived views -------------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def level(self) -> str:
        return self.raw["protocol"]["level"]

    @property
    def k(self) -> int:
        return int(self.raw["protocol"]["k"])

    @property
    def num_tasks(self) -> int:
        n = self.raw["protocol"]["num_tasks"]
        return DEFAULT_NUM_TASKS[self.level] if n is None else int(n)

    @property
    def variant(self) -> str:
        return self.raw["tune"]["variant"]

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    @property
    def jobs(self) -> int:
        j = self.raw["jobs"]
        return (os.cpu_count() or 1) if j is None else max(1, int(j))

    def encoder_config(self, input_dim: int) -> EncoderConfig:
        return EncoderConfig(input_dim=input_dim, **self.raw["encoder"])

    def pretrain_config(self) -> PretrainConfig:
        p = dict(self.raw["pretrain"])
        if p["seed"] is None:
            p["seed"] = derive_seed(self.seed, "pretrain")
        return PretrainConfig(**p)

    def tune_config(self, task_id: int = 0) -> TuneConfig:
        return TuneConfig(seed=derive_seed(self.seed, "tune", task_id), **self.raw["tune"])

    def dataset_name(self) -> str:
        ds = self.raw["dataset"]
        return ds["name"] or "synthetic"

    def load_dataset(self) -> GraphCollection:
        ds = self.raw["dataset"]
        if ds["synthetic"] is not None:
            spec = dict(ds["synthetic"])
            seed = spec.pop("seed", derive_seed(self.seed, "synthetic"))
            if isinstance(spec.get("nodes_per_graph"), list):
                spec["nodes_per_graph"] = tuple(spec["nodes_per_graph"])
            try:
                return generate_synthetic(SyntheticSpec(**spec), seed, name=ds["name"] or "synthetic")
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"dataset.synthetic: {exc}") from exc
        path = Path(ds["path"])
        if not path.is_absolute() and not path.exists() and os.environ.get(DATA_DIR_ENV):
            path = Path(os.environ[DATA_DIR_ENV]) / path
        return load_tu_dataset(path, ds["name"])
