"""Experiment configuration: strict YAML sections per module.

Every field has a documented default; unknown keys are a hard error so a
typo can never silently fall back to a default and invalidate a
comparison. The config hash covers the science-relevant fields plus the
package version; output locations are excluded so re-running the same
experiment into a different directory reproduces identical artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

import affcl
from affcl.errors import ConfigError
from affcl.models import ModelConfig
from affcl.replay import METHODS
from affcl.streams import STREAM_KINDS

_HASH_EXCLUDED = ("out_dir", "run_id", "data_root")


@dataclass
class FederationSection:
    kind: str = "synthetic"            # ltp | shuffle | noisy | synthetic
    num_clients: int = 4
    num_tasks: int = 4
    classes_per_task: int = 2
    noisy_clients: int = 0             # noisy kind only
    per_class_cap: int = 500
    train_fraction: float = 0.85


@dataclass
class PoolSection:
    source: str = "synthetic"          # synthetic | idx
    classes: int = 16
    per_class: int = 500
    image_size: int = 12
    noise_sigma: float = 0.15
    images_path: str | None = None     # idx source only
    labels_path: str | None = None


@dataclass
class ModelSection:
    feature_dim: int = 512
    hidden_width: int = 512
    conv_channels: list = field(default_factory=lambda: [64, 128, 256])
    flow_layers: int = 4
    flow_hidden: int = 256
    flow_blocks: int = 2
    label_embed_dim: int = 32

    def to_model_config(self) -> ModelConfig:
        return ModelConfig(
            feature_dim=self.feature_dim,
            hidden_width=self.hidden_width,
            conv_channels=tuple(self.conv_channels),
            flow_layers=self.flow_layers,
            flow_hidden=self.flow_hidden,
            flow_blocks=self.flow_blocks,
            label_embed_dim=self.label_embed_dim,
        )


@dataclass
class OptimSection:
    lr: float = 1e-4
    batch_size: int = 64
    local_iters: int = 100
    rounds_per_task: int = 10
    prox_mu: float = 0.01
    stats_refit_every: int = 10
    client_fraction: float = 1.0


@dataclass
class SweepSection:
    methods: list = field(default_factory=lambda: ["af_fcl", "af_wo_af"])
    noisy_clients: list = field(default_factory=lambda: [0, 1, 2])


@dataclass
class RuntimeSection:
    torch_threads: int = 1
    checkpoint_every_round: bool = False


@dataclass
class ExperimentConfig:
    method: str = "af_fcl"
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    out_dir: str = "runs"
    run_id: str | None = None
    data_root: str | None = None
    federation: FederationSection = field(default_factory=FederationSection)
    pool: PoolSection = field(default_factory=PoolSection)
    model: ModelSection = field(default_factory=ModelSection)
    optim: OptimSection = field(default_factory=OptimSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    runtime: RuntimeSection = field(default_factory=RuntimeSection)

    # -- construction ----------------------------------------------------

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        cfg = _build(ExperimentConfig, data, path="config")
        cfg.validate()
        return cfg

    @staticmethod
    def from_yaml(path) -> "ExperimentConfig":
        with open(path) as f:
            data = yaml.safe_load(f)
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return ExperimentConfig.from_dict(data)

    # -- validation -------------------------------------------------------

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds must be a nonempty list of integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        fed, pool, opt = self.federation, self.pool, self.optim
        if fed.kind not in STREAM_KINDS:
            raise ConfigError(f"unknown federation kind {fed.kind!r}")
        if fed.kind == "noisy" and fed.num_tasks != 6:
            raise ConfigError("noisy federations follow the 6-task protocol")
        if fed.kind != "noisy" and fed.noisy_clients != 0:
            raise ConfigError("noisy_clients requires kind: noisy")
        if fed.noisy_clients < 0 or fed.noisy_clients > fed.num_clients:
            raise ConfigError("noisy_clients must lie in [0, num_clients]")
        if fed.kind == "synthetic" and pool.source != "synthetic":
            raise ConfigError("kind: synthetic requires pool.source: synthetic")
        if pool.source not in ("synthetic", "idx"):
            raise ConfigError(f"unknown pool source {pool.source!r}")
        if pool.source == "idx" and not (pool.images_path and pool.labels_path):
            raise ConfigError("idx pools need images_path and labels_path")
        for name, value in [
            ("federation.num_clients", fed.num_clients),
            ("federation.num_tasks", fed.num_tasks),
            ("federation.classes_per_task", fed.classes_per_task),
            ("federation.per_class_cap", fed.per_class_cap),
            ("optim.batch_size", opt.batch_size),
            ("optim.local_iters", opt.local_iters),
            ("optim.rounds_per_task", opt.rounds_per_task),
            ("model.feature_dim", self.model.feature_dim),
            ("model.flow_layers", self.model.flow_layers),
        ]:
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not 0.0 < fed.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie strictly between 0 and 1")
        if not 0.0 < opt.client_fraction <= 1.0:
            raise ConfigError("client_fraction must lie in (0, 1]")
        if opt.lr <= 0:
            raise ConfigError("lr must be positive")
        for m in self.sweep.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown sweep method {m!r}")

    # -- canonical form and hashing ----------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical(self) -> dict:
        """Science-relevant fields only, ready for hashing."""
        data = self.to_dict()
        for key in _HASH_EXCLUDED:
            data.pop(key, None)
        return data

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True)
        tagged = f"{blob}|affcl-{affcl.__version__}"
        return hashlib.sha256(tagged.encode("utf-8")).hexdigest()[:16]

    def replaced(self, **top_level) -> "ExperimentConfig":
        """Copy with top-level fields replaced (sections may be dicts)."""
        data = self.to_dict()
        data.update(top_level)
        return ExperimentConfig.from_dict(data)


_SECTION_TYPES = {
    "FederationSection": FederationSection,
    "PoolSection": PoolSection,
    "ModelSection": ModelSection,
    "OptimSection": OptimSection,
    "SweepSection": SweepSection,
    "RuntimeSection": RuntimeSection,
}


def _section_class(f: dataclasses.Field):
    t = f.type
    if isinstance(t, str):
        return _SECTION_TYPES.get(t)
    if isinstance(t, type) and dataclasses.is_dataclass(t):
        return t
    return None


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for name, f in fields.items():
        if name not in data:
            continue
        value = data[name]
        section = _section_class(f)
        if section is not None:
            kwargs[name] = _build(section, value, f"{path}.{name}")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def dump_yaml(cfg: ExperimentConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=True)
