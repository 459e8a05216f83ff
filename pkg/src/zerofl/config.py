"""Experiment configuration: an INI file with fixed sections, strict key
validation and documented defaults. The seed is mandatory so every run is
reproducible by construction.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

from .codec import Strategy
from .federation import FedAdamConfig, FederationConfig

STRATEGY_NAMES = {
    "full_dense": Strategy.FULL_DENSE,
    "topk_weights": Strategy.TOPK_WEIGHTS,
    "diff_topk_weights": Strategy.DIFF_TOPK_WEIGHTS,
    "topk_weights_diff": Strategy.TOPK_WEIGHTS_DIFF,
}


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the key path."""


@dataclass
class DataConfig:
    kind: str = "blobs"  # blobs | idx
    classes: int = 3
    samples_per_class: int = 300
    test_samples_per_class: int = 100
    dims: int = 16
    spread: float = 0.3
    alpha: float = 1000.0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class ModelConfig:
    arch: str = "mlp"  # mlp | cnn
    hidden: int = 32


@dataclass
class ExperimentConfig:
    seed: int
    out_dir: str = ""
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    total_clients: int = 32
    clients_per_round: int = 8
    total_rounds: int = 150
    local_epochs: int = 1
    batch_size: int = 32
    strategy: Strategy = Strategy.TOPK_WEIGHTS
    sp: float = 0.9
    r_mask: float = 0.1
    aggregator: str = "fedavg"
    lr_start: float = 0.1
    lr_end: float = 0.01
    val_fraction: float = 0.1
    fedadam: FedAdamConfig = field(default_factory=FedAdamConfig)
    snapshot_every: int = 20

    def federation(self) -> FederationConfig:
        return FederationConfig(
            total_clients=self.total_clients,
            clients_per_round=self.clients_per_round,
            total_rounds=self.total_rounds,
            local_epochs=self.local_epochs,
            batch_size=self.batch_size,
            strategy=self.strategy,
            sp=self.sp,
            r_mask=self.r_mask,
            aggregator=self.aggregator,
            lr_start=self.lr_start,
            lr_end=self.lr_end,
            seed=self.seed,
            val_fraction=self.val_fraction,
            fedadam=self.fedadam,
        )


_SCHEMA: dict[str, dict[str, tuple]] = {
    # section -> key -> (caster, target path)
    "experiment": {
        "seed": (int, "seed"),
        "out_dir": (str, "out_dir"),
    },
    "data": {
        "kind": (str, "data.kind"),
        "classes": (int, "data.classes"),
        "samples_per_class": (int, "data.samples_per_class"),
        "test_samples_per_class": (int, "data.test_samples_per_class"),
        "dims": (int, "data.dims"),
        "spread": (float, "data.spread"),
        "alpha": (float, "data.alpha"),
        "train_images": (str, "data.train_images"),
        "train_labels": (str, "data.train_labels"),
        "test_images": (str, "data.test_images"),
        "test_labels": (str, "data.test_labels"),
    },
    "model": {
        "arch": (str, "model.arch"),
        "hidden": (int, "model.hidden"),
    },
    "federation": {
        "total_clients": (int, "total_clients"),
        "clients_per_round": (int, "clients_per_round"),
        "total_rounds": (int, "total_rounds"),
        "local_epochs": (int, "local_epochs"),
        "batch_size": (int, "batch_size"),
        "strategy": (str, "strategy"),
        "sp": (float, "sp"),
        "r_mask": (float, "r_mask"),
        "aggregator": (str, "aggregator"),
        "lr_start": (float, "lr_start"),
        "lr_end": (float, "lr_end"),
        "val_fraction": (float, "val_fraction"),
    },
    "fedadam": {
        "beta1": (float, "fedadam.beta1"),
        "beta2": (float, "fedadam.beta2"),
        "tau": (float, "fedadam.tau"),
        "server_lr": (float, "fedadam.server_lr"),
    },
    "output": {
        "snapshot_every": (int, "snapshot_every"),
    },
}


def _set_path(cfg: ExperimentConfig, path: str, value) -> None:
    obj = cfg
    *parents, leaf = path.split(".")
    for p in parents:
        obj = getattr(obj, p)
    setattr(obj, leaf, value)


def parse_config(path) -> ExperimentConfig:
    """Read and validate an experiment INI file.

    Unknown sections or keys are rejected; every value is range-checked and
    errors name the offending key path.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    with open(path) as f:  # missing file raises FileNotFoundError with the path
        parser.read_file(f)
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
    if not parser.has_option("experiment", "seed"):
        raise ConfigError("experiment.seed is mandatory (runs never seed from the clock)")
    cfg = ExperimentConfig(seed=0)
    for section, keys in _SCHEMA.items():
        if not parser.has_section(section):
            continue
        for key, (caster, target) in keys.items():
            if key not in parser[section]:
                continue
            raw = parser[section][key]
            try:
                value = caster(raw)
            except ValueError:
                raise ConfigError(
                    f"{section}.{key}: expected {caster.__name__}, got {raw!r}"
                ) from None
            _set_path(cfg, target, value)
    return validate_config(cfg)


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    if isinstance(cfg.strategy, str):
        if cfg.strategy not in STRATEGY_NAMES:
            raise ConfigError(
                f"federation.strategy must be one of {sorted(STRATEGY_NAMES)}, got {cfg.strategy!r}"
            )
        cfg.strategy = STRATEGY_NAMES[cfg.strategy]
    if cfg.data.kind not in ("blobs", "idx"):
        raise ConfigError(f"data.kind must be blobs or idx, got {cfg.data.kind!r}")
    if cfg.data.kind == "idx":
        missing = [
            k for k in ("train_images", "train_labels", "test_images", "test_labels")
            if not getattr(cfg.data, k)
        ]
        if missing:
            raise ConfigError(f"data.kind=idx requires data.{missing[0]}")
    if cfg.model.arch not in ("mlp", "cnn"):
        raise ConfigError(f"model.arch must be mlp or cnn, got {cfg.model.arch!r}")
    if cfg.data.kind == "blobs" and cfg.model.arch == "cnn":
        raise ConfigError("model.arch=cnn needs image data (data.kind=idx)")
    for name, lo in (("data.classes", 2), ("data.dims", 1), ("data.samples_per_class", 1),
                     ("data.test_samples_per_class", 1), ("model.hidden", 1)):
        section, key = name.split(".")
        v = getattr(getattr(cfg, section), key)
        if v < lo:
            raise ConfigError(f"{name} must be >= {lo}, got {v}")
    if cfg.data.spread < 0:
        raise ConfigError(f"data.spread must be >= 0, got {cfg.data.spread}")
    if cfg.data.alpha <= 0:
        raise ConfigError(f"data.alpha must be positive, got {cfg.data.alpha}")
    if cfg.snapshot_every < 0:
        raise ConfigError(f"output.snapshot_every must be >= 0, got {cfg.snapshot_every}")
    try:
        cfg.federation()  # range checks on all federation fields
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def config_to_ini(cfg: ExperimentConfig) -> str:
    """Render a validated config back to INI text; re-parsing it yields an
    identical config."""
    strategy_name = {v: k for k, v in STRATEGY_NAMES.items()}[cfg.strategy]
    lines = [
        "[experiment]",
        f"seed = {cfg.seed}",
        f"out_dir = {cfg.out_dir}",
        "",
        "[data]",
        f"kind = {cfg.data.kind}",
        f"classes = {cfg.data.classes}",
        f"samples_per_class = {cfg.data.samples_per_class}",
        f"test_samples_per_class = {cfg.data.test_samples_per_class}",
        f"dims = {cfg.data.dims}",
        f"spread = {cfg.data.spread!r}",
        f"alpha = {cfg.data.alpha!r}",
        f"train_images = {cfg.data.train_images}",
        f"train_labels = {cfg.data.train_labels}",
        f"test_images = {cfg.data.test_images}",
        f"test_labels = {cfg.data.test_labels}",
        "",
        "[model]",
        f"arch = {cfg.model.arch}",
        f"hidden = {cfg.model.hidden}",
        "",
        "[federation]",
        f"total_clients = {cfg.total_clients}",
        f"clients_per_round = {cfg.clients_per_round}",
        f"total_rounds = {cfg.total_rounds}",
        f"local_epochs = {cfg.local_epochs}",
        f"batch_size = {cfg.batch_size}",
        f"strategy = {strategy_name}",
        f"sp = {cfg.sp!r}",
        f"r_mask = {cfg.r_mask!r}",
        f"aggregator = {cfg.aggregator}",
        f"lr_start = {cfg.lr_start!r}",
        f"lr_end = {cfg.lr_end!r}",
        f"val_fraction = {cfg.val_fraction!r}",
        "",
        "[fedadam]",
        f"beta1 = {cfg.fedadam.beta1!r}",
        f"beta2 = {cfg.fedadam.beta2!r}",
        f"tau = {cfg.fedadam.tau!r}",
        f"server_lr = {cfg.fedadam.server_lr!r}",
        "",
        "[output]",
        f"snapshot_every = {cfg.snapshot_every}",
        "",
    ]
    return "\n".join(lines)
