"""Experiment configuration: a YAML document with sections plus ``section.key=value`` overrides.

Ablations are named override lists, so a sweep is just a set of config deltas.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .network import NetworkConfig
from .training import LossConfig, TrainConfig

DATA_ROOT_ENV = "DIRIGENT_DATA_ROOT"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = ""
    layout_id: str = "synthetic-3dof"
    split: str = "random"  # random | by_participant | by_task
    ratio: float = 0.9
    held_out: str | None = None
    train_task: str | None = None
    eval_task: str | None = None
    val_fraction: float = 0.05
    condition_size: int = 64
    overlay_past: int = 0
    overlay_opacity: float = 0.5
    condition_dir: str | None = None


@dataclass
class EvalConfig:
    steps: int = 1
    eef_source: str = "kinematic"  # kinematic | direct
    batch_size: int = 64
    motion_range: list[float] | None = None
    trajectory_frames: int = 2400


@dataclass
class ExperimentConfig:
    name: str = "default"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["network"] = self.network.to_dict()
        return d

    def training_key(self) -> str:
        """Hash of everything that influences the trained parameters."""
        d = self.to_dict()
        payload = {k: d[k] for k in ("seed", "data", "network", "train", "loss")}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def data_root(self) -> Path:
        root = self.data.root or os.environ.get(DATA_ROOT_ENV, "")
        if not root:
            raise ConfigError(f"no data root: set data.root, pass --data, or export {DATA_ROOT_ENV}")
        return Path(root)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed))


ABLATIONS = {
    "baseline": [],
    "no-noise": ["train.max_noise_only=true"],
    "joint-only": ["loss.omega_cartesian=0"],
    "cartesian-only": ["loss.omega_joint=0"],
    "iter50": ["eval.steps=50"],
    "consistency": ["network.cartesian_head=consistency", "loss.consistency_weight=1.0"],
    "direct-cartesian": ["network.cartesian_head=consistency", "loss.consistency_weight=1.0",
                         "eval.eef_source=direct"],
    "overlay": ["data.overlay_past=10"],
    "epochs80": ["train.epochs=80"],
}

# row labels in the style of the published ablation table
ABLATION_LABELS = {
    "baseline": "baseline",
    "no-noise": "- noisy input for training",
    "joint-only": "- Cartesian loss",
    "cartesian-only": "- Joint loss",
    "iter50": "+ 50 iterative denoising steps",
    "consistency": "+ Cartesian consistency",
    "direct-cartesian": "+ Direct Cartesian generation",
    "overlay": "+ overlayed past frame",
    "epochs80": "+ 80 epochs",
}


def _build_section(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section '{section}' must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{section}' section: {exc}") from exc


_SECTIONS = {"data": DataConfig, "network": NetworkConfig, "train": TrainConfig, "loss": LossConfig, "eval": EvalConfig}


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d or {})
    unknown = set(d) - {"name", "seed", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    kwargs = {k: d[k] for k in ("name", "seed") if k in d}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build_section(cls, d.get(name) or {}, name)
    return ExperimentConfig(**kwargs)


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return config_from_dict(doc or {})


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars/lists."""
    d = cfg.to_dict()
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        value = yaml.safe_load(raw) if raw.strip() else None
        if len(parts) == 1 and parts[0] in ("name", "seed"):
            d[parts[0]] = value
            continue
        if len(parts) != 2 or parts[0] not in _SECTIONS or parts[1] not in d[parts[0]]:
            raise ConfigError(f"unknown config key {key!r}")
        d[parts[0]][parts[1]] = value
    return config_from_dict(d)


def ablation_config(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; known: {sorted(ABLATIONS)}")
    out = apply_overrides(cfg, ABLATIONS[name])
    return replace(out, name=name)


def save_config(cfg: ExperimentConfig, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
