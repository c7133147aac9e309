"""Run configuration: JSON files layered over named presets, unknown keys rejected."""
from __future__ import annotations

import copy
import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Any, Optional

from .model import TrainConfig
from .optim import PpoConfig
from .search import ProxySpec, SearchConfig


class ConfigError(ValueError):
    """A user-facing configuration problem (bad key, bad value, bad preset)."""


@dataclass(frozen=True)
class DataConfig:
    source: str = "synth"  # "synth" or "cifar"
    paths: tuple = ()  # CIFAR binary batch files
    train_size: int = 200
    val_size: int = 500
    split_seed: int = 0
    subsample: Optional[int] = None  # reduced-set size before splitting
    subsample_classes: Optional[int] = None
    synth_n: int = 700
    synth_noise: float = 40.0
    synth_size: int = 16
    n_classes: int = 10


@dataclass(frozen=True)
class SearchSection:
    n_early: int = 20
    n_late: int = 3
    t_max: int = 200
    proxy: str = "P_AF"
    finetune_lr: Optional[float] = None
    snapshot_every: int = 0
    arch: Optional[str] = None


@dataclass(frozen=True)
class ExperimentConfig:
    n_policies: int = 12
    full_repeats: int = 1
    schedule_grid: tuple = (6, 11, 17)
    schedule_policy: Optional[str] = None  # policy file; None means the uniform policy
    schedule_seeds: int = 5
    ablate_k_max: int = 3
    ablate_seeds: int = 3


@dataclass(frozen=True)
class VerifyConfig:
    mode: str = "ensemble"  # "ensemble" or "per-theta"
    n_thetas: int = 50
    max_k_ops: int = 5
    max_n_steps: int = 4
    grid_resolution: int = 10
    theta_scale: float = 1.5


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs/awsaug"
    workers: int = 1
    data: DataConfig = DataConfig()
    search: SearchSection = SearchSection()
    train: TrainConfig = TrainConfig()
    ppo: PpoConfig = PpoConfig()
    experiments: ExperimentConfig = ExperimentConfig()
    verify: VerifyConfig = VerifyConfig()

    def search_config(self) -> SearchConfig:
        s = self.search
        return SearchConfig(
            n_early=s.n_early,
            n_late=s.n_late,
            t_max=s.t_max,
            proxy=ProxySpec(s.proxy),
            ppo=self.ppo,
            train=self.train,
            seed=self.seed,
            arch=s.arch,
            finetune_lr=s.finetune_lr,
            snapshot_every=s.snapshot_every,
        )


PRESETS: dict[str, dict] = {
    "toy": {
        "data": {"source": "synth", "train_size": 200, "val_size": 500, "synth_n": 700, "synth_noise": 40.0},
        "search": {"n_early": 20, "n_late": 3, "t_max": 200, "finetune_lr": 0.01},
        "train": {"batch_size": 8, "lr_max": 0.02, "preprocess": {"pad": 0, "cutout": 0}},
    },
    "paper-cifar": {
        "data": {"source": "cifar", "train_size": 40000, "val_size": 10000},
        "search": {"n_early": 200, "n_late": 10, "t_max": 500},
        "train": {"batch_size": 256, "lr_max": 0.4, "preprocess": {"pad": 4, "cutout": 16}},
        "ppo": {"lr_theta": 0.1},
    },
    "paper-imagenet": {
        "data": {"source": "cifar"},
        "search": {"n_early": 150, "n_late": 5, "t_max": 500},
        "train": {"batch_size": 256, "lr_max": 0.4, "preprocess": {"pad": 4, "cutout": 0}},
        "ppo": {"lr_theta": 0.2},
    },
}


def _build(cls, raw: Any, where: str):
    """Instantiate dataclass ``cls`` from a mapping, recursing into nested dataclasses."""
    if isinstance(raw, cls):
        return raw
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key{'s' if len(unknown) > 1 else ''}: "
                          + ", ".join(f"{where}{k}" for k in unknown))
    kwargs = {}
    for name, value in raw.items():
        default = getattr(cls(), name) if _has_all_defaults(cls) else None
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value, f"{where}{name}.")
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


def _has_all_defaults(cls) -> bool:
    return all(
        f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING
        for f in dataclasses.fields(cls)
    )


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            v = to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _validate(cfg: RunConfig) -> None:
    if cfg.data.source not in ("synth", "cifar"):
        raise ConfigError(f"data.source must be 'synth' or 'cifar', got {cfg.data.source!r}")
    if cfg.verify.mode not in ("ensemble", "per-theta"):
        raise ConfigError(f"verify.mode must be 'ensemble' or 'per-theta', got {cfg.verify.mode!r}")
    if cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    if cfg.search.proxy not in ("P_AF", "P_NF", "P_IT", "P_AV"):
        raise ConfigError(f"unknown proxy {cfg.search.proxy!r}")
    try:
        cfg.search_config()
    except ValueError as exc:
        raise ConfigError(f"search: {exc}") from None


def from_dict(raw: dict, preset: Optional[str] = None) -> RunConfig:
    layered = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        layered = PRESETS[preset]
    cfg = _build(RunConfig, _merge(layered, raw), "")
    _validate(cfg)
    return cfg


def load_config(path: Optional[str] = None, preset: Optional[str] = None, **overrides) -> RunConfig:
    """Preset, then the JSON file at ``path``, then keyword overrides (``None`` values skipped)."""
    raw: dict = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    raw = _merge(raw, {k: v for k, v in overrides.items() if v is not None})
    return from_dict(raw, preset)


def dumps_config(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def build_data(d: DataConfig):
    """Materialize the train/validation pair described by ``d``."""
    from .data import SplitSpec, load_cifar_binary, split, subsample, synth_dataset
    from .search import SearchData

    if d.source == "synth":
        full = synth_dataset(d.synth_n, d.n_classes, d.synth_size, seed=d.split_seed, noise=d.synth_noise)
    else:
        if not d.paths:
            raise ConfigError("data.paths must list CIFAR binary files when data.source is 'cifar'")
        full = load_cifar_binary(list(d.paths))
    if d.subsample is not None or d.subsample_classes is not None:
        full = subsample(full, d.subsample or len(full), d.subsample_classes, d.split_seed)
    try:
        train, val = split(full, SplitSpec(d.train_size, d.val_size, 0, d.split_seed))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return SearchData(train, val)
