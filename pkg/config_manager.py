"""
Experiment configuration manager with profiles support

A config file holds an `active_profile` and a `profiles` map. Each profile
names a built-in preset (`desk`, `paper`, `paper-smoke`) and may override
any nested field, e.g. {"preset": "desk", "cgan": {"epochs": 3}}.
"""
import copy
import dataclasses
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from cgan import GanTrainConfig
from channel_sim import DatasetSpec, IndexConvention
from errors import ConfigError
from esprit import EspritConfig
from lstm import LstmTrainConfig
from preprocess import DEFAULT_OVERSAMPLE, DEFAULT_WINDOW, DEFAULT_WINDOW_OFFSET

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "MRCE_OUTPUT_ROOT"
LOG_LEVEL_ENV = "MRCE_LOG_LEVEL"
NSE_DOMAINS = ("per_antenna", "matrix")


@dataclass
class PreprocessConfig:
    scale_factor: Optional[float] = None   # None = sqrt(M * N_sub)
    oversample: int = DEFAULT_OVERSAMPLE
    window: int = DEFAULT_WINDOW
    window_offset: int = DEFAULT_WINDOW_OFFSET
    seq_seed: int = 7
    label_source: str = "truth"


@dataclass
class SplitConfig:
    """
    Sizes are totals across datasets; every split is stratified by dataset.
    The validation slice is drawn from the test pool and only monitors
    training (0 disables it).
    """
    test_size: int = 32
    gan_train_size: int = 64
    seed: int = 11
    val_size: int = 8


@dataclass
class ExperimentConfig:
    name: str = "desk"
    datasets: List[DatasetSpec] = field(default_factory=list)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    cgan: GanTrainConfig = field(default_factory=GanTrainConfig)
    lstm: LstmTrainConfig = field(default_factory=LstmTrainConfig)
    esprit: EspritConfig = field(default_factory=EspritConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    output_dir: str = "runs/desk"
    seed: int = 0
    n_jobs: int = 1
    nse_domain: str = "per_antenna"
    results_db: Optional[str] = None

    @property
    def total_samples(self) -> int:
        return sum(spec.num_samples for spec in self.datasets)

    def output_path(self) -> Path:
        """Output directory, rooted at $MRCE_OUTPUT_ROOT when it is set and the path is relative"""
        root = os.environ.get(OUTPUT_ROOT_ENV)
        path = Path(self.output_dir)
        if root and not path.is_absolute():
            return Path(root) / path
        return path


def _plain(value):
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, np.generic):
        return value.item()
    return value


def config_to_dict(cfg: ExperimentConfig) -> Dict[str, Any]:
    return _plain(asdict(cfg))


def _build(cls, data: Dict[str, Any], section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section '{section}' must be an object, got {type(data).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in '{section}': {', '.join(unknown)}")
    kwargs = dict(data)
    for key in ("units", "activations", "doa_range"):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid '{section}' section: {e}") from e


def config_from_dict(data: Dict[str, Any]) -> ExperimentConfig:
    data = dict(data)
    data.pop("preset", None)
    nested = {
        "preprocess": PreprocessConfig,
        "cgan": GanTrainConfig,
        "lstm": LstmTrainConfig,
        "esprit": EspritConfig,
        "split": SplitConfig,
    }
    kwargs = {}
    for key, value in data.items():
        if key == "datasets":
            kwargs[key] = [_build(DatasetSpec, d, f"datasets[{i}]") for i, d in enumerate(value)]
        elif key in nested:
            kwargs[key] = _build(nested[key], value, key)
        else:
            kwargs[key] = value
    return _build(ExperimentConfig, kwargs, "experiment")


def _datasets(samples_per_dataset: int, seed: int) -> List[DatasetSpec]:
    # dataset 1 holds 3-MPC channels, dataset 2 5-MPC channels
    return [DatasetSpec(num_samples=samples_per_dataset, num_paths=paths, rng_seed=seed + k + 1,
                        convention=IndexConvention.FRF_ODD)
            for k, paths in enumerate((3, 5))]


def desk_config() -> ExperimentConfig:
    return ExperimentConfig(
        name="desk",
        datasets=_datasets(64, seed=0),
        cgan=GanTrainConfig(epochs=10),
        lstm=LstmTrainConfig(epochs=10),
        split=SplitConfig(test_size=32, gan_train_size=64, seed=11, val_size=8),
        output_dir="runs/desk",
    )


def paper_config() -> ExperimentConfig:
    """Full-size run: 1500 + 1500 channels, 150 cGAN / 50 LSTM epochs (long-running)"""
    return ExperimentConfig(
        name="paper",
        datasets=_datasets(1500, seed=0),
        cgan=GanTrainConfig(epochs=150, checkpoint_every=10),
        lstm=LstmTrainConfig(epochs=50),
        split=SplitConfig(test_size=600, gan_train_size=600, seed=11, val_size=64),
        output_dir="runs/paper",
        n_jobs=-1,
    )


def paper_smoke_config() -> ExperimentConfig:
    cfg = paper_config()
    cfg.name = "paper-smoke"
    cfg.cgan.epochs = 2
    cfg.cgan.checkpoint_every = 1
    cfg.lstm.epochs = 2
    cfg.output_dir = "runs/paper-smoke"
    return cfg


PRESETS = {
    "desk": desk_config,
    "paper": paper_config,
    "paper-smoke": paper_smoke_config,
}


def get_preset_profiles() -> Dict[str, Dict[str, Any]]:
    """Get preset profile configurations"""
    return {name: config_to_dict(factory()) for name, factory in PRESETS.items()}


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def validate_config(cfg: ExperimentConfig) -> List[str]:
    """Validate experiment configuration and return list of issues"""
    issues = []

    if not cfg.datasets:
        issues.append("at least one dataset is required")
    shapes = {(spec.num_antennas, spec.num_subcarriers) for spec in cfg.datasets}
    if len(shapes) > 1:
        issues.append("all datasets must share the array size and subcarrier count")
    seeds = [spec.rng_seed for spec in cfg.datasets]
    if len(set(seeds)) != len(seeds):
        issues.append("dataset seeds must be distinct")
    for i, spec in enumerate(cfg.datasets):
        issues.extend(f"datasets[{i}]: {issue}" for issue in spec.validate())

    pre = cfg.preprocess
    if pre.scale_factor is not None and not pre.scale_factor > 0:
        issues.append("preprocess.scale_factor must be positive")
    if pre.oversample < 1:
        issues.append("preprocess.oversample must be >= 1")
    if pre.window < 1:
        issues.append("preprocess.window must be >= 1")
    elif shapes and pre.window > pre.oversample * min(n for _, n in shapes):
        issues.append("preprocess.window exceeds the oversampled CIR length")
    if pre.label_source not in ("truth", "noisy"):
        issues.append("preprocess.label_source must be 'truth' or 'noisy'")

    issues.extend(cfg.cgan.validate())
    issues.extend(cfg.lstm.validate())
    issues.extend(cfg.esprit.validate())

    total = cfg.total_samples
    if cfg.split.test_size < len(cfg.datasets):
        issues.append("split.test_size must leave at least one test sample per dataset")
    if cfg.split.test_size >= total:
        issues.append("split.test_size must be smaller than the total sample count")
    if cfg.split.gan_train_size < 2:
        issues.append("split.gan_train_size must be >= 2")
    elif cfg.split.gan_train_size > total - cfg.split.test_size:
        issues.append("split.gan_train_size exceeds the non-test pool")
    val_size = cfg.split.val_size
    if val_size < 0 or val_size > cfg.split.test_size:
        issues.append("split.val_size must be between 0 and split.test_size")
    elif 0 < val_size < cfg.split.test_size and min(val_size, cfg.split.test_size - val_size) < len(cfg.datasets):
        issues.append("split.val_size must leave at least one sample per dataset on both sides of the test pool")

    if cfg.nse_domain not in NSE_DOMAINS:
        issues.append(f"nse_domain must be one of {', '.join(NSE_DOMAINS)}")
    if cfg.n_jobs == 0:
        issues.append("n_jobs must be non-zero")
    if not cfg.output_dir:
        issues.append("output_dir is required")

    return issues


class ConfigManager:
    """Manages experiment configuration profiles"""

    def __init__(self, config_path: Optional[str] = None):
        if config_path is None:
            config_path = os.path.join(os.path.dirname(__file__), "experiment_config.json")

        self.config_path = config_path
        self.profiles: Dict[str, Dict[str, Any]] = {}
        self.active_profile_name: str = "desk"

        self.load()

        if not self.profiles:
            self.profiles = {name: {"preset": name} for name in PRESETS}

    def load(self):
        """Load configuration from file; a missing file means presets only"""
        if not os.path.exists(self.config_path):
            return
        try:
            with open(self.config_path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{self.config_path} is not valid JSON: {e}") from e

        self.active_profile_name = data.get("active_profile", "desk")
        profiles = data.get("profiles", {})
        if not isinstance(profiles, dict):
            raise ConfigError(f"{self.config_path}: 'profiles' must be an object")
        self.profiles = profiles

    def save(self):
        data = {
            "active_profile": self.active_profile_name,
            "profiles": self.profiles,
            "version": "1.0",
        }
        with open(self.config_path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)

    def list_profiles(self) -> List[str]:
        return sorted(set(self.profiles) | set(PRESETS))

    def profile_dict(self, name: Optional[str] = None) -> Dict[str, Any]:
        """Preset merged with the profile's overrides"""
        name = name or self.active_profile_name
        overrides = self.profiles.get(name)
        if overrides is None:
            if name not in PRESETS:
                raise ConfigError(f"Profile '{name}' does not exist")
            overrides = {"preset": name}
        preset = overrides.get("preset", name if name in PRESETS else "desk")
        if preset not in PRESETS:
            raise ConfigError(f"Preset '{preset}' does not exist")
        merged = _merge(config_to_dict(PRESETS[preset]()), {k: v for k, v in overrides.items() if k != "preset"})
        merged["name"] = overrides.get("name", name)
        return merged

    def resolve(self, name: Optional[str] = None) -> ExperimentConfig:
        """Build and validate the named (or active) profile; raises ConfigError on any issue"""
        cfg = config_from_dict(self.profile_dict(name))
        issues = validate_config(cfg)
        if issues:
            raise ConfigError(f"invalid configuration '{cfg.name}': {'; '.join(issues)}")
        return cfg

    def set_active_profile(self, name: str):
        if name not in self.list_profiles():
            raise ConfigError(f"Profile '{name}' does not exist")
        self.active_profile_name = name
        self.save()

    def create_profile(self, name: str, preset: str = "desk", **overrides) -> ExperimentConfig:
        if name in self.profiles:
            raise ConfigError(f"Profile '{name}' already exists")
        self.profiles[name] = {"preset": preset, **overrides}
        cfg = self.resolve(name)
        self.save()
        return cfg

    def delete_profile(self, name: str):
        if name not in self.profiles:
            raise ConfigError(f"Profile '{name}' does not exist")
        if name == self.active_profile_name:
            self.active_profile_name = "desk"
        del self.profiles[name]
        self.save()

    def export_profile(self, name: str, export_path: str):
        """Write the fully resolved profile as a standalone JSON document"""
        data = config_to_dict(self.resolve(name))
        with open(export_path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=True)

    def import_profile(self, import_path: str, new_name: Optional[str] = None) -> str:
        with open(import_path, "r", encoding="utf-8") as f:
            data = json.load(f)

        name = new_name or data.get("name", "imported")
        original_name = name
        counter = 1
        while name in self.profiles or name in PRESETS:
            name = f"{original_name}_{counter}"
            counter += 1

        data["name"] = name
        issues = validate_config(config_from_dict(data))
        if issues:
            logger.warning("Imported profile %s has validation issues: %s", name, issues)

        self.profiles[name] = data
        self.save()
        return name

    def get_config_summary(self, name: Optional[str] = None) -> Dict[str, Any]:
        cfg = self.resolve(name)
        return {
            "profile": cfg.name,
            "datasets": [{"samples": s.num_samples, "mpcs": s.num_paths, "seed": s.rng_seed, "snr_db": s.snr_db}
                         for s in cfg.datasets],
            "split": asdict(cfg.split),
            "epochs": {"cgan": cfg.cgan.epochs, "lstm": cfg.lstm.epochs},
            "output_dir": str(cfg.output_path()),
            "nse_domain": cfg.nse_domain,
        }


def load_experiment_config(path: str) -> ExperimentConfig:
    """Load a standalone JSON config document (as written by export_profile)"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    preset = data.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"Preset '{preset}' does not exist")
        data = _merge(config_to_dict(PRESETS[preset]()), data)
    cfg = config_from_dict(data)
    issues = validate_config(cfg)
    if issues:
        raise ConfigError(f"invalid configuration '{cfg.name}': {'; '.join(issues)}")
    return cfg
