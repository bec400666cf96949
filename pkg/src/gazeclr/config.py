"""Run configuration: one declarative file, dotted overrides, seed resolution.

The config tree has five sections (data, augmentation, model, train, eval).
A YAML file supplies any subset; --set key=value flags override single leaves;
everything else falls back to the defaults below. The fully-resolved tree is
written as ``config.snapshot`` next to a run's outputs so an experiment is
reconstructible from its artifacts alone.
"""

import copy
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .data import AugmentationConfig
from .exceptions import ConfigError
from .model import EncoderConfig, ProjectionHeadConfig
from .training import TrainConfig

SEED_ENV_VAR = "GAZECLR_SEED"

SNAPSHOT_NAME = "config.snapshot"

_DEFAULTS = {
    "data": {
        "participants": 5,
        "groups": 400,
        "views": 4,
        "size": 64,
    },
    "augmentation": {
        "crop_scale_range": [0.8, 1.0],
        "blur_kernel_fraction": 0.1,
        "blur_sigma_range": [0.1, 2.0],
        "blur_prob": 1.0,
        "brightness": 0.4,
        "contrast": 0.4,
        "saturation": 0.4,
        "hue": 0.1,
        "color_jitter_prob": 0.8,
        "grayscale_prob": 0.2,
        "autocontrast_prob": 0.5,
    },
    "model": {
        "architecture": "resnet18",
        "feature_dim": 512,
        "input_size": 128,
        "proj_hidden": 512,
        "proj_out": 180,
    },
    "train": {
        "lr": 0.03,
        "momentum": 0.9,
        "weight_decay": 0.0,
        "iterations": 50000,
        "batch_size": 128,
        "tau": 0.1,
        "variant": "inv+equiv",
        "accumulation_chunks": 1,
        "ft_lr": 0.01,
        "ft_epochs": 30,
        "ft_batch_size": 64,
        "ft_grad_clip": 5.0,
    },
    "eval": {
        "shots": [1, 3, 5, 9, 15, 20, 50, 64],
        "runs": 10,
        "fractions": [1.0],
        "ridge_lambda": 1e-4,
        "mode": "full",
    },
    # None means "not specified"; resolution order is CLI flag, then this
    # value, then the GAZECLR_SEED env var, then 0
    "seed": None,
}


def _coerce(dotted, value, default):
    """Coerce a parsed override onto the default leaf's type."""
    if default is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{dotted}: expected bool, got {value!r}")
    if isinstance(default, int) and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{dotted}: expected number, got {value!r}")
    if isinstance(default, str):
        if isinstance(value, str):
            return value
        raise ConfigError(f"{dotted}: expected string, got {value!r}")
    if isinstance(default, list):
        if isinstance(value, (list, tuple)):
            return list(value)
        raise ConfigError(f"{dotted}: expected list, got {value!r}")
    if isinstance(default, int):
        raise ConfigError(f"{dotted}: expected int, got {value!r}")
    return value


def _merge(tree, updates, prefix=""):
    for key, value in updates.items():
        dotted = f"{prefix}{key}"
        if key not in tree:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(tree[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted}: expected a section, got {value!r}")
            _merge(tree[key], value, prefix=f"{dotted}.")
        else:
            tree[key] = _coerce(dotted, value, _default_leaf(dotted))


def _default_leaf(dotted):
    node = _DEFAULTS
    for part in dotted.split("."):
        node = node[part]
    return node


def _apply_set(tree, assignment):
    if "=" not in assignment:
        raise ConfigError(f"--set needs key=value, got {assignment!r}")
    dotted, raw = assignment.split("=", 1)
    dotted = dotted.strip()
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{dotted}: unparseable value {raw!r}: {exc}") from exc
    node = tree
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key: {dotted}")
        node = node[part]
    leaf = parts[-1]
    if leaf not in node or isinstance(node[leaf], dict):
        raise ConfigError(f"unknown config key: {dotted}")
    node[leaf] = _coerce(dotted, value, _default_leaf(dotted))


@dataclass
class RunConfig:
    """Fully-resolved configuration tree plus the seed that governs the run."""

    tree: dict
    seed: int
    out_dir: Optional[Path] = None
    sources: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path=None, sets=(), seed=None, out=None):
        tree = copy.deepcopy(_DEFAULTS)
        sources = {"file": str(path) if path else None, "sets": list(sets)}
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file missing: {path}")
            with open(path) as fh:
                try:
                    loaded = yaml.safe_load(fh) or {}
                except yaml.YAMLError as exc:
                    raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
            if not isinstance(loaded, dict):
                raise ConfigError(f"{path}: config root must be a mapping")
            _merge(tree, loaded)
        for assignment in sets:
            _apply_set(tree, assignment)
        resolved = cls._resolve_seed(seed, tree.get("seed"))
        tree["seed"] = resolved
        return cls(
            tree=tree,
            seed=resolved,
            out_dir=Path(out) if out is not None else None,
            sources=sources,
        )

    @staticmethod
    def _resolve_seed(flag_seed, tree_seed):
        if flag_seed is not None:
            return int(flag_seed)
        if tree_seed is not None:
            return int(tree_seed)
        env = os.environ.get(SEED_ENV_VAR)
        if env is not None:
            try:
                return int(env)
            except ValueError:
                raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env!r}")
        return 0

    def section(self, name):
        return self.tree[name]

    def augment_config(self):
        a = self.section("augmentation")
        return AugmentationConfig(
            crop_scale_range=tuple(a["crop_scale_range"]),
            blur_kernel_fraction=a["blur_kernel_fraction"],
            blur_sigma_range=tuple(a["blur_sigma_range"]),
            blur_prob=a["blur_prob"],
            brightness=a["brightness"],
            contrast=a["contrast"],
            saturation=a["saturation"],
            hue=a["hue"],
            color_jitter_prob=a["color_jitter_prob"],
            grayscale_prob=a["grayscale_prob"],
            autocontrast_prob=a["autocontrast_prob"],
        )

    def encoder_config(self):
        m = self.section("model")
        return EncoderConfig(
            architecture=m["architecture"],
            feature_dim=m["feature_dim"],
            input_size=m["input_size"],
        )

    def head_config(self):
        m = self.section("model")
        return ProjectionHeadConfig(hidden_dim=m["proj_hidden"], out_dim=m["proj_out"])

    def train_config(self, variant=None):
        t = self.section("train")
        return TrainConfig(
            lr=t["lr"],
            momentum=t["momentum"],
            weight_decay=t["weight_decay"],
            iterations=t["iterations"],
            batch_size=t["batch_size"],
            tau=t["tau"],
            variant=variant or t["variant"],
            seed=self.seed,
            accumulation_chunks=t["accumulation_chunks"],
            ft_lr=t["ft_lr"],
            ft_epochs=t["ft_epochs"],
            ft_batch_size=t["ft_batch_size"],
            ft_grad_clip=t["ft_grad_clip"],
        )

    def snapshot(self, out_dir=None):
        """Write the resolved tree next to the run's outputs."""
        out_dir = Path(out_dir if out_dir is not None else self.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / SNAPSHOT_NAME
        with open(path, "w") as fh:
            yaml.safe_dump(self.tree, fh, sort_keys=True, default_flow_style=False)
        return path
