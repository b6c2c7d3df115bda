"""Experiment configuration: strict JSON parsing into the run dataclasses.

Unknown keys are errors so typos fail fast. All randomness in a run flows
from the single config seed.
"""

import json
import os
from dataclasses import dataclass

from .data import (
    ConfigurationError,
    SplitSpec,
    load_image_folder,
    make_synthetic_dataset,
)
from .losses import LossWeights
from .training import TrainConfig


def _take(mapping, allowed, context):
    unknown = set(mapping) - set(allowed)
    if unknown:
        raise ConfigurationError(
            f"unknown key(s) {sorted(unknown)} in {context}; allowed: {sorted(allowed)}"
        )
    return {k: mapping[k] for k in mapping}


@dataclass(frozen=True)
class DatasetConfig:
    """Data source: a seeded synthetic benchmark or an image folder."""

    kind: str = "synthetic"
    classes: int = 4
    per_class: int = 250
    image_size: int = 28
    seed: int = 11
    path: str = ""

    def __post_init__(self):
        if self.kind not in ("synthetic", "directory"):
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "directory" and not self.path:
            raise ConfigurationError("directory datasets need a path")


def build_dataset(ds_cfg):
    if ds_cfg.kind == "synthetic":
        return make_synthetic_dataset(ds_cfg.classes, ds_cfg.per_class,
                                      ds_cfg.image_size, ds_cfg.seed)
    return load_image_folder(ds_cfg.path)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    split: SplitSpec
    train: TrainConfig
    out_dir: str


def train_config_from_dict(d):
    d = _take(d, set(TrainConfig.__dataclass_fields__), "train config")
    if "weights" in d:
        w = _take(d["weights"], set(LossWeights.__dataclass_fields__),
                  "loss weights")
        d = {**d, "weights": LossWeights(**w)}
    if "mask_layers" in d:
        d = {**d, "mask_layers": tuple(d["mask_layers"])}
    return TrainConfig(**d)


def train_config_to_dict(cfg):
    return {
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "momentum": cfg.momentum,
        "weight_decay": cfg.weight_decay,
        "lr_decay": cfg.lr_decay,
        "weights": {
            "alpha": cfg.weights.alpha,
            "beta": cfg.weights.beta,
            "lambda1": cfg.weights.lambda1,
            "lambda2": cfg.weights.lambda2,
        },
        "omega0": cfg.omega0,
        "omega_step": cfg.omega_step,
        "omega_period": cfg.omega_period,
        "bands": cfg.bands,
        "code_length": cfg.code_length,
        "image_size": cfg.image_size,
        "seed": cfg.seed,
        "variant": cfg.variant,
        "mask_layers": list(cfg.mask_layers),
        "mask_hidden": cfg.mask_hidden,
    }


def experiment_from_dict(d, context="config"):
    d = _take(d, {"dataset", "split", "train", "out_dir"}, context)
    if "out_dir" not in d:
        raise ConfigurationError("config needs an out_dir")
    ds = _take(d.get("dataset", {}), set(DatasetConfig.__dataclass_fields__),
               "dataset config")
    split = _take(d.get("split", {}), set(SplitSpec.__dataclass_fields__),
                  "split config")
    split.setdefault("labeled_per_class", 0)
    split.setdefault("query_per_class", 0)
    split.setdefault("seed", 0)
    return ExperimentConfig(
        dataset=DatasetConfig(**ds),
        split=SplitSpec(**split),
        train=train_config_from_dict(d.get("train", {})),
        out_dir=d["out_dir"],
    )


def experiment_to_dict(cfg):
    return {
        "dataset": {
            "kind": cfg.dataset.kind,
            "classes": cfg.dataset.classes,
            "per_class": cfg.dataset.per_class,
            "image_size": cfg.dataset.image_size,
            "seed": cfg.dataset.seed,
            "path": cfg.dataset.path,
        },
        "split": {
            "labeled_per_class": cfg.split.labeled_per_class,
            "query_per_class": cfg.split.query_per_class,
            "seed": cfg.split.seed,
            "unseen_fraction": cfg.split.unseen_fraction,
        },
        "train": train_config_to_dict(cfg.train),
        "out_dir": cfg.out_dir,
    }


def load_experiment_config(path):
    if not os.path.exists(path):
        raise ConfigurationError(f"config file not found: {path}")
    with open(path) as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config is not valid JSON: {e}") from e
    return experiment_from_dict(payload, context=str(path))


@dataclass(frozen=True)
class AblationManifest:
    """Variant matrix: every (variant, seed) pair trains with paired seeds."""

    base: ExperimentConfig
    variants: tuple
    seeds: tuple
    out_dir: str

    def __post_init__(self):
        if not self.variants:
            raise ConfigurationError("ablation needs at least one variant")
        if not self.seeds:
            raise ConfigurationError("ablation needs at least one seed")


def load_ablation_manifest(path):
    if not os.path.exists(path):
        raise ConfigurationError(f"manifest file not found: {path}")
    with open(path) as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"manifest is not valid JSON: {e}") from e
    payload = _take(payload, {"base", "variants", "seeds", "out_dir"}, str(path))
    if "out_dir" not in payload:
        raise ConfigurationError("manifest needs an out_dir")
    base_dict = dict(payload.get("base", {}))
    base_dict.setdefault("out_dir", payload["out_dir"])
    base = experiment_from_dict(base_dict, context="manifest base")
    from .training import parse_variant

    variants = tuple(payload.get("variants", ()))
    for tag in variants:
        parse_variant(tag)
    return AblationManifest(
        base=base,
        variants=variants,
        seeds=tuple(payload.get("seeds", ())),
        out_dir=payload["out_dir"],
    )
