"""Experiment configuration

An experiment is described by one JSON file validated by
`ExperimentConfig`. Command-line flags and the ``STAGEFUSE_DATASET_ROOT``
environment variable override file values before validation, so every
override is checked the same way.
"""
import json
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from .adversarial import AdversarialTrainingConfig
from .backbones import BACKBONES
from .errors import InvalidConfig
from .imagecore import AugmentConfig, NormalizationStats
from .staging import StageHyperparams

__all__ = ["DATASET_ROOT_ENV", "ExperimentConfig", "load_config"]

DATASET_ROOT_ENV = "STAGEFUSE_DATASET_ROOT"

BackboneName = Literal["conv", "attention", "wavelet"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class TrainingSettings(_Section):
    epochs_per_stage: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(32, ge=1)
    initial_lr: float = Field(1e-4, gt=0)
    plateau_factor: float = Field(0.1, gt=0, lt=1)
    plateau_patience: int = Field(3, ge=1)
    monitor: Literal["val_loss", "val_acc"] = "val_loss"
    continue_lr: bool = False
    checkpoint_every_epoch: bool = False


class AugmentSettings(_Section):
    hflip_prob: float = Field(0.5, ge=0, le=1)
    rotation_max_deg: float = Field(10.0, ge=0)
    jitter_strength: float = Field(0.2, ge=0, le=1)
    crop_scale_min: float = Field(0.8, gt=0)
    crop_scale_max: float = Field(1.2, gt=0)


class NormalizationSettings(_Section):
    mean: tuple[float, ...] = (0.485, 0.456, 0.406)
    std: tuple[float, ...] = (0.229, 0.224, 0.225)


class AttackSettings(_Section):
    epsilons: list[float] = Field([0.005, 0.01, 0.03, 0.05], min_length=1)
    adversarial_train: bool = False
    epsilon: float = Field(0.005, ge=0)
    epochs: int = Field(6, ge=0)
    lr: float = Field(1e-5, gt=0)
    clean_per_batch: int = Field(32, ge=0)
    adversarial_per_batch: int = Field(32, ge=1)

    @field_validator("epsilons")
    @classmethod
    def _non_negative(cls, value):
        if any(eps < 0 for eps in value):
            raise ValueError(f"epsilons must be >= 0: {value}")
        return value


class ExperimentConfig(_Section):
    dataset_root: Path
    validation_root: Optional[Path] = None
    validation_fraction: float = Field(0.2, gt=0, lt=1)
    out: Path = Path("runs/default")
    seed: int = 0
    stages: int = Field(5, ge=1)
    backbones: list[BackboneName] = Field(
        ["conv", "attention", "wavelet"], min_length=1)
    input_sizes: dict[BackboneName, int] = {}
    load_workers: Optional[int] = Field(None, ge=1)
    training: TrainingSettings = TrainingSettings()
    augment: dict[BackboneName, AugmentSettings] = {}
    normalization: NormalizationSettings = NormalizationSettings()
    distill: bool = False
    fusion: Literal["equal", "optimized", "majority"] = "optimized"
    fusion_objective: Literal["accuracy", "auc"] = "accuracy"
    search_step: float = Field(0.01, gt=0, le=1)
    threshold: float = Field(0.5, gt=0, lt=1)
    alpha: float = Field(0.05, gt=0, lt=1)
    attack: AttackSettings = AttackSettings()

    @field_validator("dataset_root", "validation_root")
    @classmethod
    def _existing_directory(cls, value):
        if value is not None and not value.is_dir():
            raise ValueError(f"not a directory: {str(value)!r}")
        return value

    @field_validator("backbones")
    @classmethod
    def _unique(cls, value):
        if len(set(value)) != len(value):
            raise ValueError(f"backbones listed twice: {value}")
        # conv first: it is the distillation teacher
        return sorted(value, key=["conv", "attention", "wavelet"].index)

    def input_size(self, name):
        return self.input_sizes.get(name, BACKBONES[name].default_input_size)

    def stage_hyperparams(self, name):
        settings = self.training.model_dump(exclude_none=True)
        return StageHyperparams.for_backbone(name, **settings)

    def augment_for(self, name):
        """AugmentConfig for a backbone, or None for resize-only"""
        settings = self.augment.get(name)
        if settings is None:
            return None
        return AugmentConfig(output_size=self.input_size(name),
                             **settings.model_dump())

    def normalization_stats(self):
        return NormalizationStats(self.normalization.mean,
                                  self.normalization.std)

    def adversarial_training(self, clamp=None):
        settings = self.attack.model_dump(
            exclude={"epsilons", "adversarial_train"})
        return AdversarialTrainingConfig(seed=self.seed, clamp=clamp,
                                         **settings)


def load_config(path, overrides=None, environ=None):
    """Read ``path``, apply the environment and ``overrides``, validate

    ``overrides`` maps field names to values, with dots reaching into
    sections (``"attack.epsilons"``); ``None`` values are ignored.
    Raises pydantic's ``ValidationError`` for field errors.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InvalidConfig(f"{str(path)!r} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise InvalidConfig(f"{str(path)!r} must hold a JSON object")
    environ = os.environ if environ is None else environ
    if environ.get(DATASET_ROOT_ENV):
        data["dataset_root"] = environ[DATASET_ROOT_ENV]
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        *sections, name = key.split(".")
        target = data
        for section in sections:
            target = target.setdefault(section, {})
        target[name] = value
    return ExperimentConfig.model_validate(data)
