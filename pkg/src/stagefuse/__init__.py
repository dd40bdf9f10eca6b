"""Fake image detection with multistage training and late fusion

Haar wavelet features, disjoint-subset multistage training with warm
starts, probability-level ensembles, FGSM robustness and the metrics to
evaluate them.
"""
from .backbones import create_backbone, predict_proba
from .ensemble import (
    FusionWeights,
    fuse_majority,
    fuse_weighted,
    search_weights,
)
from .staging import StageHyperparams, partition_fakes, run_multistage

__version__ = "0.1.0"
__all__ = [
    "FusionWeights",
    "StageHyperparams",
    "create_backbone",
    "fuse_majority",
    "fuse_weighted",
    "partition_fakes",
    "predict_proba",
    "run_multistage",
    "search_weights",
]
