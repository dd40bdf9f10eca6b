"""FGSM attacks, adversarial fine-tuning and robustness sweeps

Perturbations live in the backbone's input space (normalized pixels for
image backbones). ``clamp`` bounds are either scalars or per-channel
sequences; `AttackConfig.for_stats` derives the normalized image of the
pixel interval [0, 1].
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
import torch

from ._rng import torch_generator
from .backbones import EpochStats, make_optimizer, predict_proba
from .ensemble import FusionWeights, decide, fuse
from .errors import InvalidConfig, InvalidInput, UnsupportedBackbone

__all__ = [
    "AdversarialTrainingConfig",
    "AttackConfig",
    "accuracy_under_attack",
    "adversarial_train",
    "fgsm",
    "robustness_sweep",
]

logger = logging.getLogger(__name__)

SWEEP_EPSILONS = (0.0, 0.005, 0.01, 0.03, 0.05)


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 0.005
    clamp: tuple = None

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise InvalidConfig(f"epsilon must be >= 0: {self.epsilon}")

    @classmethod
    def for_stats(cls, epsilon, stats):
        return cls(epsilon, stats.clamp_bounds())


def _bound(value, like):
    bound = torch.as_tensor(value, dtype=like.dtype, device=like.device)
    if bound.dim() == 1 and like.dim() == 4:
        bound = bound.view(1, -1, 1, 1)
    return bound


def _clamp(x, clamp):
    if clamp is None:
        return x
    low, high = clamp
    return torch.minimum(torch.maximum(x, _bound(low, x)), _bound(high, x))


def fgsm(backbone, x, y, cfg):
    """x + ε·sign(∇ₓ loss), clamped; the backbone is left untouched

    Gradients are taken in eval mode and only with respect to the input.
    """
    x = torch.as_tensor(x)
    if cfg.epsilon == 0:
        return x.clone()
    if not x.is_floating_point():
        raise UnsupportedBackbone("FGSM needs floating-point inputs")
    was_training = backbone.training
    backbone.eval()
    try:
        leaf = x.detach().clone().requires_grad_(True)
        with torch.enable_grad():
            loss = backbone.loss(backbone(leaf), torch.as_tensor(y))
            try:
                (grad,) = torch.autograd.grad(loss, leaf)
            except RuntimeError as exc:
                raise UnsupportedBackbone(
                    f"{backbone.name} is not differentiable in its input: "
                    f"{exc}") from exc
    finally:
        backbone.train(was_training)
    return _clamp(x.detach() + cfg.epsilon * grad.sign(), cfg.clamp)


def _chunks(x, y, size):
    for start in range(0, len(x), size):
        yield x[start:start + size], y[start:start + size]


def _attacked_proba(backbone, x, y, cfg, chunk_size=256):
    y = torch.as_tensor(y)
    adv = torch.cat([fgsm(backbone, xb, yb, cfg)
                     for xb, yb in _chunks(x, y, chunk_size)])
    return predict_proba(backbone, adv, chunk_size)


def accuracy_under_attack(backbone, x, y, epsilon, clamp=None,
                          threshold=0.5):
    probs = _attacked_proba(backbone, x, y, AttackConfig(epsilon, clamp))
    labels = torch.as_tensor(y).numpy()
    return float(np.mean(decide(probs, threshold) == labels))


@dataclass(frozen=True)
class AdversarialTrainingConfig:
    """Fine-tuning with mixed clean/perturbed batches

    Every step draws ``clean_per_batch + adversarial_per_batch`` distinct
    samples and perturbs the second group against the current parameters.
    """
    epsilon: float = 0.005
    epochs: int = 6
    lr: float = 1e-5
    clean_per_batch: int = 32
    adversarial_per_batch: int = 32
    seed: int = 0
    clamp: tuple = None

    def __post_init__(self):
        if not self.epsilon >= 0:
            raise InvalidConfig(f"epsilon must be >= 0: {self.epsilon}")
        if self.epochs < 0:
            raise InvalidConfig(f"epochs must be >= 0: {self.epochs}")
        if not self.lr > 0:
            raise InvalidConfig(f"lr must be positive: {self.lr}")
        if self.clean_per_batch < 0 or self.adversarial_per_batch < 1:
            raise InvalidConfig(
                "need clean_per_batch >= 0 and adversarial_per_batch >= 1")

    @property
    def batch_size(self):
        return self.clean_per_batch + self.adversarial_per_batch


def adversarial_train(backbone, x, y, cfg=AdversarialTrainingConfig()):
    """Fine-tune ``backbone`` in place on (x, y); return per-epoch stats"""
    x = torch.as_tensor(x)
    y = torch.as_tensor(y).reshape(-1)
    if len(x) != len(y) or not len(x):
        raise InvalidInput(
            f"need aligned non-empty inputs, got {len(x)} and {len(y)}")
    attack = AttackConfig(cfg.epsilon, cfg.clamp)
    optimizer = make_optimizer(backbone, cfg.lr)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(
            len(x), generator=torch_generator(cfg.seed, epoch))
        total_loss = 0.0
        correct = seen = 0
        for idx in order.split(cfg.batch_size):
            clean, dirty = idx[:cfg.clean_per_batch], idx[cfg.clean_per_batch:]
            inputs, labels = x[idx], y[idx]
            if len(dirty):
                perturbed = fgsm(backbone, x[dirty], y[dirty], attack)
                inputs = torch.cat([x[clean], perturbed])
                labels = torch.cat([y[clean], y[dirty]])
            backbone.train()
            optimizer.zero_grad(set_to_none=True)
            logits = backbone(inputs)
            loss = backbone.loss(logits, labels)
            loss.backward()
            optimizer.step()
            total_loss += loss.item() * len(labels)
            decisions = backbone.decide(logits.detach())
            correct += (decisions == labels).sum().item()
            seen += len(labels)
        stats = EpochStats(total_loss / seen, correct / seen, seen)
        logger.info("adversarial epoch %d/%d eps=%g loss=%.4f acc=%.4f",
                    epoch, cfg.epochs, cfg.epsilon, stats.loss,
                    stats.accuracy)
        history.append(stats)
    return history


def _column(epsilon):
    return f"eps={epsilon:g}"


def robustness_sweep(models, inputs, labels, epsilons=SWEEP_EPSILONS,
                     weights=None, strategies=("weighted", "majority"),
                     clamps=None, threshold=0.5):
    """Accuracy per model and fused ensemble for each ε

    Each backbone is attacked with its own gradient on its own inputs;
    the perturbed probabilities are then fused. ``inputs`` maps model
    names to tensors, or is one tensor shared by every model.
    """
    if not models:
        raise InvalidInput("robustness sweep needs at least one model")
    epsilons = list(epsilons)
    if not epsilons or any(not e >= 0 for e in epsilons):
        raise InvalidConfig(f"epsilons must be a non-empty list of >= 0: "
                            f"{epsilons}")
    names = list(models)
    if not isinstance(inputs, dict):
        inputs = dict.fromkeys(names, inputs)
    clamps = clamps or {}
    labels_np = torch.as_tensor(labels).numpy()
    if weights is None:
        weights = FusionWeights.equal(len(names))
    rows = {name: [] for name in names}
    fused_rows = {strategy: [] for strategy in strategies
                  if len(names) > 1
                  and not (strategy == "majority" and len(names) % 2 == 0)}
    for epsilon in epsilons:
        probs = np.stack([
            _attacked_proba(models[name], inputs[name], labels,
                            AttackConfig(epsilon, clamps.get(name)))
            for name in names
        ])
        for i, name in enumerate(names):
            rows[name].append(
                float(np.mean(decide(probs[i], threshold) == labels_np)))
        for strategy in fused_rows:
            kind = "optimized" if strategy == "weighted" else strategy
            _, decisions = fuse(probs, kind, weights, threshold)
            fused_rows[strategy].append(
                float(np.mean(decisions == labels_np)))
        logger.info("eps=%g: %s", epsilon, ", ".join(
            f"{name}={rows[name][-1]:.4f}" for name in names))
    rows.update(fused_rows)
    return pd.DataFrame.from_dict(
        rows, orient="index", columns=[_column(e) for e in epsilons])
