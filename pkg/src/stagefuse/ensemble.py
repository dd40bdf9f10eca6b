"""Probability-level late fusion

Probabilities are laid out models-first: ``probs[i]`` is model ``i``'s
fake-class probability (a scalar or one value per sample).
"""
import itertools
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from sklearn.metrics import roc_auc_score

from .errors import InvalidConfig, InvalidInput

__all__ = [
    "FusionWeights",
    "RECIPE_WEIGHTS",
    "PredictionRecord",
    "WeightSearch",
    "ablation_table",
    "decide",
    "fuse",
    "fuse_majority",
    "fuse_weighted",
    "fusion_report",
    "prediction_frame",
    "search_weights",
    "simplex_grid",
]

STRATEGIES = ("equal", "optimized", "majority")

# fused values this close below the threshold count as reaching it
DECISION_TOLERANCE = 1e-9


@dataclass(frozen=True)
class FusionWeights:
    weights: tuple

    def __post_init__(self):
        weights = tuple(float(w) for w in self.weights)
        if not weights:
            raise InvalidInput("fusion needs at least one weight")
        if any(not (math.isfinite(w) and w >= 0) for w in weights):
            raise InvalidInput(f"weights must be finite and >= 0: {weights}")
        if abs(math.fsum(weights) - 1.0) > 1e-9:
            raise InvalidInput(f"weights must sum to 1: {weights}")
        object.__setattr__(self, "weights", weights)

    @classmethod
    def equal(cls, count):
        return cls((1.0 / count,) * count)

    def __len__(self):
        return len(self.weights)

    def __iter__(self):
        return iter(self.weights)

    def as_array(self):
        return np.asarray(self.weights, dtype=np.float64)


# conv, attention, wavelet
RECIPE_WEIGHTS = FusionWeights((0.35, 0.34, 0.31))


def _probabilities(probs):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim not in (1, 2) or probs.shape[0] == 0:
        raise InvalidInput(
            f"expected per-model probabilities, got shape {probs.shape}")
    if not np.all((probs >= 0) & (probs <= 1)):
        raise InvalidInput("probabilities must lie in [0, 1]")
    return probs


def decide(fused, threshold=0.5):
    """Fake (1) where ``fused >= threshold``, up to DECISION_TOLERANCE"""
    return (np.asarray(fused) >= threshold - DECISION_TOLERANCE).astype(
        np.int64)


def _weighted(weights, probs):
    # offsets from the per-sample minimum: equal inputs come back exact
    low = probs.min(axis=0)
    return low + np.tensordot(weights, probs - low, axes=1)


def fuse_weighted(probs, weights):
    """Σ wᵢ·pᵢ over models; a float for scalar inputs, else one per sample

    When every model gives the same probability the fused value is that
    probability exactly.
    """
    probs = _probabilities(probs)
    if not isinstance(weights, FusionWeights):
        weights = FusionWeights(weights)
    if len(weights) != probs.shape[0]:
        raise InvalidInput(
            f"{len(weights)} weights for {probs.shape[0]} models")
    fused = np.clip(_weighted(weights.as_array(), probs), 0.0, 1.0)
    return float(fused) if probs.ndim == 1 else fused


def fuse_majority(decisions):
    decisions = np.asarray(decisions)
    count = decisions.shape[0] if decisions.ndim else 0
    if count % 2 == 0:
        raise InvalidConfig(
            f"majority voting needs an odd number of models, got {count}")
    if not np.isin(decisions, (0, 1)).all():
        raise InvalidInput("decisions must be 0 or 1")
    majority = (2 * decisions.sum(axis=0) > count).astype(np.int64)
    return int(majority) if decisions.ndim == 1 else majority


def fuse(probs, strategy, weights=None, threshold=0.5):
    """Fused probability and decision per sample for a named strategy

    For majority voting the fused value is the share of models voting
    fake and the decision is the majority, so it is ``share > 0.5``
    whatever the threshold; the threshold only sets each model's vote.
    """
    probs = _probabilities(probs)
    if strategy == "majority":
        votes = decide(probs, threshold)
        return votes.mean(axis=0), fuse_majority(votes)
    if strategy == "equal":
        weights = FusionWeights.equal(probs.shape[0])
    elif strategy != "optimized":
        raise InvalidConfig(
            f"unknown fusion strategy {strategy!r}; expected one of "
            f"{STRATEGIES}")
    elif weights is None:
        raise InvalidConfig("optimized fusion needs searched weights")
    fused = fuse_weighted(probs, weights)
    return fused, decide(fused, threshold)


def _compositions(total, parts):
    if parts == 1:
        yield (total,)
        return
    for first in range(total + 1):
        for rest in _compositions(total - first, parts - 1):
            yield (first, *rest)


def simplex_grid(models, step=0.01):
    """Every weight vector on the ``step`` simplex grid, lexicographically

    Returns a (points, models) float array; 3 models at 0.01 give 5,151
    points.
    """
    if models < 1:
        raise InvalidConfig(f"need at least one model, got {models}")
    units = round(1 / step)
    if units < 1 or abs(units * step - 1) > 1e-9:
        raise InvalidConfig(f"step {step} does not divide 1 exactly")
    grid = np.array(list(_compositions(units, models)), dtype=np.float64)
    return grid / units


@dataclass(frozen=True)
class WeightSearch:
    weights: FusionWeights
    score: float
    grid_size: int
    objective: str
    step: float


def _grid_scores(grid, probs, labels, threshold, objective):
    scores = []
    for chunk in np.array_split(grid, max(1, len(grid) // 512)):
        fused = _weighted(chunk, probs)
        if objective == "accuracy":
            # integer counts so equal accuracies compare exactly
            scores.append((decide(fused, threshold) == labels).sum(axis=1))
        else:
            scores.append([roc_auc_score(labels, row) for row in fused])
    return np.concatenate(scores)


def search_weights(val_probs, labels, step=0.01, threshold=0.5,
                   objective="accuracy"):
    """Exhaustive simplex search for the best fusion weights

    Ties go to the lexicographically smallest weight vector.
    """
    probs = _probabilities(val_probs)
    if probs.ndim != 2:
        raise InvalidInput("val_probs must be a models × samples matrix")
    labels = np.asarray(labels)
    if probs.shape[1] == 0:
        raise InvalidInput("cannot search weights on an empty validation set")
    if labels.shape != (probs.shape[1],):
        raise InvalidInput(
            f"{labels.shape[0] if labels.ndim else 0} labels for "
            f"{probs.shape[1]} samples")
    if objective not in ("accuracy", "auc"):
        raise InvalidConfig(f"unknown objective {objective!r}")
    if objective == "auc" and len(np.unique(labels)) < 2:
        raise InvalidInput("the AUC objective needs both classes")
    grid = simplex_grid(probs.shape[0], step)
    scores = _grid_scores(grid, probs, labels, threshold, objective)
    best = int(np.argmax(scores))
    score = float(scores[best])
    if objective == "accuracy":
        score /= len(labels)
    # snap to exact hundredths so the simplex check is not thrown by rounding
    units = round(1 / step)
    weights = FusionWeights(tuple(
        int(round(w * units)) / units for w in grid[best]))
    return WeightSearch(weights, score, len(grid), objective, step)


def _accuracy(decisions, labels):
    return float(np.mean(decisions == labels))


def ablation_table(val_probs, labels, names, weights=None,
                   parameter_counts=None, threshold=0.5):
    """Accuracy of single models, equal-weight subsets and both fusions

    ``weights`` defaults to a fresh `search_weights` over all models.
    """
    probs = _probabilities(val_probs)
    labels = np.asarray(labels)
    if len(names) != probs.shape[0]:
        raise InvalidInput(f"{len(names)} names for {probs.shape[0]} models")
    if weights is None:
        weights = search_weights(probs, labels, threshold=threshold).weights
    counts = dict(zip(names, parameter_counts or [None] * len(names)))

    def row(members, strategy, decisions):
        total = None
        if parameter_counts is not None:
            total = sum(counts[m] for m in members)
        return {"members": "+".join(members), "strategy": strategy,
                "parameter_count": total,
                "accuracy": _accuracy(decisions, labels)}

    rows = [row([name], "single", decide(probs[i], threshold))
            for i, name in enumerate(names)]
    for size in range(2, len(names) + 1):
        for subset in itertools.combinations(range(len(names)), size):
            _, decisions = fuse(probs[list(subset)], "equal",
                                threshold=threshold)
            rows.append(row([names[i] for i in subset], "equal", decisions))
    if len(names) > 1:
        _, decisions = fuse(probs, "optimized", weights, threshold)
        rows.append(row(names, "optimized", decisions))
    if len(names) % 2:
        _, decisions = fuse(probs, "majority", threshold=threshold)
        rows.append(row(names, "majority", decisions))
    return pd.DataFrame(rows, columns=[
        "members", "strategy", "parameter_count", "accuracy"])


def fusion_report(val_probs, labels, names, search, threshold=0.5):
    """JSON-ready summary of the searched weights and every strategy"""
    probs = _probabilities(val_probs)
    labels = np.asarray(labels)
    accuracy = {name: _accuracy(decide(probs[i], threshold), labels)
                for i, name in enumerate(names)}
    for strategy in STRATEGIES:
        if strategy == "majority" and len(names) % 2 == 0:
            continue
        _, decisions = fuse(probs, strategy, search.weights, threshold)
        accuracy[strategy] = _accuracy(decisions, labels)
    return {
        "weights": dict(zip(names, search.weights)),
        "accuracy": accuracy,
        "grid_size": search.grid_size,
        "step": search.step,
        "objective": search.objective,
        "score": search.score,
        "threshold": threshold,
    }


@dataclass(frozen=True)
class PredictionRecord:
    id: str
    label: int
    probs: tuple
    fused: float
    decision: int

    def __post_init__(self):
        if self.label not in (0, 1) or self.decision not in (0, 1):
            raise InvalidInput(
                f"label and decision must be 0 or 1: {self.id!r}")
        if not all(0 <= p <= 1 for p in (*self.probs, self.fused)):
            raise InvalidInput(f"probabilities outside [0, 1]: {self.id!r}")


def prediction_frame(ids, labels, probs, names, strategy, weights=None,
                     threshold=0.5):
    """Fuse per-model probabilities into a prediction table

    Columns: ``id, label, p_<name>..., p_fused, decision``.
    """
    probs = _probabilities(probs)
    fused, decisions = fuse(probs, strategy, weights, threshold)
    records = [
        PredictionRecord(str(sid), int(label), tuple(probs[:, i]),
                         float(fused[i]), int(decisions[i]))
        for i, (sid, label) in enumerate(zip(ids, labels))
    ]
    frame = pd.DataFrame({
        "id": [r.id for r in records],
        "label": [r.label for r in records],
    })
    for i, name in enumerate(names):
        frame[f"p_{name}"] = [r.probs[i] for r in records]
    frame["p_fused"] = [r.fused for r in records]
    frame["decision"] = [r.decision for r in records]
    return frame
