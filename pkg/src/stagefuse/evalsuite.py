"""Evaluation metrics and statistical tests

Class 1 (fake) is the positive class throughout. Curve metrics defer to
scikit-learn; the checks around them turn degenerate inputs into
`UndefinedMetric` instead of NaN and warnings.
"""
import itertools
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
from scipy.spatial.distance import mahalanobis as _mahalanobis
from scipy.stats import chi2 as _chi2
from sklearn import metrics as skm

from .ensemble import decide
from .errors import InvalidInput, UndefinedMetric

__all__ = [
    "ClassificationMetrics",
    "ConfusionMatrix",
    "EERResult",
    "EvalReport",
    "McNemarResult",
    "METRIC_KEYS",
    "RocCurve",
    "SeparabilityReport",
    "average_precision",
    "calinski_harabasz",
    "classification_metrics",
    "davies_bouldin",
    "decision_metrics",
    "equal_error_rate",
    "evaluate_predictions",
    "intercentroid",
    "mcnemar",
    "mcnemar_from_counts",
    "mcnemar_frame",
    "model_names_of",
    "pairwise_mcnemar",
    "read_predictions",
    "roc_auc",
    "separability",
]

METRIC_KEYS = ("accuracy", "precision", "recall", "f1", "auc", "eer",
               "average_precision")


def _labels_scores(labels, scores):
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.ndim != 1 or labels.shape != scores.shape:
        raise InvalidInput(
            f"labels {labels.shape} and scores {scores.shape} are not aligned")
    if labels.size == 0:
        raise InvalidInput("no samples to evaluate")
    if not np.isin(labels, (0, 1)).all():
        raise InvalidInput("labels must be 0 (real) or 1 (fake)")
    if not np.isfinite(scores).all():
        raise InvalidInput("scores must be finite")
    return labels.astype(np.int64), scores


def _both_classes(labels, metric):
    if len(np.unique(labels)) < 2:
        raise UndefinedMetric(f"{metric} needs both classes in the labels")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    def as_array(self):
        """[[tn, fp], [fn, tp]] with rows = truth, columns = prediction"""
        return np.array([[self.tn, self.fp], [self.fn, self.tp]])


@dataclass(frozen=True)
class ClassificationMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: ConfusionMatrix
    degenerate: tuple = ()


def decision_metrics(labels, decisions):
    """Threshold metrics for hard 0/1 decisions

    An empty precision or recall denominator yields 0 and the metric's
    name in ``degenerate``.
    """
    labels, decisions = _labels_scores(labels, decisions)
    decisions = decisions.astype(np.int64)
    tn, fp, fn, tp = (int(v) for v in skm.confusion_matrix(
        labels, decisions, labels=[0, 1]).ravel())
    precision, recall, f1, _ = skm.precision_recall_fscore_support(
        labels, decisions, average="binary", pos_label=1, zero_division=0)
    degenerate = []
    if tp + fp == 0:
        degenerate.append("precision")
    if tp + fn == 0:
        degenerate.append("recall")
    return ClassificationMetrics(
        accuracy=(tp + tn) / len(labels),
        precision=float(precision),
        recall=float(recall),
        f1=float(f1),
        confusion=ConfusionMatrix(tp, fp, tn, fn),
        degenerate=tuple(degenerate),
    )


def classification_metrics(labels, scores, threshold=0.5):
    labels, scores = _labels_scores(labels, scores)
    if scores.min() < 0 or scores.max() > 1:
        raise InvalidInput("scores must lie in [0, 1]")
    return decision_metrics(labels, decide(scores, threshold))


@dataclass(frozen=True, eq=False)
class RocCurve:
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def frame(self):
        return pd.DataFrame({"threshold": self.thresholds, "fpr": self.fpr,
                             "tpr": self.tpr})


def _roc(labels, scores, metric):
    labels, scores = _labels_scores(labels, scores)
    _both_classes(labels, metric)
    # tied scores collapse into a single step
    return skm.roc_curve(labels, scores, pos_label=1, drop_intermediate=False)


def roc_auc(labels, scores):
    """Trapezoidal area under the ROC curve, ties counted as one half"""
    fpr, tpr, thresholds = _roc(labels, scores, "AUC")
    return RocCurve(float(skm.auc(fpr, tpr)), fpr, tpr, thresholds)


@dataclass(frozen=True)
class EERResult:
    eer: float
    threshold: float


def equal_error_rate(labels, scores):
    """Rate where FPR = FNR on the ROC polyline

    The crossing is linearly interpolated between adjacent ROC points;
    the returned threshold is interpolated the same way.
    """
    fpr, tpr, thresholds = _roc(labels, scores, "EER")
    gap = fpr - (1 - tpr)
    i = int(np.argmax(gap >= 0))
    if gap[i] == 0 or i == 0:
        return EERResult(float(fpr[i]), float(thresholds[i]))
    t = -gap[i - 1] / (gap[i] - gap[i - 1])
    eer = fpr[i - 1] + t * (fpr[i] - fpr[i - 1])
    # the first ROC point sits at an infinite threshold
    upper = thresholds[i - 1]
    if not np.isfinite(upper):
        upper = thresholds[i]
    threshold = upper + t * (thresholds[i] - upper)
    return EERResult(float(eer), float(threshold))


def average_precision(labels, scores):
    """Σ (R_n − R_{n−1})·P_n over descending score thresholds"""
    labels, scores = _labels_scores(labels, scores)
    if not labels.any():
        raise UndefinedMetric("average precision needs at least one positive")
    return float(skm.average_precision_score(labels, scores, pos_label=1))


@dataclass(frozen=True)
class McNemarResult:
    n11: int
    n10: int
    n01: int
    n00: int
    chi2: float
    p_value: float
    significant: bool
    alpha: float
    bonferroni_m: int = 1
    degenerate: bool = False
    a: str = None
    b: str = None

    @property
    def direction(self):
        """+1 when A alone is right more often, -1 when B is, else 0"""
        return int(np.sign(self.n10 - self.n01))


def mcnemar_from_counts(n11, n10, n01, n00, alpha=0.05, bonferroni_m=1,
                        a=None, b=None):
    """Continuity-corrected McNemar test on a 2×2 agreement table

    ``n10`` counts samples A got right and B got wrong. Significance is
    judged against the Bonferroni threshold ``alpha / bonferroni_m``.
    """
    counts = (n11, n10, n01, n00)
    if any(int(c) != c or c < 0 for c in counts):
        raise InvalidInput(f"counts must be non-negative integers: {counts}")
    if not 0 < alpha < 1 or bonferroni_m < 1:
        raise InvalidInput(
            f"need 0 < alpha < 1 and bonferroni_m >= 1, got "
            f"{alpha}, {bonferroni_m}")
    n11, n10, n01, n00 = (int(c) for c in counts)
    discordant = n10 + n01
    degenerate = discordant == 0
    if degenerate:
        warnings.warn(f"McNemar table {counts} has no discordant pairs")
        chi2, p_value = 0.0, 1.0
    else:
        chi2 = max(abs(n10 - n01) - 1, 0) ** 2 / discordant
        p_value = float(_chi2.sf(chi2, df=1))
    return McNemarResult(
        n11, n10, n01, n00, float(chi2), p_value,
        bool(p_value < alpha / bonferroni_m), alpha, bonferroni_m,
        degenerate, a, b)


def mcnemar(correct_a, correct_b, alpha=0.05, bonferroni_m=1, a=None,
            b=None):
    correct_a = np.asarray(correct_a, dtype=bool)
    correct_b = np.asarray(correct_b, dtype=bool)
    if correct_a.shape != correct_b.shape or correct_a.ndim != 1:
        raise InvalidInput(
            f"correctness flags are not aligned: {correct_a.shape} vs "
            f"{correct_b.shape}")
    return mcnemar_from_counts(
        int(np.sum(correct_a & correct_b)),
        int(np.sum(correct_a & ~correct_b)),
        int(np.sum(~correct_a & correct_b)),
        int(np.sum(~correct_a & ~correct_b)),
        alpha, bonferroni_m, a, b)


def pairwise_mcnemar(correct, alpha=0.05, ensemble=None):
    """McNemar tests for every model pair, then every model vs ``ensemble``

    ``correct`` maps names to per-sample correctness flags. The
    Bonferroni factor is the number of comparisons made.
    """
    models = [name for name in correct if name != ensemble]
    pairs = list(itertools.combinations(models, 2))
    if ensemble is not None:
        pairs += [(name, ensemble) for name in models]
    return [mcnemar(correct[a], correct[b], alpha, len(pairs), a, b)
            for a, b in pairs]


def mcnemar_frame(results):
    return pd.DataFrame([asdict(r) for r in results], columns=[
        "a", "b", "n11", "n10", "n01", "n00", "chi2", "p_value",
        "significant", "alpha", "bonferroni_m", "degenerate"])


def _clusters(embeddings, labels):
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if embeddings.ndim != 2 or labels.shape != (embeddings.shape[0],):
        raise InvalidInput(
            f"embeddings {embeddings.shape} and labels {labels.shape} "
            "are not aligned")
    if not np.isfinite(embeddings).all():
        raise InvalidInput("embeddings must be finite")
    names = np.unique(labels)
    if not 2 <= len(names) < len(labels):
        raise InvalidInput(
            f"need n > k >= 2, got n={len(labels)}, k={len(names)}")
    return embeddings, labels, names


def calinski_harabasz(embeddings, labels):
    """(B / (k − 1)) / (W / (n − k))"""
    embeddings, labels, names = _clusters(embeddings, labels)
    within = sum(
        np.sum((group - group.mean(0)) ** 2)
        for group in (embeddings[labels == k] for k in names))
    if within == 0:
        raise UndefinedMetric(
            "Calinski-Harabasz is undefined when every cluster is a point")
    return float(skm.calinski_harabasz_score(embeddings, labels))


def davies_bouldin(embeddings, labels):
    """Mean over clusters of the worst (S_i + S_j) / M_ij"""
    embeddings, labels, names = _clusters(embeddings, labels)
    centroids = np.stack([embeddings[labels == k].mean(0) for k in names])
    for i, j in itertools.combinations(range(len(names)), 2):
        if np.array_equal(centroids[i], centroids[j]):
            raise UndefinedMetric(
                f"clusters {names[i]!r} and {names[j]!r} share a centroid")
    return float(skm.davies_bouldin_score(embeddings, labels))


def _covariance(embeddings, labels, names, covariance):
    if covariance == "total":
        centred = embeddings - embeddings.mean(0)
        return centred.T @ centred / max(len(embeddings) - 1, 1)
    if covariance != "pooled":
        raise InvalidInput(f"unknown covariance {covariance!r}")
    scatter = sum(
        (embeddings[labels == k] - embeddings[labels == k].mean(0)).T
        @ (embeddings[labels == k] - embeddings[labels == k].mean(0))
        for k in names)
    return scatter / max(len(embeddings) - len(names), 1)


def _mahalanobis_distance(embeddings, labels, names, covariance):
    mu = [embeddings[labels == k].mean(0) for k in names]
    if np.array_equal(mu[0], mu[1]):
        return 0.0, False
    cov = _covariance(embeddings, labels, names, covariance)
    dim = cov.shape[0]
    regularized = np.linalg.matrix_rank(cov) < dim
    if regularized:
        ridge = 1e-6 * np.trace(cov) / dim
        if ridge == 0:
            raise UndefinedMetric("covariance is zero; Mahalanobis undefined")
        warnings.warn(f"singular covariance regularized with ridge {ridge:g}")
        cov = cov + ridge * np.eye(dim)
    return float(_mahalanobis(mu[0], mu[1], np.linalg.inv(cov))), regularized


def intercentroid(embeddings, labels, metric="euclidean",
                  covariance="pooled"):
    """Distance between the centroids of exactly two clusters"""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    names = np.unique(labels)
    if (len(names) != 2 or embeddings.ndim != 2
            or labels.shape != (embeddings.shape[0],)):
        raise InvalidInput(
            f"intercentroid needs two clusters of row vectors, got "
            f"{len(names)} labels and shape {embeddings.shape}")
    if metric == "euclidean":
        mu = [embeddings[labels == k].mean(0) for k in names]
        return float(np.linalg.norm(mu[0] - mu[1]))
    if metric == "mahalanobis":
        return _mahalanobis_distance(embeddings, labels, names, covariance)[0]
    raise InvalidInput(f"unknown metric {metric!r}")


@dataclass(frozen=True)
class SeparabilityReport:
    calinski_harabasz: float
    davies_bouldin: float
    euclid_centroid_dist: float
    mahalanobis_centroid_dist: float
    regularized: bool = False


def separability(embeddings, labels, covariance="pooled"):
    embeddings, labels, names = _clusters(embeddings, labels)
    if len(names) != 2:
        raise InvalidInput(
            f"separability needs two clusters, got {len(names)}")
    mahal, regularized = _mahalanobis_distance(
        embeddings, labels, names, covariance)
    return SeparabilityReport(
        calinski_harabasz(embeddings, labels),
        davies_bouldin(embeddings, labels),
        intercentroid(embeddings, labels),
        mahal,
        regularized,
    )


@dataclass
class EvalReport:
    metrics: dict
    threshold: float
    eer_threshold: float
    confusion: ConfusionMatrix
    roc: RocCurve
    per_model: dict = field(default_factory=dict)
    mcnemar: list = field(default_factory=list)
    degenerate: tuple = ()
    alpha: float = 0.05

    def to_dict(self):
        return {
            "metrics": self.metrics,
            "threshold": self.threshold,
            "alpha": self.alpha,
            "eer_threshold": self.eer_threshold,
            "confusion": asdict(self.confusion),
            "degenerate": list(self.degenerate),
            "per_model": self.per_model,
            "mcnemar": [asdict(r) for r in self.mcnemar],
        }


def evaluate_predictions(frame, model_names, threshold=0.5, alpha=0.05):
    """Full report from a prediction table and nothing else

    ``frame`` has columns ``label``, ``p_<name>`` per model, ``p_fused``
    and optionally ``decision`` (fused hard decisions, e.g. from majority
    voting). McNemar rows compare every model pair and then each model
    against the ensemble.
    """
    labels = frame["label"].to_numpy()
    fused = frame["p_fused"].to_numpy(dtype=np.float64)
    if "decision" in frame:
        decisions = frame["decision"].to_numpy()
    else:
        decisions = decide(fused, threshold)
    base = decision_metrics(labels, decisions)
    roc = roc_auc(labels, fused)
    eer = equal_error_rate(labels, fused)
    metrics = {
        "accuracy": base.accuracy,
        "precision": base.precision,
        "recall": base.recall,
        "f1": base.f1,
        "auc": roc.auc,
        "eer": eer.eer,
        "average_precision": average_precision(labels, fused),
    }
    correct = {}
    per_model = {}
    for name in model_names:
        probs = frame[f"p_{name}"].to_numpy(dtype=np.float64)
        single = classification_metrics(labels, probs, threshold)
        per_model[name] = {
            "accuracy": single.accuracy,
            "precision": single.precision,
            "recall": single.recall,
            "f1": single.f1,
            "auc": roc_auc(labels, probs).auc,
        }
        correct[name] = decide(probs, threshold) == labels
    results = []
    if len(model_names) > 1:
        correct["ensemble"] = decisions == labels
        results = pairwise_mcnemar(correct, alpha, ensemble="ensemble")
    return EvalReport(metrics, threshold, eer.threshold, base.confusion, roc,
                      per_model, results, base.degenerate, alpha)


def read_predictions(path):
    """Load a prediction CSV; ids stay strings"""
    frame = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
    missing = {"id", "label", "p_fused"} - set(frame.columns)
    if missing:
        raise InvalidInput(
            f"prediction file {str(path)!r} lacks columns {sorted(missing)}")
    return frame


def model_names_of(frame):
    """Model names from ``p_<name>`` columns, in column order"""
    return [col[2:] for col in frame.columns
            if col.startswith("p_") and col != "p_fused"]
