"""ROC and confusion-matrix figures

Figures are drawn on standalone ``Figure`` objects (no pyplot state) and
saved as PNG without a software tag.
"""
from pathlib import Path

from matplotlib.figure import Figure

__all__ = ["plot_confusion", "plot_roc"]

PNG_METADATA = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=100, metadata=PNG_METADATA)
    return path


def plot_roc(fpr, tpr, auc, path, title="ROC curve"):
    fig = Figure(figsize=(4.5, 4.5))
    ax = fig.add_subplot()
    ax.plot(fpr, tpr, label=f"AUC = {auc:.4f}")
    ax.plot([0, 1], [0, 1], linestyle="--", color="grey", linewidth=0.8)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def plot_confusion(matrix, path, class_names=("real", "fake")):
    """``matrix`` rows are true classes, columns predicted classes"""
    fig = Figure(figsize=(4, 4))
    ax = fig.add_subplot()
    ax.imshow(matrix, cmap="Blues")
    ticks = range(len(class_names))
    ax.set_xticks(ticks, class_names)
    ax.set_yticks(ticks, class_names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    peak = max(int(matrix.max()), 1)
    for (row, col), value in _cells(matrix):
        ax.text(col, row, str(value), ha="center", va="center",
                color="white" if value > peak / 2 else "black")
    fig.tight_layout()
    return _save(fig, path)


def _cells(matrix):
    for row, values in enumerate(matrix):
        for col, value in enumerate(values):
            yield (row, col), int(value)
