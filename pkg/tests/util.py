import numpy as np
import torch
from torch.utils.data import DataLoader, TensorDataset
from unmagic import fixture, get_request

from stagefuse.backbones import LogisticBackbone

tmp_path = fixture("tmp_path")


@fixture(scope="module")
def module_dir():
    factory = get_request().getfixturevalue("tmp_path_factory")
    yield factory.mktemp("module")


def gaussian_toy(n_real, n_fake, dim=1, shift=0.5, seed=0):
    """Unit-variance classes centred at -shift (real) and +shift (fake)"""
    rng = np.random.default_rng(seed)
    labels = np.array([0] * n_real + [1] * n_fake)
    centres = np.where(labels[:, None] == 1, shift, -shift)
    x = centres + rng.standard_normal((len(labels), dim))
    return torch.tensor(x, dtype=torch.float32), torch.tensor(labels)


def robust_and_weak_toy(n, weak=400, seed=0):
    """One strong feature plus many individually weak ones

    Linear models trained on clean data lean on the weak features and
    are easy to flip with a small L∞ perturbation.
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    sign = (2 * labels - 1)[:, None].astype(np.float64)
    strong = sign + 0.5 * rng.standard_normal((n, 1))
    faint = 0.1 * sign + rng.standard_normal((n, weak))
    x = np.concatenate([strong, faint], axis=1)
    return torch.tensor(x, dtype=torch.float32), torch.tensor(labels)


def fragile_and_robust_toy(n, robust=1000, fragile=1000, seed=0):
    """Unit-noise features with a 0.3 mean shift next to low-noise ones
    shifted by only 0.002, below the recipe's 0.005 attack budget
    """
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, n)
    sign = (2 * labels - 1)[:, None].astype(np.float64)
    sturdy = 0.3 * sign + rng.standard_normal((n, robust))
    brittle = 0.002 * sign + 0.01 * rng.standard_normal((n, fragile))
    x = np.concatenate([sturdy, brittle], axis=1)
    return torch.tensor(x, dtype=torch.float32), torch.tensor(labels)


def loader(x, y, batch_size=32, seed=0):
    return DataLoader(
        TensorDataset(x, y), batch_size=batch_size, shuffle=True,
        generator=torch.Generator().manual_seed(seed))


def logistic(weights, bias=0.0):
    model = LogisticBackbone(len(weights))
    model.set_parameters({
        "head.weight": torch.tensor([weights], dtype=torch.float32),
        "head.bias": torch.tensor([bias], dtype=torch.float32),
    })
    return model


def balanced_accuracy(labels, probs):
    labels = np.asarray(labels)
    decisions = np.asarray(probs) >= 0.5
    tpr = decisions[labels == 1].mean()
    tnr = (~decisions[labels == 0]).mean()
    return (tpr + tnr) / 2
