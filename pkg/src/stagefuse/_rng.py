"""Seed derivation shared by every stochastic step

All randomness is derived from an experiment seed plus a path of
integers (stage, epoch, sample index, ...) so any step can be replayed
without replaying the steps before it.
"""
from contextlib import contextmanager

import numpy as np
import torch


def derive_seed(seed, *path):
    """Return a 63-bit integer seed for ``seed`` refined by ``path``"""
    sequence = np.random.SeedSequence([int(seed), *(int(p) for p in path)])
    high, low = (int(word) for word in sequence.generate_state(2, np.uint32))
    return ((high << 32) | low) >> 1


def numpy_rng(seed, *path):
    return np.random.default_rng(derive_seed(seed, *path))


def torch_generator(seed, *path):
    return torch.Generator().manual_seed(derive_seed(seed, *path))


@contextmanager
def torch_seeded(seed, *path):
    """Seed torch's global RNG inside the block and restore it after"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, *path))
        yield
