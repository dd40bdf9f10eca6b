"""Labelled image folders and per-backbone preprocessing

A dataset root holds ``real/`` and ``fake/`` directories of PNG or JPEG
files. Sample ids are POSIX paths relative to the root, so they are
stable across machines.
"""
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from ._rng import numpy_rng
from .errors import InvalidConfig, InvalidInput
from .imagecore import (
    IMAGENET_STATS,
    Image,
    augment,
    load_image,
    normalize,
    resize_pixels,
)
from .wavelet import wavelet_feature_image

__all__ = [
    "ImageStore",
    "Preprocessor",
    "Split",
    "scan_image_folder",
    "split_validation",
    "stack_inputs",
]

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


def scan_image_folder(root):
    """Return sorted (real_ids, fake_ids) under ``root``"""
    root = Path(root)
    found = []
    for kind in ("real", "fake"):
        folder = root / kind
        if not folder.is_dir():
            raise InvalidInput(f"missing class directory {str(folder)!r}")
        found.append(sorted(
            path.relative_to(root).as_posix()
            for path in folder.rglob("*")
            if path.is_file() and path.suffix.lower() in IMAGE_SUFFIXES
        ))
    logger.info("%s: %d real, %d fake", root, len(found[0]), len(found[1]))
    return tuple(found)


@dataclass(frozen=True)
class Split:
    train_real: tuple
    train_fake: tuple
    val_real: tuple
    val_fake: tuple

    def validation(self):
        """(ids, labels) of the held-out samples, reals first"""
        ids = self.val_real + self.val_fake
        labels = [0] * len(self.val_real) + [1] * len(self.val_fake)
        return ids, np.array(labels)

    def training(self):
        ids = self.train_real + self.train_fake
        return ids, np.array(
            [0] * len(self.train_real) + [1] * len(self.train_fake))


def split_validation(real_ids, fake_ids, fraction=0.2, seed=0):
    """Seeded stratified hold-out of ``fraction`` of each class"""
    if not 0 < fraction < 1:
        raise InvalidConfig(f"validation fraction not in (0, 1): {fraction}")
    parts = []
    for label, ids in enumerate((sorted(real_ids), sorted(fake_ids))):
        held = round(len(ids) * fraction)
        if not 0 < held < len(ids):
            raise InvalidInput(
                f"cannot hold out {fraction:.0%} of {len(ids)} ids")
        order = numpy_rng(seed, label).permutation(len(ids))
        parts.append((tuple(sorted(ids[i] for i in order[held:])),
                      tuple(sorted(ids[i] for i in order[:held]))))
    (train_real, val_real), (train_fake, val_fake) = parts
    return Split(train_real, train_fake, val_real, val_fake)


@dataclass(frozen=True)
class Preprocessor:
    """Image → CHW float32 tensor for one backbone

    ``plain`` resizes, augments when both ``augment`` and a seed are
    given, then normalizes. ``wavelet`` turns the image into its tiled
    sub-band feature image first and is never augmented.
    """
    kind: str = "plain"
    input_size: int = 224
    stats: object = IMAGENET_STATS
    augment: object = None

    def __post_init__(self):
        if self.kind not in ("plain", "wavelet"):
            raise InvalidConfig(f"unknown preprocessor {self.kind!r}")
        if self.kind == "wavelet" and self.input_size % 2:
            raise InvalidConfig(
                f"wavelet input size must be even: {self.input_size}")
        if self.augment is not None:
            object.__setattr__(self, "augment", replace(
                self.augment, output_size=self.input_size))

    @classmethod
    def for_backbone(cls, backbone, stats=IMAGENET_STATS, augment=None):
        if backbone.preprocessor == "wavelet":
            augment = None
        return cls(backbone.preprocessor, backbone.input_size, stats, augment)

    def __call__(self, img, seed=None):
        pixels = img.pixels
        if pixels.shape[2] == 1:
            img = Image(np.repeat(pixels, 3, axis=2), id=img.id)
        if self.kind == "wavelet":
            img = wavelet_feature_image(img, self.input_size)
        elif self.augment is not None and seed is not None:
            img = augment(img, self.augment, seed)
        elif img.height != self.input_size or img.width != self.input_size:
            img = Image(resize_pixels(img.pixels, self.input_size,
                                      self.input_size), id=img.id)
        values = normalize(img, self.stats)
        chw = np.ascontiguousarray(values.transpose(2, 0, 1))
        return torch.from_numpy(chw)


class ImageStore:
    """Decoded images of one dataset root, keyed by id

    Images are decoded at ``load_size`` and cached when ``cache`` is set.
    Reads are safe from many threads.
    """

    def __init__(self, root, load_size, cache=True):
        self.root = Path(root)
        self.load_size = load_size
        self.cache = {} if cache else None
        self._lock = threading.Lock()

    def image(self, sample_id):
        if self.cache is not None:
            with self._lock:
                cached = self.cache.get(sample_id)
            if cached is not None:
                return cached
        img = load_image(self.root / sample_id, self.load_size)
        img = Image(img.pixels, id=sample_id)
        if self.cache is not None:
            with self._lock:
                self.cache[sample_id] = img
        return img

    def fetch(self, sample_id, seed, preprocessor):
        return preprocessor(self.image(sample_id), seed)

    def fetcher(self, preprocessor):
        """``fetch(id, seed)`` callback bound to ``preprocessor``"""
        return lambda sample_id, seed: self.fetch(
            sample_id, seed, preprocessor)


def stack_inputs(store, ids, preprocessor, workers=None):
    """Preprocess ``ids`` without augmentation into one batch tensor"""
    if not ids:
        raise InvalidInput("no ids to stack")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        tensors = list(pool.map(
            lambda sample_id: store.fetch(sample_id, None, preprocessor), ids))
    return torch.stack(tensors)
