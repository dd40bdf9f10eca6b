"""Seeded synthetic real/fake image sets

Real images are a textured ellipse on a smooth colour ramp. Fakes are
drawn the same way and then carry a faint period-2 checkerboard inside
the ellipse, the kind of trace transposed-convolution upsampling leaves
behind. The checkerboard lives almost entirely in the diagonal wavelet
band.
"""
import logging
from pathlib import Path

import numpy as np
import PIL.Image

from ._rng import numpy_rng
from .imagecore import Image

__all__ = [
    "synthetic_image",
    "synthetic_images",
    "write_synthetic_dataset",
]

logger = logging.getLogger(__name__)

ARTIFACT_AMPLITUDE = 0.08


def synthetic_image(label, size, rng, id=""):
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64) / size
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * cols + np.sin(angle) * rows
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    start, stop = rng.uniform(0.2, 0.8, size=(2, 3))
    pixels = start + (stop - start) * ramp[..., None]

    cy, cx = rng.uniform(0.3, 0.7, size=2)
    ay, ax = rng.uniform(0.15, 0.35, size=2)
    tilt = rng.uniform(0, np.pi)
    dy, dx = rows - cy, cols - cx
    u = dx * np.cos(tilt) + dy * np.sin(tilt)
    v = -dx * np.sin(tilt) + dy * np.cos(tilt)
    inside = (u / ax) ** 2 + (v / ay) ** 2 <= 1
    freq = rng.uniform(3, 8)
    texture = 0.5 + 0.25 * np.sin(2 * np.pi * freq * (u + v))
    colour = rng.uniform(0.1, 0.9, size=3)
    pixels[inside] = colour * texture[inside][:, None]

    if label:
        phase = rng.integers(2)
        checker = (-1.0) ** ((np.arange(size)[:, None]
                              + np.arange(size)[None, :] + phase) % 2)
        pixels[inside] += ARTIFACT_AMPLITUDE * checker[inside][:, None]
    return Image(np.clip(pixels, 0.0, 1.0), id=id)


def _name(label, index):
    kind = "fake" if label else "real"
    return f"{kind}/{kind}-{index:05d}.png"


def synthetic_images(n_real, n_fake, size=64, seed=0):
    """In-memory ``[(Image, label), ...]``, reals first"""
    return [
        (synthetic_image(label, size, numpy_rng(seed, label, index),
                         id=_name(label, index)), label)
        for label, count in ((0, n_real), (1, n_fake))
        for index in range(count)
    ]


def write_synthetic_dataset(root, n_real=100, n_fake=500, size=64, seed=0):
    """Write ``<root>/real/*.png`` and ``<root>/fake/*.png``"""
    root = Path(root)
    for kind in ("real", "fake"):
        (root / kind).mkdir(parents=True, exist_ok=True)
    for img, _ in synthetic_images(n_real, n_fake, size, seed):
        pixels = np.rint(img.pixels * 255).astype(np.uint8)
        PIL.Image.fromarray(pixels).save(root / img.id, format="PNG")
    logger.info("wrote %d real and %d fake images to %s",
                n_real, n_fake, root)
    return {"real": n_real, "fake": n_fake}
