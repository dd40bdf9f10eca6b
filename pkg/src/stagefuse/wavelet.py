"""Single-level 2D Haar wavelet features

Sub-band naming follows the row-filter → column-filter pipeline with the
high-pass taps [-1/√2, 1/√2] applied left to right, so a detail
coefficient is ``(b - a) / √2`` for a sample pair ``(a, b)``:

- ``H`` differences neighbouring columns (left/right changes),
- ``V`` differences neighbouring rows (top/bottom changes),
- ``D`` differences along both axes.

PyWavelets computes ``(a - b) / √2`` and calls the row-difference band
horizontal, hence the sign flips and the swap in `dwt2_haar`.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import PIL.Image
import pywt

from .errors import InvalidInput
from .imagecore import Image, resize_pixels

__all__ = [
    "FeatureImage",
    "SubbandSet",
    "dwt2_haar",
    "extract_batch",
    "feature_image",
    "idwt2_haar",
    "save_feature_image",
    "subbands",
    "wavelet_feature_image",
]

DEFAULT_FEATURE_SIZE = 296
QUADRANTS = {"top-left": "A", "top-right": "H",
             "bottom-left": "V", "bottom-right": "D"}


@dataclass(frozen=True, eq=False)
class SubbandSet:
    """Per-channel (A, H, V, D) coefficients, each C×h×w"""
    A: np.ndarray
    H: np.ndarray
    V: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        shapes = {band.shape for band in (self.A, self.H, self.V, self.D)}
        if len(shapes) != 1:
            raise InvalidInput(f"sub-band shapes differ: {sorted(shapes)}")

    @property
    def channel_count(self):
        return self.A.shape[0]

    def energy(self):
        return float(sum(np.sum(np.square(band, dtype=np.float64))
                         for band in (self.A, self.H, self.V, self.D)))


@dataclass(frozen=True, eq=False)
class FeatureImage:
    """Tiled 8-bit sub-band image: A|H over V|D per channel"""
    pixels: np.ndarray
    layout = QUADRANTS

    def __post_init__(self):
        height, width = self.pixels.shape[:2]
        if height % 2 or width % 2:
            raise InvalidInput(f"feature image must be even-sized: "
                               f"{self.pixels.shape}")
        if self.pixels.dtype != np.uint8:
            raise InvalidInput(f"expected uint8 pixels: {self.pixels.dtype}")

    def to_image(self, target_size, id=""):
        scaled = self.pixels.astype(np.float32) / 255.0
        return Image(resize_pixels(scaled, target_size, target_size), id=id)


def _as_matrix(channel):
    matrix = np.asarray(channel, dtype=np.float64)
    if matrix.ndim != 2:
        raise InvalidInput(f"expected a 2-D matrix, got shape {matrix.shape}")
    if matrix.size == 0:
        raise InvalidInput("cannot transform an empty matrix")
    if not np.isfinite(matrix).all():
        raise InvalidInput("matrix contains non-finite values")
    return matrix


def dwt2_haar(channel):
    """Single-level 2D Haar DWT of one channel → (A, H, V, D)

    Odd row or column counts are symmetric-padded by one before
    filtering (PyWavelets' ``symmetric`` mode repeats the edge sample).
    """
    matrix = _as_matrix(channel)
    approx, (rows_detail, cols_detail, diag) = pywt.dwt2(
        matrix, "haar", mode="symmetric")
    return approx, -cols_detail, -rows_detail, diag


def idwt2_haar(A, H, V, D, shape=None):
    """Inverse of `dwt2_haar`; ``shape`` crops padded odd inputs"""
    bands = [np.asarray(band, dtype=np.float64) for band in (A, H, V, D)]
    shapes = {band.shape for band in bands}
    if len(shapes) != 1 or bands[0].ndim != 2:
        raise InvalidInput(f"sub-band shapes differ: {sorted(shapes)}")
    A, H, V, D = bands
    matrix = pywt.idwt2((A, (-V, -H, D)), "haar", mode="symmetric")
    if shape is not None:
        rows, cols = shape
        matrix = matrix[:rows, :cols]
    return matrix


def subbands(img):
    """Decompose every channel of an Image into a SubbandSet"""
    pixels = img.pixels if isinstance(img, Image) else np.asarray(img)
    per_channel = [dwt2_haar(pixels[:, :, c]) for c in range(pixels.shape[2])]
    return SubbandSet(*(np.stack(band) for band in zip(*per_channel)))


def _to_uint8(band):
    low, high = band.min(), band.max()
    if high == low:
        return np.zeros(band.shape, dtype=np.uint8)
    return np.rint((band - low) * (255.0 / (high - low))).astype(np.uint8)


def feature_image(img):
    """Tile per-channel sub-bands into an 8-bit FeatureImage

    Each sub-band of each channel is min-max scaled to [0, 255] on its
    own; a constant sub-band maps to 0.
    """
    if img.channels != 3:
        raise InvalidInput(
            f"wavelet features need an RGB image, got {img.channels} channels")
    bands = subbands(img)
    tiles = []
    for c in range(bands.channel_count):
        A, H, V, D = (_to_uint8(band[c])
                      for band in (bands.A, bands.H, bands.V, bands.D))
        tiles.append(np.block([[A, H], [V, D]]))
    return FeatureImage(np.stack(tiles, axis=-1))


def wavelet_feature_image(img, target_size=DEFAULT_FEATURE_SIZE):
    """Wavelet feature image resized to target_size², floats in [0, 1]"""
    return feature_image(img).to_image(target_size, id=img.id)


def extract_batch(images, target_size=DEFAULT_FEATURE_SIZE, workers=None):
    """Order-preserving `wavelet_feature_image` over many images"""
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(
            lambda img: wavelet_feature_image(img, target_size), images))


def save_feature_image(features, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pixels = features.pixels
    if pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    PIL.Image.fromarray(pixels).save(path, format="PNG")
    return path
