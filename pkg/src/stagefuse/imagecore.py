"""Image representation, loading, normalization and augmentation

Images are H×W×C float32 rasters in [0, 1], channel-last. Everything in
this module is a pure function of its arguments (and seed), so it can be
called from many threads at once.
"""
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import PIL.Image
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .errors import DecodeError, InvalidConfig, InvalidInput, InvalidStats

__all__ = [
    "AugmentConfig",
    "IMAGENET_STATS",
    "Image",
    "NormalizationStats",
    "augment",
    "denormalize",
    "load_image",
    "normalize",
    "resize_pixels",
]


@dataclass(frozen=True, eq=False)
class Image:
    pixels: np.ndarray
    id: str = ""

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float32)
        if pixels.ndim == 2:
            pixels = pixels[:, :, None]
        if pixels.ndim != 3 or pixels.shape[2] not in (1, 3):
            raise InvalidInput(
                f"expected H×W×C pixels with C in (1, 3), got {pixels.shape}")
        if pixels.shape[0] == 0 or pixels.shape[1] == 0:
            raise InvalidInput(f"image {self.id!r} has zero extent")
        if not np.isfinite(pixels).all():
            raise InvalidInput(f"image {self.id!r} has non-finite pixels")
        if pixels.min() < 0 or pixels.max() > 1:
            raise InvalidInput(f"image {self.id!r} has pixels outside [0, 1]")
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def channels(self):
        return self.pixels.shape[2]

    def tensor(self):
        """Channel-first float32 tensor view of the pixels"""
        return torch.from_numpy(
            np.ascontiguousarray(self.pixels.transpose(2, 0, 1)))


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple
    std: tuple

    def __post_init__(self):
        mean = tuple(float(m) for m in self.mean)
        std = tuple(float(s) for s in self.std)
        if len(mean) != len(std) or not mean:
            raise InvalidStats(
                f"mean and std lengths differ: {len(mean)} != {len(std)}")
        if any(not s > 0 for s in std):
            raise InvalidStats(f"std must be strictly positive: {std}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def channels(self):
        return len(self.mean)

    def clamp_bounds(self):
        """Per-channel normalized image of the pixel interval [0, 1]"""
        low = tuple(-m / s for m, s in zip(self.mean, self.std))
        high = tuple((1 - m) / s for m, s in zip(self.mean, self.std))
        return low, high


IMAGENET_STATS = NormalizationStats(
    mean=(0.485, 0.456, 0.406),
    std=(0.229, 0.224, 0.225),
)


@dataclass(frozen=True)
class AugmentConfig:
    """Training-time augmentation

    Defaults are the four-step recipe: 50% horizontal flips, rotations
    within 0-10 degrees, 20% colour jitter and a 224 px random resized
    crop covering 80-120% of the source area.
    """
    hflip_prob: float = 0.5
    rotation_max_deg: float = 10.0
    jitter_strength: float = 0.2
    crop_scale_min: float = 0.8
    crop_scale_max: float = 1.2
    output_size: int = 224

    def __post_init__(self):
        if not 0 <= self.hflip_prob <= 1:
            raise InvalidConfig(f"hflip_prob not in [0, 1]: {self.hflip_prob}")
        if self.rotation_max_deg < 0:
            raise InvalidConfig(
                f"rotation_max_deg is negative: {self.rotation_max_deg}")
        if not 0 <= self.jitter_strength <= 1:
            raise InvalidConfig(
                f"jitter_strength not in [0, 1]: {self.jitter_strength}")
        if not 0 < self.crop_scale_min <= self.crop_scale_max:
            raise InvalidConfig(
                "crop scale bounds must satisfy 0 < min <= max, got "
                f"({self.crop_scale_min}, {self.crop_scale_max})")
        if self.output_size < 1:
            raise InvalidConfig(f"output_size < 1: {self.output_size}")

    @classmethod
    def identity(cls, output_size):
        return cls(0.0, 0.0, 0.0, 1.0, 1.0, output_size)


def load_image(path, target_size):
    """Decode a PNG or JPEG file into a target_size × target_size Image"""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {str(path)!r}")
    try:
        with PIL.Image.open(path) as raw:
            raw.load()
            mode = "L" if raw.mode in ("1", "L", "I", "I;16") else "RGB"
            picture = raw.convert(mode)
    except (OSError, SyntaxError, PIL.UnidentifiedImageError) as exc:
        raise DecodeError(f"cannot decode image {str(path)!r}: {exc}") from exc
    if picture.width == 0 or picture.height == 0:
        raise InvalidInput(f"image {str(path)!r} has zero extent")
    if picture.size != (target_size, target_size):
        picture = picture.resize(
            (target_size, target_size), PIL.Image.Resampling.BILINEAR)
    pixels = np.asarray(picture, dtype=np.float32) / 255.0
    return Image(pixels, id=path.name)


def resize_pixels(pixels, height, width):
    """Bilinear resize of an H×W×C array; same-size input is copied"""
    if pixels.shape[:2] == (height, width):
        return np.array(pixels, copy=True)
    batch = torch.from_numpy(
        np.ascontiguousarray(pixels.transpose(2, 0, 1)))[None]
    out = F.interpolate(batch, size=(height, width), mode="bilinear",
                        align_corners=False, antialias=True)
    return np.clip(out[0].permute(1, 2, 0).numpy(), 0.0, 1.0)


def _as_pixels(img):
    return img.pixels if isinstance(img, Image) else np.asarray(img)


def _stats_arrays(stats, channels):
    if stats.channels != channels:
        raise InvalidInput(
            f"stats have {stats.channels} channels, image has {channels}")
    return (np.asarray(stats.mean, dtype=np.float64),
            np.asarray(stats.std, dtype=np.float64))


def normalize(img, stats):
    """Return (pixels - mean) / std per channel as a float32 array"""
    pixels = _as_pixels(img)
    mean, std = _stats_arrays(stats, pixels.shape[-1])
    return ((pixels - mean) / std).astype(np.float32)


def denormalize(values, stats):
    """Inverse of `normalize`"""
    values = np.asarray(values)
    mean, std = _stats_arrays(stats, values.shape[-1])
    return (values * std + mean).astype(np.float32)


def augment(img, cfg, rng_seed):
    """Flip, rotate, colour-jitter and random-resized-crop an image

    Parameters are drawn in a fixed order from ``rng_seed``, so equal
    seeds give bit-identical outputs.
    """
    rng = np.random.default_rng(rng_seed)
    flip = rng.random() < cfg.hflip_prob
    angle = rng.uniform(0.0, cfg.rotation_max_deg)
    strength = cfg.jitter_strength
    brightness, contrast, saturation = rng.uniform(
        1 - strength, 1 + strength, size=3)
    hue = rng.uniform(-strength / 2, strength / 2)
    scale = rng.uniform(cfg.crop_scale_min, cfg.crop_scale_max)
    top_u, left_u = rng.random(2)

    pixels = img.pixels
    if flip:
        pixels = pixels[:, ::-1, :]
    if angle:
        # edge replication keeps exposed corners free of black wedges
        pixels = np.clip(ndimage.rotate(
            pixels, angle, axes=(1, 0), reshape=False, order=1,
            mode="nearest"), 0.0, 1.0)
    if strength:
        pixels = _jitter(pixels, brightness, contrast, saturation, hue)
    pixels = _resized_crop(pixels, scale, top_u, left_u, cfg)
    return Image(pixels, id=img.id)


def _jitter(pixels, brightness, contrast, saturation, hue):
    tensor = torch.from_numpy(
        np.ascontiguousarray(pixels.transpose(2, 0, 1), dtype=np.float32))
    tensor = TF.adjust_brightness(tensor, float(brightness))
    tensor = TF.adjust_contrast(tensor, float(contrast))
    pixels = tensor.permute(1, 2, 0).numpy()
    if pixels.shape[2] == 3:
        hsv = rgb_to_hsv(np.clip(pixels, 0.0, 1.0))
        hsv[..., 0] = np.mod(hsv[..., 0] + hue, 1.0)
        hsv[..., 1] = np.clip(hsv[..., 1] * saturation, 0.0, 1.0)
        pixels = hsv_to_rgb(hsv)
    return np.clip(pixels, 0.0, 1.0).astype(np.float32)


def _resized_crop(pixels, scale, top_u, left_u, cfg):
    height, width = pixels.shape[:2]
    smallest = round(min(height, width) * math.sqrt(cfg.crop_scale_min))
    if smallest < 1:
        raise InvalidConfig(
            f"crop_scale_min {cfg.crop_scale_min} leaves no pixels of a "
            f"{height}×{width} image")
    side = math.sqrt(scale)
    crop_h = max(1, round(height * side))
    crop_w = max(1, round(width * side))
    pad_h = max(0, crop_h - height)
    pad_w = max(0, crop_w - width)
    if pad_h or pad_w:
        pixels = np.pad(pixels, (
            (pad_h // 2, pad_h - pad_h // 2),
            (pad_w // 2, pad_w - pad_w // 2),
            (0, 0),
        ), mode="edge")
    room_h = pixels.shape[0] - crop_h
    room_w = pixels.shape[1] - crop_w
    top = min(int(top_u * (room_h + 1)), room_h)
    left = min(int(left_u * (room_w + 1)), room_w)
    window = pixels[top:top + crop_h, left:left + crop_w]
    return resize_pixels(window, cfg.output_size, cfg.output_size)
