"""Two-view SSL augmentation and joint image/mask augmentation for fine-tuning.

Images travel through the pipeline as float64 ``[3, H, W]`` arrays on the
0..255 scale; only the final normalization maps them to network inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import ImageRecord
from .tensor import Tensor

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
LUMA = (0.299, 0.587, 0.114)


@dataclass
class AugmentConfig:
    view_size: int = 64
    crop_scale_range: tuple[float, float] = (0.2, 1.0)
    flip_prob: float = 0.5
    jitter_delta: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    normalize_mean: tuple[float, float, float] = IMAGENET_MEAN
    normalize_std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        self.crop_scale_range = tuple(self.crop_scale_range)
        self.blur_sigma_range = tuple(self.blur_sigma_range)
        self.normalize_mean = tuple(self.normalize_mean)
        self.normalize_std = tuple(self.normalize_std)
        for name in ("flip_prob", "grayscale_prob", "blur_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_scale_range must satisfy 0 < min <= max <= 1, got {self.crop_scale_range}")
        if self.jitter_delta < 0:
            raise ValueError("jitter_delta must be >= 0")
        s0, s1 = self.blur_sigma_range
        if not 0.0 < s0 <= s1:
            raise ValueError(f"blur_sigma_range must satisfy 0 < min <= max, got {self.blur_sigma_range}")
        if self.view_size < 8:
            raise ValueError("view_size must be >= 8")
        if len(self.normalize_mean) != 3 or len(self.normalize_std) != 3:
            raise ValueError("normalization needs three means and three stds")
        if any(s == 0 for s in self.normalize_std):
            raise ValueError("normalize_std components must be nonzero")


@dataclass
class ViewPair:
    view_a: Tensor
    view_b: Tensor
    source_id: str


def to_chw(image: ImageRecord | np.ndarray) -> np.ndarray:
    """uint8 ``[H,W,1|3]`` (or a record) -> float64 ``[3,H,W]``, grayscale replicated."""
    px = image.pixels if isinstance(image, ImageRecord) else np.asarray(image)
    if px.ndim == 2:
        px = px[:, :, None]
    if px.shape[2] == 1:
        px = np.repeat(px, 3, axis=2)
    return px.transpose(2, 0, 1).astype(np.float64)


def normalize(image, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    """Per channel ``(x/255 - mean[c]) / std[c]``; accepts arrays or Tensors."""
    std_arr = np.asarray(std, np.float64)
    if np.any(std_arr == 0):
        raise ValueError("normalize: std components must be nonzero")
    data = image.data if isinstance(image, Tensor) else np.asarray(image, np.float64)
    out = (data / 255.0 - np.asarray(mean, np.float64)[:, None, None]) / std_arr[:, None, None]
    return Tensor(out) if isinstance(image, Tensor) else out


def denormalize(image, mean=IMAGENET_MEAN, std=IMAGENET_STD):
    data = image.data if isinstance(image, Tensor) else np.asarray(image, np.float64)
    out = (data * np.asarray(std, np.float64)[:, None, None] + np.asarray(mean, np.float64)[:, None, None]) * 255.0
    return Tensor(out) if isinstance(image, Tensor) else out


# ---------------------------------------------------------------------------
# individual transforms


def crop_box(height: int, width: int, scale: tuple[float, float], rng: np.random.Generator,
             ratio: tuple[float, float] = (3 / 4, 4 / 3)) -> tuple[int, int, int, int]:
    """Random (top, left, h, w) with area fraction in ``scale``; whole image as fallback."""
    area = height * width
    for _ in range(10):
        target = area * rng.uniform(*scale)
        r = rng.uniform(*ratio)
        w = int(round(math.sqrt(target * r)))
        h = int(round(math.sqrt(target / r)))
        if 0 < w <= width and 0 < h <= height:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return top, left, h, w
    return 0, 0, height, width


def _resize_axis(img: np.ndarray, out: int, axis: int) -> np.ndarray:
    n = img.shape[axis]
    src = (np.arange(out) + 0.5) * (n / out) - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    shape = [1] * img.ndim
    shape[axis] = out
    frac = frac.reshape(shape)
    return np.take(img, i0, axis=axis) * (1.0 - frac) + np.take(img, i1, axis=axis) * frac


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of ``[C,H,W]`` to ``[C,size,size]``."""
    return _resize_axis(_resize_axis(img, size, 1), size, 2)


def grayscale(img: np.ndarray) -> np.ndarray:
    return LUMA[0] * img[0] + LUMA[1] * img[1] + LUMA[2] * img[2]


def adjust_brightness(img, factor):
    return np.clip(img * factor, 0.0, 255.0)


def adjust_contrast(img, factor):
    return np.clip(factor * img + (1.0 - factor) * grayscale(img).mean(), 0.0, 255.0)


def adjust_saturation(img, factor):
    return np.clip(factor * img + (1.0 - factor) * grayscale(img)[None], 0.0, 255.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3.0 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    radius = len(k) // 2
    out = img
    for axis in (1, 2):
        r = min(radius, out.shape[axis] - 1)
        kk = k[radius - r:radius + r + 1]
        kk = kk / kk.sum()
        pad = [(0, 0)] * 3
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="reflect")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for j, wgt in enumerate(kk):
            acc += wgt * np.take(padded, np.arange(j, j + n), axis=axis)
        out = acc
    return out


# ---------------------------------------------------------------------------
# pipelines


def augment_view(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One random view of a 0..255 ``[3,H,W]`` image, normalized, as float32 ``[3,P,P]``."""
    top, left, h, w = crop_box(img.shape[1], img.shape[2], cfg.crop_scale_range, rng)
    out = resize_bilinear(img[:, top:top + h, left:left + w], cfg.view_size)

    if rng.random() < cfg.flip_prob:
        out = out[:, :, ::-1]

    d = cfg.jitter_delta
    factors = rng.uniform(1.0 - d, 1.0 + d, size=3)
    for which in rng.permutation(3):
        adjust = (adjust_brightness, adjust_contrast, adjust_saturation)[which]
        out = adjust(out, factors[which])

    if rng.random() < cfg.grayscale_prob:
        out = np.repeat(grayscale(out)[None], 3, axis=0)

    apply_blur = rng.random() < cfg.blur_prob
    sigma = rng.uniform(*cfg.blur_sigma_range)
    if apply_blur:
        out = gaussian_blur(out, sigma)

    return normalize(out, cfg.normalize_mean, cfg.normalize_std).astype(np.float32)


def make_view_pair(patch: ImageRecord, cfg: AugmentConfig, rng: np.random.Generator) -> ViewPair:
    if patch.height < 8 or patch.width < 8:
        raise ValueError(f"{patch.id}: patch must be at least 8x8, got {patch.width}x{patch.height}")
    img = to_chw(patch)
    return ViewPair(Tensor(augment_view(img, cfg, rng)), Tensor(augment_view(img, cfg, rng)), patch.id)


def finetune_augment(image: np.ndarray, mask: np.ndarray, rng: np.random.Generator,
                     mean=IMAGENET_MEAN, std=IMAGENET_STD) -> tuple[np.ndarray, np.ndarray]:
    """Joint random horizontal/vertical flips of a 0..255 ``[3,H,W]`` image and its mask."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape[1:] != mask.shape:
        raise ValueError(f"image {image.shape[1:]} and mask {mask.shape} are not aligned")
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    if hflip:
        image, mask = image[:, :, ::-1], mask[:, ::-1]
    if vflip:
        image, mask = image[:, ::-1, :], mask[::-1, :]
    return normalize(image, mean, std).astype(np.float32), np.ascontiguousarray(mask)
