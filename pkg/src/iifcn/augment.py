"""Three-stage stochastic augmentation of image/mask pairs.

Stage 1 applies photometric changes to the image only; stages 2 and 3 are
geometric and hit image and mask with identical parameters. Every
transform in a stage fires on its own Bernoulli draw.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError, ShapeError
from .imaging import resize_bilinear, resize_nearest, rgb_to_ycbcr, to_uint8, ycbcr_to_rgb

PHOTOMETRIC = ("contrast", "color", "blur", "hist_eq")
GEOMETRIC = ("flip_lr", "flip_ud", "rotate")


@dataclass(frozen=True)
class SamplePair:
    image: np.ndarray  # H×W×3 uint8
    mask: np.ndarray  # H×W uint8, values {0, 255}
    id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ShapeError(f"image must be H×W×3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise ShapeError(f"mask {self.mask.shape} does not match image {self.image.shape[:2]}")


@dataclass(frozen=True)
class AugmentConfig:
    p_photometric: float = 0.2
    p_geometric: float = 0.2
    p_zoom: float = 0.5
    contrast_range: tuple[float, float] = (0.7, 1.3)
    saturation_range: tuple[float, float] = (0.7, 1.3)
    blur_sigma_range: tuple[float, float] = (0.5, 1.5)
    rotation_range: tuple[float, float] = (0.0, 360.0)
    zoom_range: tuple[float, float] = (0.6, 1.0)
    # rotation fill value for the image; the mask is always filled with background
    rotation_fill: int = 0

    def __post_init__(self):
        for name in ("p_photometric", "p_geometric", "p_zoom"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvalidArgumentError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.zoom_range
        if not 0.0 < lo <= hi <= 1.0:
            raise InvalidArgumentError(f"zoom_range must satisfy 0 < lo <= hi <= 1, got {self.zoom_range}")


def sample_rng(seed: int, sample_index: int, epoch: int) -> np.random.Generator:
    """Independent stream per (seed, sample, epoch), so worker order never matters."""
    return np.random.default_rng(np.random.SeedSequence([seed, sample_index, epoch]))


# photometric --------------------------------------------------------------

def adjust_contrast(image: np.ndarray, factor: float) -> np.ndarray:
    a = image.astype(np.float64)
    mean = a.mean(axis=(0, 1), keepdims=True)
    return to_uint8(mean + factor * (a - mean))


def adjust_saturation(image: np.ndarray, factor: float) -> np.ndarray:
    """Scale chroma in YCbCr; luma and hue angle are untouched."""
    ycc = rgb_to_ycbcr(image)
    ycc[..., 1:] *= factor
    return to_uint8(ycbcr_to_rgb(ycc))


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    a = ndimage.gaussian_filter(image.astype(np.float64), sigma=(sigma, sigma, 0), truncate=3.0, mode="reflect")
    return to_uint8(a)


def equalize_luminance(image: np.ndarray) -> np.ndarray:
    """Histogram-equalize the Y channel and keep Cb, Cr."""
    ycc = rgb_to_ycbcr(image)
    y = np.clip(np.rint(ycc[..., 0]), 0, 255).astype(np.int64)
    hist = np.bincount(y.ravel(), minlength=256)
    cdf = np.cumsum(hist)
    cdf_min = cdf[hist > 0][0]
    if cdf[-1] == cdf_min:
        return image.copy()
    lut = np.rint((cdf - cdf_min) / (cdf[-1] - cdf_min) * 255.0)
    ycc[..., 0] = lut[y]
    return to_uint8(ycbcr_to_rgb(ycc))


def photometric(image: np.ndarray, kind: str, rng: np.random.Generator,
                config: AugmentConfig = AugmentConfig()) -> np.ndarray:
    if kind == "contrast":
        return adjust_contrast(image, rng.uniform(*config.contrast_range))
    if kind == "color":
        return adjust_saturation(image, rng.uniform(*config.saturation_range))
    if kind == "blur":
        return gaussian_blur(image, rng.uniform(*config.blur_sigma_range))
    if kind == "hist_eq":
        return equalize_luminance(image)
    raise InvalidArgumentError(f"unknown photometric transform {kind!r}")


# geometric -----------------------------------------------------------------

def flip_lr(pair: SamplePair) -> SamplePair:
    return replace(pair, image=pair.image[:, ::-1].copy(), mask=pair.mask[:, ::-1].copy())


def flip_ud(pair: SamplePair) -> SamplePair:
    return replace(pair, image=pair.image[::-1].copy(), mask=pair.mask[::-1].copy())


def _binarize(mask: np.ndarray) -> np.ndarray:
    return np.where(mask >= 128, 255, 0).astype(np.uint8)


def rotate(pair: SamplePair, degrees: float, fill: int = 0) -> SamplePair:
    """Rotate about the image centre, keeping the canvas size."""
    img = ndimage.rotate(pair.image.astype(np.float64), degrees, axes=(1, 0), reshape=False,
                         order=1, mode="constant", cval=float(fill))
    mask = ndimage.rotate(pair.mask, degrees, axes=(1, 0), reshape=False, order=0,
                          mode="constant", cval=0)
    return replace(pair, image=to_uint8(img), mask=_binarize(mask))


def zoom(pair: SamplePair, rect: tuple[int, int, int, int]) -> SamplePair:
    """Crop ``rect = (top, left, height, width)`` and rescale to the original size."""
    top, left, h, w = rect
    H, W = pair.mask.shape
    if top < 0 or left < 0 or h < 1 or w < 1 or top + h > H or left + w > W:
        raise InvalidArgumentError(f"zoom rectangle {rect} lies outside the {H}×{W} canvas")
    img = resize_bilinear(pair.image[top:top + h, left:left + w], H, W)
    mask = resize_nearest(pair.mask[top:top + h, left:left + w], H, W)
    return replace(pair, image=to_uint8(img), mask=_binarize(mask))


def random_zoom_rect(shape: tuple[int, int], rng: np.random.Generator,
                     config: AugmentConfig = AugmentConfig()) -> tuple[int, int, int, int]:
    H, W = shape
    fh, fw = rng.uniform(*config.zoom_range, size=2)
    h = min(H, max(1, int(round(fh * H))))
    w = min(W, max(1, int(round(fw * W))))
    top = int(rng.integers(0, H - h + 1))
    left = int(rng.integers(0, W - w + 1))
    return top, left, h, w


def geometric(pair: SamplePair, kind: str, rng: np.random.Generator | None = None,
              config: AugmentConfig = AugmentConfig(), value=None) -> SamplePair:
    """Apply one geometric transform. ``value`` fixes the angle or rectangle."""
    if kind == "flip_lr":
        return flip_lr(pair)
    if kind == "flip_ud":
        return flip_ud(pair)
    if kind == "rotate":
        theta = value if value is not None else rng.uniform(*config.rotation_range)
        return rotate(pair, theta, config.rotation_fill)
    if kind == "zoom":
        rect = value if value is not None else random_zoom_rect(pair.mask.shape, rng, config)
        return zoom(pair, rect)
    raise InvalidArgumentError(f"unknown geometric transform {kind!r}")


# pipeline ------------------------------------------------------------------

def augment_with_log(sample: SamplePair, config: AugmentConfig,
                     rng: np.random.Generator) -> tuple[SamplePair, list[str]]:
    """Run all three stages; also return the names of transforms that fired."""
    fired = []
    out = sample
    image = sample.image
    for kind in PHOTOMETRIC:
        if rng.random() < config.p_photometric:
            image = photometric(image, kind, rng, config)
            fired.append(kind)
    if fired:
        out = replace(out, image=image)
    for kind in GEOMETRIC:
        if rng.random() < config.p_geometric:
            out = geometric(out, kind, rng, config)
            fired.append(kind)
    if rng.random() < config.p_zoom:
        out = geometric(out, "zoom", rng, config)
        fired.append("zoom")
    return out, fired


def augment(sample: SamplePair, config: AugmentConfig, rng: np.random.Generator) -> SamplePair:
    return augment_with_log(sample, config, rng)[0]
