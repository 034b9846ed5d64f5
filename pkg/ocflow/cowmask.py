"""
Cow-mask occlusion patterns: Gaussian-smoothed noise thresholded at the quantile that
gives the requested occluded fraction. Masks use 1 = visible, 0 = occluded.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ocflow.flow import OcclusionMask


@dataclass(frozen=True)
class CowmaskParams:
    """Sigma is drawn log-uniformly from its range, the occluded proportion uniformly from its range."""

    sigma_min: float = 4.0
    sigma_max: float = 16.0
    proportion_min: float = 0.2
    proportion_max: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.sigma_min <= self.sigma_max:
            raise ValueError(f"sigma range must satisfy 0 < min <= max, got ({self.sigma_min}, {self.sigma_max})")
        if not 0 < self.proportion_min <= self.proportion_max < 1:
            raise ValueError(
                f"proportion range must lie inside (0, 1), got ({self.proportion_min}, {self.proportion_max})"
            )

    @classmethod
    def fixed(cls, sigma: float, proportion: float, seed: int = 0) -> "CowmaskParams":
        return cls(sigma, sigma, proportion, proportion, seed)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def sample_sigma(self, rng: np.random.Generator) -> float:
        if self.sigma_min == self.sigma_max:
            return self.sigma_min
        return float(math.exp(rng.uniform(math.log(self.sigma_min), math.log(self.sigma_max))))

    def sample_proportion(self, rng: np.random.Generator) -> float:
        if self.proportion_min == self.proportion_max:
            return self.proportion_min
        return float(rng.uniform(self.proportion_min, self.proportion_max))


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian with radius ceil(3 sigma)."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_noise(noise: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian smoothing with reflective borders."""
    kernel = gaussian_kernel(sigma)
    out = ndimage.correlate1d(noise, kernel, axis=0, mode="reflect")
    return ndimage.correlate1d(out, kernel, axis=1, mode="reflect")


def generate_mask(width: int, height: int, params: CowmaskParams, rng: np.random.Generator | None = None) -> OcclusionMask:
    """Binary cow-mask; exactly round(p * w * h) pixels (at least one) are occluded."""
    if width < 8 or height < 8:
        raise ValueError(f"cow-masks need an extent of at least 8x8, got {width}x{height}")
    rng = params.rng() if rng is None else rng
    sigma = params.sample_sigma(rng)
    proportion = params.sample_proportion(rng)
    noise = rng.standard_normal((height, width))
    smooth = smooth_noise(noise, sigma)
    n_occluded = max(1, int(round(proportion * width * height)))
    order = np.argsort(smooth, axis=None, kind="stable")
    values = np.ones(width * height, dtype=np.float32)
    values[order[:n_occluded]] = 0.0
    return OcclusionMask(values.reshape(height, width))


def apply_occlusion(img: np.ndarray, mask: OcclusionMask) -> np.ndarray:
    """I_occ(p) = I(p) * mask(p); occluded pixels turn black."""
    img = np.asarray(img)
    if img.shape[:2] != mask.values.shape:
        raise ValueError(f"image extent {img.shape[:2]} != mask extent {mask.values.shape}")
    m = mask.values if img.ndim == 2 else mask.values[..., None]
    return (img * m).astype(img.dtype)
