"""Single scale retinex enhancement.

The retinex response is ``log(I + eps) - log(F * I + eps)`` where ``F`` is a
unit-sum Gaussian surround ``exp(-(i^2 + j^2) / G^2)``.  The surround is
separable, so the 2-D convolution runs as two 1-D passes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imagecore import ImageBuffer


@dataclass(frozen=True, eq=False)
class GaussianSurround:
    scale: float
    radius: int
    weights: np.ndarray
    # 1-D factor; ``weights == outer(profile, profile)``.
    profile: np.ndarray


def default_scale(width: int, height: int) -> float:
    return max(width, height) / 4.0


def build_surround(G: float, radius: int | None = None) -> GaussianSurround:
    """Truncated surround kernel of half-width ``radius`` (default ``ceil(3G)``)."""
    if not G > 0 or not math.isfinite(G):
        raise ValueError(f"surround scale G must be positive, got {G}")
    min_radius = math.ceil(2 * G)
    if radius is None:
        radius = max(math.ceil(3 * G), 1)
    if radius < min_radius:
        raise ValueError(f"radius {radius} too small for G={G}; need at least {min_radius}")
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    profile = np.exp(-(offsets ** 2) / G ** 2)
    profile /= profile.sum()
    weights = np.outer(profile, profile)
    weights /= weights.sum()
    profile.setflags(write=False)
    weights.setflags(write=False)
    return GaussianSurround(float(G), int(radius), weights, profile)


def convolve_array(arr: np.ndarray, surround: GaussianSurround) -> np.ndarray:
    """Replicate-border convolution of a raw ``(H, W, C)`` array."""
    out = ndimage.correlate1d(arr, surround.profile, axis=0, mode="nearest")
    return ndimage.correlate1d(out, surround.profile, axis=1, mode="nearest")


def convolve(img: ImageBuffer, surround: GaussianSurround) -> ImageBuffer:
    return ImageBuffer.clamped(convolve_array(img.pixels, surround))


def ssr_response(arr: np.ndarray, surround: GaussianSurround, eps: float = 1 / 255) -> np.ndarray:
    """Raw retinex response of an unclamped non-negative array, per pixel and channel."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return np.log(arr + eps) - np.log(convolve_array(arr, surround) + eps)


def rescale_unit(resp: np.ndarray, flat_tol: float = 1e-9) -> np.ndarray:
    """Affine map of the whole array onto [0, 1]; a flat response maps to 0.5."""
    lo, hi = float(resp.min()), float(resp.max())
    if hi - lo <= flat_tol:
        return np.full_like(resp, 0.5)
    return (resp - lo) / (hi - lo)


def ssr_enhance(img: ImageBuffer, surround: GaussianSurround | None = None,
                eps: float = 1 / 255) -> ImageBuffer:
    if surround is None:
        surround = build_surround(default_scale(img.width, img.height))
    return ImageBuffer.clamped(rescale_unit(ssr_response(img.pixels, surround, eps)))
