"""Image-similarity metrics evaluated over the body mask."""

import logging
from typing import Union

import numpy as np
from scipy.ndimage import correlate1d

from ..volume.volume import Volume

logger = logging.getLogger(__name__)

C_RANGE = 3000.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5

ArrayOrVolume = Union[np.ndarray, Volume]


def as_array(x: ArrayOrVolume) -> np.ndarray:
    return np.asarray(x.values if isinstance(x, Volume) else x, dtype=np.float64)


def _masked_pair(u: ArrayOrVolume, v: ArrayOrVolume, body: ArrayOrVolume):
    u, v, mask = as_array(u), as_array(v), as_array(body) > 0
    if u.shape != v.shape or u.shape != mask.shape:
        raise ValueError(f"Metric inputs are not aligned: {u.shape}, {v.shape}, body {mask.shape}")
    if not mask.any():
        raise ValueError("Body mask is empty")
    return u, v, mask


def mae_masked(u: ArrayOrVolume, v: ArrayOrVolume, body: ArrayOrVolume) -> float:
    """Mean absolute difference over body voxels."""
    u, v, mask = _masked_pair(u, v, body)
    return float(np.mean(np.abs(u[mask] - v[mask])))


def psnr_masked(u: ArrayOrVolume, v: ArrayOrVolume, body: ArrayOrVolume, c_range: float = C_RANGE) -> float:
    """10 log10(c_range^2 / MSE) over body voxels; +inf when the volumes agree on the mask."""
    u, v, mask = _masked_pair(u, v, body)
    diff = u[mask] - v[mask]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(c_range * c_range / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-x * x / (2.0 * sigma * sigma))
    return w / w.sum()


def _local_mean(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    # In-plane axes only: statistics stay within each slice
    return correlate1d(correlate1d(x, window, axis=0, mode="reflect"), window, axis=1, mode="reflect")


def ssim_map(u: np.ndarray, v: np.ndarray, c_range: float = C_RANGE, window: np.ndarray = None) -> np.ndarray:
    """
    Per-slice local SSIM of two (i, j, k) arrays.

    Args:
        u: First volume
        v: Second volume
        c_range: Dynamic range constant L in c1 = (k1 L)^2, c2 = (k2 L)^2
        window: 1D separable weights (11-tap Gaussian, sigma 1.5 by default)

    Returns:
        SSIM value per voxel
    """
    window = gaussian_window() if window is None else window
    c1 = (SSIM_K1 * c_range) ** 2
    c2 = (SSIM_K2 * c_range) ** 2

    mu_u = _local_mean(u, window)
    mu_v = _local_mean(v, window)
    var_u = _local_mean(u * u, window) - mu_u * mu_u
    var_v = _local_mean(v * v, window) - mu_v * mu_v
    cov = _local_mean(u * v, window) - mu_u * mu_v

    luminance = (2.0 * mu_u * mu_v + c1) / (mu_u * mu_u + mu_v * mu_v + c1)
    structure = (2.0 * cov + c2) / (var_u + var_v + c2)
    return luminance * structure


def ssim_masked(u: ArrayOrVolume, v: ArrayOrVolume, body: ArrayOrVolume, c_range: float = C_RANGE) -> float:
    """Local SSIM computed on full slices, averaged over body voxels."""
    u, v, mask = _masked_pair(u, v, body)
    return float(np.mean(ssim_map(u, v, c_range)[mask]))
