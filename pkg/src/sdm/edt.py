"""Exact anisotropic squared Euclidean distance transform via separable lower envelopes."""

import logging
from typing import Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_AXIS_ORDER = (0, 1, 2)


def lower_envelope_1d(f: np.ndarray, weight: float) -> np.ndarray:
    """
    Squared-distance transform of one sampled function.

    Computes d(p) = min_q weight * (p - q)^2 + f(q) with the lower envelope of parabolas
    rooted at the finite samples of f.

    Args:
        f: Sampled function; +inf marks samples that root no parabola
        weight: Squared spacing of the axis

    Returns:
        Transformed samples; all +inf when f has no finite sample
    """
    n = len(f)
    out = np.full(n, np.inf)
    roots = np.flatnonzero(np.isfinite(f))
    if roots.size == 0:
        return out

    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    k = 0
    v[0] = roots[0]
    z[0] = -np.inf
    z[1] = np.inf

    for q in roots[1:]:
        fq = f[q] + weight * q * q
        while True:
            p = v[k]
            s = (fq - (f[p] + weight * p * p)) / (2.0 * weight * (q - p))
            if s <= z[k]:
                k -= 1
                continue
            break
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf

    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        out[q] = weight * (q - p) * (q - p) + f[p]
    return out


def _transform_axis(values: np.ndarray, axis: int, weight: float) -> np.ndarray:
    moved = np.moveaxis(values, axis, -1)
    lines = moved.reshape(-1, moved.shape[-1])
    result = np.empty_like(lines)
    for row in range(lines.shape[0]):
        result[row] = lower_envelope_1d(lines[row], weight)
    return np.moveaxis(result.reshape(moved.shape), -1, axis)


def edt_squared(
    mask: np.ndarray,
    spacing_mm: Sequence[float],
    axis_order: Tuple[int, int, int] = DEFAULT_AXIS_ORDER
) -> np.ndarray:
    """
    Squared physical distance from every voxel to the nearest foreground voxel.

    Args:
        mask: 3D array, nonzero marks foreground
        spacing_mm: Per-axis voxel spacing in millimeters
        axis_order: Order of the three 1D passes

    Returns:
        float64 array of squared distances in mm^2
    """
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValueError(f"edt_squared expects a 3D mask, got shape {mask.shape}")
    if sorted(axis_order) != [0, 1, 2]:
        raise ValueError(f"axis_order must permute (0, 1, 2), got {axis_order}")
    if not mask.any():
        raise ValueError("EDT input has no foreground voxel")

    values = np.where(mask != 0, 0.0, np.inf)
    for axis in axis_order:
        values = _transform_axis(values, axis, float(spacing_mm[axis]) ** 2)
    return values


def edt_squared_anisotropic(mask, spacing_mm: Sequence[float] = None, axis_order=DEFAULT_AXIS_ORDER) -> np.ndarray:
    """EDT of a MASK volume; spacing defaults to the volume's own."""
    spacing = spacing_mm if spacing_mm is not None else mask.spacing_mm
    return edt_squared(mask.values, spacing, axis_order)
