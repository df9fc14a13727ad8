"""Volume representation, intensity normalization and in-plane resampling."""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Sequence, Tuple

import numpy as np
from scipy.ndimage import map_coordinates

logger = logging.getLogger(__name__)

# Intensity windows, both mapped linearly onto [-1, 1]
HU_RANGE = (-1000.0, 1500.0)
DOSE_RANGE_GY = (0.0, 75.0)


class VolumeKind(str, Enum):
    CT_HU = "CT_HU"
    DOSE_GY = "DOSE_GY"
    MASK = "MASK"
    SDM_DM = "SDM_DM"
    NORMALIZED = "NORMALIZED"


@dataclass
class Volume:
    """Dense (i, j, k) scalar grid with per-axis physical spacing in millimeters."""
    values: np.ndarray
    spacing_mm: Tuple[float, float, float]
    kind: VolumeKind

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        self.kind = VolumeKind(self.kind)

        if self.values.ndim != 3:
            raise ValueError(f"Volume must be 3D, got shape {self.values.shape}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"Spacing must be three positive values, got {self.spacing_mm}")
        if self.kind == VolumeKind.MASK and not np.all(np.isin(self.values, (0, 1))):
            raise ValueError("MASK volumes may only contain 0 and 1")

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.values.shape

    def with_values(self, values: np.ndarray, kind: VolumeKind = None) -> "Volume":
        return replace(self, values=values, kind=kind or self.kind)


def _require_kind(volume: Volume, kind: VolumeKind, op: str) -> None:
    if volume.kind != kind:
        raise ValueError(f"{op} expects a {kind.value} volume, got {volume.kind.value}")


def _to_unit_range(values: np.ndarray, low: float, high: float) -> np.ndarray:
    clamped = np.clip(values.astype(np.float64), low, high)
    return 2.0 * (clamped - low) / (high - low) - 1.0


def _from_unit_range(values: np.ndarray, low: float, high: float) -> np.ndarray:
    return (np.asarray(values, dtype=np.float64) + 1.0) * 0.5 * (high - low) + low


def normalize_ct(volume: Volume) -> Volume:
    """Clamp to [-1000, 1500] HU and map linearly onto [-1, 1]."""
    _require_kind(volume, VolumeKind.CT_HU, "normalize_ct")
    return volume.with_values(_to_unit_range(volume.values, *HU_RANGE), VolumeKind.NORMALIZED)


def denormalize_ct(volume: Volume) -> Volume:
    _require_kind(volume, VolumeKind.NORMALIZED, "denormalize_ct")
    return volume.with_values(_from_unit_range(np.clip(volume.values, -1, 1), *HU_RANGE), VolumeKind.CT_HU)


def normalize_dose(volume: Volume) -> Volume:
    """Clamp to [0, 75] Gy and map linearly onto [-1, 1]."""
    _require_kind(volume, VolumeKind.DOSE_GY, "normalize_dose")
    if np.any(volume.values < 0):
        raise ValueError("normalize_dose requires non-negative doses")
    return volume.with_values(_to_unit_range(volume.values, *DOSE_RANGE_GY), VolumeKind.NORMALIZED)


def denormalize_dose(volume: Volume) -> Volume:
    _require_kind(volume, VolumeKind.NORMALIZED, "denormalize_dose")
    return volume.with_values(dose_from_unit(volume.values), VolumeKind.DOSE_GY)


def dose_to_unit(values: np.ndarray) -> np.ndarray:
    """Array form of normalize_dose for slice-level code."""
    return _to_unit_range(values, *DOSE_RANGE_GY)


def dose_from_unit(values: np.ndarray) -> np.ndarray:
    """Array form of denormalize_dose; inputs are clipped to [-1, 1] first."""
    return _from_unit_range(np.clip(values, -1.0, 1.0), *DOSE_RANGE_GY)


def ct_to_unit(values: np.ndarray) -> np.ndarray:
    return _to_unit_range(values, *HU_RANGE)


def resample_slices(values: np.ndarray, new_shape: Tuple[int, int], nearest: bool = False) -> np.ndarray:
    """
    Resample every (i, j) slice of a 3D array onto a new in-plane grid.

    Corner voxel centres are aligned, so a linear ramp is reproduced exactly.
    """
    old_i, old_j, depth = values.shape
    new_i, new_j = new_shape
    ci = np.linspace(0.0, old_i - 1, new_i)
    cj = np.linspace(0.0, old_j - 1, new_j)
    grid_i, grid_j = np.meshgrid(ci, cj, indexing="ij")
    coords = np.stack([grid_i, grid_j])

    order = 0 if nearest else 1
    out = np.empty((new_i, new_j, depth), dtype=np.float64)
    for k in range(depth):
        out[:, :, k] = map_coordinates(values[:, :, k].astype(np.float64), coords, order=order, mode="nearest")
    return out


def resample_bilinear(volume: Volume, new_in_plane_shape: Tuple[int, int]) -> Volume:
    """
    Resize a volume in-plane, rescaling spacing so the physical extent is preserved.

    Args:
        volume: Source volume
        new_in_plane_shape: Target (i, j) extents, each >= 2

    Returns:
        Resampled volume; masks use nearest-neighbour sampling
    """
    new_i, new_j = (int(n) for n in new_in_plane_shape)
    if new_i < 2 or new_j < 2:
        raise ValueError(f"Resample target must be at least 2x2, got {new_in_plane_shape}")
    old_i, old_j, _ = volume.shape
    if old_i < 2 or old_j < 2:
        raise ValueError(f"Cannot resample a degenerate {old_i}x{old_j} in-plane grid")

    if (new_i, new_j) == (old_i, old_j):
        return volume.with_values(volume.values.copy())

    is_mask = volume.kind == VolumeKind.MASK
    values = resample_slices(volume.values, (new_i, new_j), nearest=is_mask)
    if is_mask:
        values = (values > 0.5).astype(volume.values.dtype)

    si, sj, sk = volume.spacing_mm
    spacing = (si * (old_i - 1) / (new_i - 1), sj * (old_j - 1) / (new_j - 1), sk)
    logger.debug(f"Resampled {volume.kind.value} {volume.shape} -> {values.shape}, spacing {spacing}")
    return Volume(values, spacing, volume.kind)


def body_bounding_box(body: Volume, margin: int = 0) -> Tuple[slice, slice, slice]:
    """Minimal axis-aligned box holding every body voxel, grown by margin voxels."""
    _require_kind(body, VolumeKind.MASK, "body_bounding_box")
    occupied = np.argwhere(body.values > 0)
    if occupied.size == 0:
        raise ValueError("Body mask is empty; cannot crop")
    low = np.maximum(occupied.min(axis=0) - margin, 0)
    high = np.minimum(occupied.max(axis=0) + margin + 1, body.shape)
    return tuple(slice(int(lo), int(hi)) for lo, hi in zip(low, high))


def crop_to_body(volumes: Dict[str, Volume], body: Volume, margin: int = 0) -> Dict[str, Volume]:
    """Crop aligned volumes to the body mask's bounding box."""
    box = body_bounding_box(body, margin)
    cropped = {}
    for name, volume in volumes.items():
        if volume.shape != body.shape:
            raise ValueError(f"Volume {name} shape {volume.shape} does not match body {body.shape}")
        cropped[name] = volume.with_values(volume.values[box].copy())
    return cropped


def check_aligned(volumes: Sequence[Volume]) -> None:
    shapes = {v.shape for v in volumes}
    if len(shapes) > 1:
        raise ValueError(f"Volumes are not aligned: shapes {sorted(shapes)}")
