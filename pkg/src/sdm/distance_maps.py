"""Signed distance maps of ROI masks in image space and physical space."""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

from ..volume.volume import Volume, VolumeKind
from .edt import DEFAULT_AXIS_ORDER, edt_squared

logger = logging.getLogger(__name__)

# Distances are divided by 100: mm -> dm for PSDM, voxel steps -> shrunk ISDM
DISTANCE_SCALE = 100.0


class DistanceUnit(str, Enum):
    VOXELS = "voxels"
    DECIMETERS = "decimeters"
    MASK = "mask"


class ConditioningMode(str, Enum):
    MASK = "mask"
    ISDM = "isdm"
    PSDM = "psdm"


@dataclass
class SignedDistanceMap:
    values: np.ndarray
    unit: DistanceUnit
    source_roi: str

    def to_volume(self, spacing_mm) -> Volume:
        kind = VolumeKind.MASK if self.unit == DistanceUnit.MASK else VolumeKind.SDM_DM
        return Volume(self.values.astype(np.float32), spacing_mm, kind)


@dataclass
class SdmStack:
    """Per-ROI maps in a fixed channel order."""
    maps: List[SignedDistanceMap]

    def __len__(self) -> int:
        return len(self.maps)

    @property
    def roi_names(self) -> List[str]:
        return [m.source_roi for m in self.maps]

    def as_array(self) -> np.ndarray:
        """Stacked values of shape (C, i, j, k)."""
        return np.stack([m.values for m in self.maps])


def _mask_array(mask: Volume) -> np.ndarray:
    if mask.kind != VolumeKind.MASK:
        raise ValueError(f"Expected a MASK volume, got {mask.kind.value}")
    return mask.values > 0


def boundary_set(mask: Volume) -> Volume:
    """Foreground voxels with a 6-connected background neighbour or on the grid border."""
    inside = _mask_array(mask)
    padded = np.pad(inside, 1, constant_values=False)
    interior = inside.copy()
    for axis in range(3):
        for step in (-1, 1):
            interior &= np.roll(padded, step, axis=axis)[1:-1, 1:-1, 1:-1]
    boundary = inside & ~interior
    return mask.with_values(boundary.astype(mask.values.dtype))


def _signed_distance(mask: Volume, spacing_mm, axis_order) -> np.ndarray:
    inside = _mask_array(mask)
    if not inside.any():
        raise ValueError("Cannot build a signed distance map: ROI mask has no foreground")

    boundary = boundary_set(mask).values > 0
    distance = np.sqrt(edt_squared(boundary, spacing_mm, axis_order))
    signed = np.where(inside, distance, -distance)
    signed[boundary] = 0.0
    return signed / DISTANCE_SCALE


def psdm(mask: Volume, spacing_mm: Optional[Sequence[float]] = None,
         roi_name: str = "roi", axis_order=DEFAULT_AXIS_ORDER) -> SignedDistanceMap:
    """
    Physical-space signed distance map in decimeters.

    Positive strictly inside the ROI, zero on its boundary voxels, negative outside.
    """
    spacing = spacing_mm if spacing_mm is not None else mask.spacing_mm
    values = _signed_distance(mask, spacing, axis_order)
    return SignedDistanceMap(values, DistanceUnit.DECIMETERS, roi_name)


def isdm(mask: Volume, roi_name: str = "roi") -> SignedDistanceMap:
    """Image-space signed distance map in voxel steps, shrunk by 100."""
    values = _signed_distance(mask, (1.0, 1.0, 1.0), DEFAULT_AXIS_ORDER)
    return SignedDistanceMap(values, DistanceUnit.VOXELS, roi_name)


def build_stack(
    rois: Sequence[Volume],
    spacing_mm: Optional[Sequence[float]] = None,
    roi_names: Optional[Sequence[str]] = None,
    mode: ConditioningMode = ConditioningMode.PSDM
) -> SdmStack:
    """
    Build the per-ROI conditioning stack in the given ROI order.

    Args:
        rois: Ordered ROI masks sharing one grid
        spacing_mm: Physical spacing (defaults to the first ROI's)
        roi_names: Channel labels (defaults to roi_<n>)
        mode: psdm, isdm, or mask (raw masks, used for ablations)

    Returns:
        SdmStack with one channel per ROI
    """
    if not rois:
        raise ValueError("build_stack needs at least one ROI")
    shapes = {roi.shape for roi in rois}
    if len(shapes) != 1:
        raise ValueError(f"ROI shapes differ: {sorted(shapes)}")

    mode = ConditioningMode(mode)
    spacing = spacing_mm if spacing_mm is not None else rois[0].spacing_mm
    names = list(roi_names) if roi_names is not None else [f"roi_{n}" for n in range(len(rois))]
    if len(names) != len(rois):
        raise ValueError(f"{len(names)} ROI names given for {len(rois)} ROIs")

    maps = []
    for roi, name in zip(rois, names):
        if mode == ConditioningMode.PSDM:
            maps.append(psdm(roi, spacing, name))
        elif mode == ConditioningMode.ISDM:
            maps.append(isdm(roi, name))
        else:
            maps.append(SignedDistanceMap((_mask_array(roi)).astype(np.float64), DistanceUnit.MASK, name))
        logger.debug(f"{mode.value} channel {name}: range [{maps[-1].values.min():.3f}, {maps[-1].values.max():.3f}]")

    return SdmStack(maps)
