"""Online slice augmentation: random flip, 90-degree rotation and zoom."""

import logging
from typing import Tuple

import numpy as np
from scipy.ndimage import map_coordinates

from ..sdm.distance_maps import ConditioningMode
from .config import TrainingConfig

logger = logging.getLogger(__name__)


def zoom_plane(plane: np.ndarray, factor: float, order: int = 1) -> np.ndarray:
    """
    Zoom a 2D plane about its centre while keeping its shape.

    Args:
        plane: (H, W) array
        factor: > 1 magnifies, < 1 shrinks
        order: 1 for bilinear, 0 for nearest (masks)

    Returns:
        Zoomed (H, W) array; samples past the border repeat the edge
    """
    h, w = plane.shape
    ci, cj = (h - 1) / 2.0, (w - 1) / 2.0
    grid_i, grid_j = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    coords = np.stack([ci + (grid_i - ci) / factor, cj + (grid_j - cj) / factor])
    return map_coordinates(plane, coords, order=order, mode="nearest")


class SliceAugmenter:
    """
    Applies each enabled transform with independent probability to (dose, ct, sdm) slices.

    Distance-map channels are multiplied by the zoom factor so distances stay consistent
    with the magnified anatomy. Mask channels are zoomed nearest-neighbour and stay binary.
    """

    def __init__(self, config: TrainingConfig, conditioning: str = ConditioningMode.PSDM.value):
        self.masks = ConditioningMode(conditioning) == ConditioningMode.MASK
        self.flip = config.augment_flip
        self.rotate = config.augment_rotate
        self.zoom = config.augment_zoom
        self.prob = config.augment_prob
        self.zoom_range = config.zoom_range
        if not 0.0 <= self.prob <= 1.0:
            raise ValueError(f"augment_prob must lie in [0, 1], got {self.prob}")
        if not 0.0 < self.zoom_range[0] <= self.zoom_range[1]:
            raise ValueError(f"Invalid zoom range {self.zoom_range}")

    @property
    def enabled(self) -> bool:
        return self.flip or self.rotate or self.zoom

    def __call__(
        self,
        dose: np.ndarray,
        ct: np.ndarray,
        sdm: np.ndarray,
        rng: np.random.Generator
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        # Every call consumes the same four draws whatever is enabled
        draws = rng.uniform(size=3)
        factor = rng.uniform(*self.zoom_range)

        if self.flip and draws[0] < self.prob:
            dose, ct, sdm = dose[:, ::-1], ct[:, ::-1], sdm[:, :, ::-1]

        if self.rotate and draws[1] < self.prob:
            turns = 1 if dose.shape[0] == dose.shape[1] else 2
            dose = np.rot90(dose, turns)
            ct = np.rot90(ct, turns)
            sdm = np.rot90(sdm, turns, axes=(1, 2))

        if self.zoom and draws[2] < self.prob:
            dose = zoom_plane(np.ascontiguousarray(dose), factor)
            ct = zoom_plane(np.ascontiguousarray(ct), factor)
            if self.masks:
                sdm = np.stack([zoom_plane(np.ascontiguousarray(c), factor, order=0) for c in sdm])
            else:
                sdm = np.stack([zoom_plane(np.ascontiguousarray(c), factor) * factor for c in sdm])

        return np.ascontiguousarray(dose), np.ascontiguousarray(ct), np.ascontiguousarray(sdm)
