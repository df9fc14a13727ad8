"""Procedural CT/ROI/dose phantoms standing in for clinical treatment plans."""

import logging
from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple, Tuple

import numpy as np
from scipy.special import erf

from .volume import Volume, VolumeKind

logger = logging.getLogger(__name__)

DEFAULT_SHAPE = (64, 64, 16)
DEFAULT_SPACING_MM = (3.0, 3.0, 5.0)
DEFAULT_ATTENUATION_PER_MM = 0.005
DEFAULT_PENUMBRA_SIGMA_MM = 8.0
MAX_PRESCRIPTION_GY = 75.0

AIR_HU = -1000.0
TISSUE_HU = 40.0
TARGET_HU = 55.0
OAR_HU_CYCLE = (-700.0, 65.0, 450.0)
TISSUE_NOISE_HU = 12.0

MAX_PLACEMENT_TRIES = 200

TARGET_ROI_NAME = "target"


@dataclass
class PhantomSpec:
    """Geometry, anatomy and beam arrangement of one synthetic case."""
    seed: int
    shape: Tuple[int, int, int] = DEFAULT_SHAPE
    spacing_mm: Tuple[float, float, float] = DEFAULT_SPACING_MM
    body_center_mm: Tuple[float, float, float] = (94.5, 94.5, 37.5)
    body_semi_axes_mm: Tuple[float, float, float] = (85.0, 68.0, 70.0)
    target_center_mm: Tuple[float, float, float] = (94.5, 94.5, 37.5)
    target_radius_mm: float = 18.0
    prescribed_dose_gy: float = 60.0
    oar_count: int = 2
    oar_semi_axes_range_mm: Tuple[float, float] = (12.0, 26.0)
    beam_angles_deg: Tuple[float, ...] = (0.0, 72.0, 144.0, 216.0, 288.0)
    beam_width_mm: float = 36.0
    penumbra_sigma_mm: float = DEFAULT_PENUMBRA_SIGMA_MM
    attenuation_per_mm: float = DEFAULT_ATTENUATION_PER_MM

    def validate(self) -> None:
        if not 0.0 < self.prescribed_dose_gy <= MAX_PRESCRIPTION_GY:
            raise ValueError(f"prescribed_dose_gy must lie in (0, 75], got {self.prescribed_dose_gy}")
        if len(self.beam_angles_deg) < 2:
            raise ValueError(f"At least 2 beams are required, got {len(self.beam_angles_deg)}")
        if min(self.spacing_mm) <= 0 or min(self.shape) < 1:
            raise ValueError(f"Invalid grid: shape {self.shape}, spacing {self.spacing_mm}")
        if self.target_radius_mm <= 0 or self.beam_width_mm <= 0:
            raise ValueError("Target radius and beam width must be positive")

        # Sphere inside ellipsoid: scaled centre offset plus radius over the smallest semi-axis
        axes = np.asarray(self.body_semi_axes_mm)
        offset = (np.asarray(self.target_center_mm) - np.asarray(self.body_center_mm)) / axes
        if np.linalg.norm(offset) + self.target_radius_mm / axes.min() >= 1.0:
            raise ValueError(
                f"Target (centre {self.target_center_mm}, radius {self.target_radius_mm} mm) "
                f"is not strictly inside the body"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomSpec":
        data = dict(data)
        for key in ("shape", "spacing_mm", "body_center_mm", "body_semi_axes_mm",
                    "target_center_mm", "oar_semi_axes_range_mm", "beam_angles_deg"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


class Phantom(NamedTuple):
    ct: Volume
    rois: List[Volume]
    dose: Volume
    body: Volume
    roi_names: List[str]


def voxel_coordinates_mm(shape, spacing_mm) -> np.ndarray:
    """Physical voxel-centre coordinates, shape (3, i, j, k)."""
    axes = [np.arange(n) * s for n, s in zip(shape, spacing_mm)]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def _ellipsoid_mask(coords: np.ndarray, center, semi_axes) -> np.ndarray:
    scaled = (coords - np.reshape(center, (3, 1, 1, 1))) / np.reshape(semi_axes, (3, 1, 1, 1))
    return np.sum(scaled * scaled, axis=0) <= 1.0


def depth_in_body(coords: np.ndarray, direction: np.ndarray, center, semi_axes) -> np.ndarray:
    """
    Path length inside the body ellipsoid from the beam entry point to each voxel.

    The beam travels along +direction; voxels outside the body get depth 0.
    """
    a = np.reshape(semi_axes, (3, 1, 1, 1))
    rel = coords - np.reshape(center, (3, 1, 1, 1))
    d = np.reshape(direction, (3, 1, 1, 1))

    qa = np.sum((d / a) ** 2, axis=0)
    qb = 2.0 * np.sum(rel * d / a ** 2, axis=0)
    qc = np.sum((rel / a) ** 2, axis=0) - 1.0
    disc = np.maximum(qb * qb - 4.0 * qa * qc, 0.0)
    entry = (-qb - np.sqrt(disc)) / (2.0 * qa)
    return np.where(qc <= 0.0, -entry, 0.0)


def beam_fluence(coords: np.ndarray, spec: PhantomSpec, angle_deg: float) -> np.ndarray:
    """Single-beam contribution: exponential depth attenuation times a Gaussian-edged lateral profile."""
    theta = np.deg2rad(angle_deg)
    direction = np.array([np.cos(theta), np.sin(theta), 0.0])

    rel = coords - np.reshape(spec.target_center_mm, (3, 1, 1, 1))
    along = np.tensordot(direction, rel, axes=1)
    lateral = np.sqrt(np.maximum(np.sum(rel * rel, axis=0) - along * along, 0.0))

    half = 0.5 * spec.beam_width_mm
    scale = np.sqrt(2.0) * spec.penumbra_sigma_mm
    profile = 0.5 * (erf((half - lateral) / scale) + erf((half + lateral) / scale))

    depth = depth_in_body(coords, direction, spec.body_center_mm, spec.body_semi_axes_mm)
    return np.exp(-spec.attenuation_per_mm * depth) * profile


def _place_oars(coords, body, target, spec, rng) -> List[np.ndarray]:
    oars = []
    inner_axes = 0.7 * np.asarray(spec.body_semi_axes_mm)
    low, high = spec.oar_semi_axes_range_mm
    target_center_index = tuple(
        int(np.clip(round(c / s), 0, n - 1)) for c, s, n in zip(spec.target_center_mm, spec.spacing_mm, spec.shape)
    )

    for n in range(spec.oar_count):
        for _ in range(MAX_PLACEMENT_TRIES):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            radius = rng.uniform(0.0, 1.0) ** (1.0 / 3.0)
            center = np.asarray(spec.body_center_mm) + direction * radius * inner_axes
            semi_axes = rng.uniform(low, high, size=3)
            mask = _ellipsoid_mask(coords, center, semi_axes) & body
            if mask.any() and not mask[target_center_index] and (mask & target).sum() < 0.5 * target.sum():
                oars.append(mask)
                break
        else:
            raise RuntimeError(f"Could not place OAR {n + 1} for phantom seed {spec.seed}")
    return oars


def phantom_generate(spec: PhantomSpec) -> Phantom:
    """
    Generate a CT volume, ROI masks, a beam-superposition dose and a body mask.

    Args:
        spec: Phantom specification; output is a deterministic function of it

    Returns:
        Phantom with ROI order [target, oar_1, ..., oar_n]
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    coords = voxel_coordinates_mm(spec.shape, spec.spacing_mm)

    body = _ellipsoid_mask(coords, spec.body_center_mm, spec.body_semi_axes_mm)
    rel = coords - np.reshape(spec.target_center_mm, (3, 1, 1, 1))
    target = (np.sum(rel * rel, axis=0) <= spec.target_radius_mm ** 2) & body
    if not target.any():
        raise ValueError(f"Target of phantom seed {spec.seed} covers no voxel of the grid")

    oars = _place_oars(coords, body, target, spec, rng)

    ct = np.full(spec.shape, AIR_HU)
    ct[body] = TISSUE_HU + rng.normal(0.0, TISSUE_NOISE_HU, size=int(body.sum()))
    for n, oar in enumerate(oars):
        ct[oar] = OAR_HU_CYCLE[n % len(OAR_HU_CYCLE)] + rng.normal(0.0, TISSUE_NOISE_HU, size=int(oar.sum()))
    ct[target] = TARGET_HU + rng.normal(0.0, TISSUE_NOISE_HU, size=int(target.sum()))

    dose = np.zeros(spec.shape)
    for angle in spec.beam_angles_deg:
        dose += beam_fluence(coords, spec, angle)
    dose *= body
    dose *= spec.prescribed_dose_gy / dose[target].mean()

    spacing = tuple(spec.spacing_mm)
    rois = [Volume(m.astype(np.float32), spacing, VolumeKind.MASK) for m in [target] + oars]
    names = [TARGET_ROI_NAME] + [f"oar_{n + 1}" for n in range(len(oars))]

    logger.debug(
        f"Phantom seed {spec.seed}: {len(spec.beam_angles_deg)} beams, "
        f"target {int(target.sum())} voxels, max dose {dose.max():.2f} Gy"
    )
    return Phantom(
        ct=Volume(ct, spacing, VolumeKind.CT_HU),
        rois=rois,
        dose=Volume(dose, spacing, VolumeKind.DOSE_GY),
        body=Volume(body.astype(np.float32), spacing, VolumeKind.MASK),
        roi_names=names,
    )


def random_phantom_spec(seed: int, base: PhantomSpec = None) -> PhantomSpec:
    """
    Draw a phantom spec around a base geometry.

    Target centre, radius, prescription and the gantry offset vary with the seed; the OAR count
    stays at the base value so every case carries the same ROI channels;
    beams are evenly spread over 360 degrees with an odd count so no two are parallel-opposed.
    """
    base = base or PhantomSpec(seed=seed)
    rng = np.random.default_rng([seed, 7919])

    axes = np.asarray(base.body_semi_axes_mm)
    radius = float(rng.uniform(0.18, 0.35) * axes.min())
    offset = rng.uniform(-0.3, 0.3, size=3) * axes
    offset[2] = rng.uniform(-0.1, 0.1) * axes[2]
    center = np.asarray(base.body_center_mm) + offset

    beam_count = int(rng.choice([5, 7, 9]))
    gantry_offset = float(rng.uniform(0.0, 360.0 / beam_count))
    angles = tuple(float((gantry_offset + n * 360.0 / beam_count) % 360.0) for n in range(beam_count))

    spec = PhantomSpec(
        seed=seed,
        shape=base.shape,
        spacing_mm=base.spacing_mm,
        body_center_mm=base.body_center_mm,
        body_semi_axes_mm=base.body_semi_axes_mm,
        target_center_mm=tuple(float(c) for c in center),
        target_radius_mm=radius,
        prescribed_dose_gy=float(rng.uniform(44.0, 62.0)),
        oar_count=base.oar_count,
        oar_semi_axes_range_mm=base.oar_semi_axes_range_mm,
        beam_angles_deg=angles,
        beam_width_mm=2.0 * radius,
        penumbra_sigma_mm=base.penumbra_sigma_mm,
        attenuation_per_mm=base.attenuation_per_mm,
    )
    spec.validate()
    return spec
