"""Dose-volume histograms, D_V / V_D metrics and the dose and volume scores."""

import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .image_metrics import ArrayOrVolume, as_array, mae_masked, psnr_masked, ssim_masked

logger = logging.getLogger(__name__)

DVH_BIN_GY = 0.1
ORDER_STATISTIC_SLACK = 1e-9
OAR_THRESHOLD_GY = 30.0

_SPEC_PATTERN = re.compile(r"^(D|V)(\d+(?:\.\d+)?|min|mean|max)$", re.IGNORECASE)


class MetricKind(str, Enum):
    D_V = "D_V"
    D_MIN = "D_min"
    D_MEAN = "D_mean"
    D_MAX = "D_max"
    V_TARGET = "V_target"
    V_OAR = "V_oar"


@dataclass(frozen=True)
class RoiMetricSpec:
    """
    One dosimetric quantity for one ROI.

    value holds V (percent of volume) for D_V, D (percent of prescription) for V_target
    and the Gy threshold for V_oar.
    """
    roi: str
    kind: MetricKind
    value: Optional[float] = None
    prescription_gy: Optional[float] = None

    def __post_init__(self):
        if self.kind in (MetricKind.D_V, MetricKind.V_TARGET, MetricKind.V_OAR) and self.value is None:
            raise ValueError(f"{self.kind.value} on {self.roi} needs a numeric level")
        if self.kind == MetricKind.V_TARGET and self.prescription_gy is None:
            raise ValueError(f"V_target on {self.roi} needs a prescription")

    @property
    def is_volume_metric(self) -> bool:
        return self.kind in (MetricKind.V_TARGET, MetricKind.V_OAR)

    @property
    def label(self) -> str:
        if self.kind == MetricKind.D_V:
            return f"{self.roi}:D{self.value:g}"
        if self.is_volume_metric:
            return f"{self.roi}:V{self.value:g}"
        return f"{self.roi}:{self.kind.value.replace('_', '')}"

    @classmethod
    def parse(cls, text: str, roi: str, is_target: bool, prescription_gy: Optional[float] = None) -> "RoiMetricSpec":
        """
        Parse compact names such as "D95", "Dmean", "V95" or "V30".

        V on a target is a percent of the prescription; V on an OAR is a Gy threshold.
        """
        match = _SPEC_PATTERN.match(text.strip())
        if not match:
            raise ValueError(f"Unrecognized metric {text!r}")
        letter, level = match.group(1).upper(), match.group(2).lower()

        if letter == "D":
            named = {"min": MetricKind.D_MIN, "mean": MetricKind.D_MEAN, "max": MetricKind.D_MAX}
            if level in named:
                return cls(roi, named[level])
            return cls(roi, MetricKind.D_V, float(level))

        if level in ("min", "mean", "max"):
            raise ValueError(f"Unrecognized metric {text!r}")
        if is_target:
            return cls(roi, MetricKind.V_TARGET, float(level), prescription_gy)
        return cls(roi, MetricKind.V_OAR, float(level))


def default_specs(roi_names: Sequence[str], prescription_gy: float) -> List[RoiMetricSpec]:
    """
    Clinical presets: targets get D95 and V95, the first OAR is treated as serial (Dmax),
    the remaining OARs as parallel (Dmean and V30).
    """
    specs = []
    oar_seen = 0
    for name in roi_names:
        if name.startswith("target"):
            specs.append(RoiMetricSpec.parse("D95", name, True, prescription_gy))
            specs.append(RoiMetricSpec.parse("V95", name, True, prescription_gy))
        else:
            oar_seen += 1
            if oar_seen == 1:
                specs.append(RoiMetricSpec.parse("Dmax", name, False))
            else:
                specs.append(RoiMetricSpec.parse("Dmean", name, False))
                specs.append(RoiMetricSpec.parse(f"V{OAR_THRESHOLD_GY:g}", name, False))
    return specs


@dataclass
class DvhCurve:
    dose_axis: np.ndarray
    volume_fraction: np.ndarray

    def to_rows(self) -> List[Tuple[float, float]]:
        return list(zip(self.dose_axis.tolist(), self.volume_fraction.tolist()))


def _roi_doses(dose: ArrayOrVolume, roi: ArrayOrVolume) -> np.ndarray:
    values, mask = as_array(dose), as_array(roi) > 0
    if values.shape != mask.shape:
        raise ValueError(f"Dose {values.shape} and ROI {mask.shape} are not aligned")
    if not mask.any():
        raise ValueError("ROI mask is empty")
    return values[mask]


def dvh(dose: ArrayOrVolume, roi: ArrayOrVolume, bin_gy: float = DVH_BIN_GY,
        max_dose_gy: Optional[float] = None) -> DvhCurve:
    """
    Cumulative DVH: fraction of ROI voxels receiving at least each dose level.

    Args:
        dose: Dose in Gy
        roi: ROI mask
        bin_gy: Dose axis spacing
        max_dose_gy: Extend the axis to cover this dose (used to share an axis between curves)

    Returns:
        Curve from 0 Gy to one bin past the largest dose, where the fraction is 0
    """
    if bin_gy <= 0:
        raise ValueError(f"DVH bin width must be positive, got {bin_gy}")
    doses = np.sort(_roi_doses(dose, roi))
    top = max(float(doses[-1]), max_dose_gy or 0.0)
    # Rounded so 0.3 / 0.1 counts three whole bins and labels match the dose they name
    n = int(math.floor(round(top / bin_gy, 9))) + 2
    axis = np.round(np.arange(n) * bin_gy, 10)
    at_least = doses.size - np.searchsorted(doses, axis, side="left")
    return DvhCurve(axis, at_least / doses.size)


def _dose_at_volume(doses: np.ndarray, volume_percent: float) -> float:
    """Largest d such that at least V% of the voxels receive >= d."""
    ordered = np.sort(doses)[::-1]
    k = max(1, math.ceil(volume_percent * ordered.size / 100.0 - ORDER_STATISTIC_SLACK))
    return float(ordered[min(k, ordered.size) - 1])


def dose_metric(dose: ArrayOrVolume, roi: ArrayOrVolume, spec: RoiMetricSpec) -> float:
    """Evaluate one RoiMetricSpec on a dose volume (Gy, or percent for volume metrics)."""
    doses = _roi_doses(dose, roi)
    if spec.kind == MetricKind.D_V:
        return _dose_at_volume(doses, spec.value)
    if spec.kind == MetricKind.D_MIN:
        return float(doses.min())
    if spec.kind == MetricKind.D_MEAN:
        return float(doses.mean())
    if spec.kind == MetricKind.D_MAX:
        return float(doses.max())
    if spec.kind == MetricKind.V_TARGET:
        if spec.prescription_gy is None:
            raise ValueError(f"V_target on {spec.roi} needs a prescription")
        threshold = spec.value * spec.prescription_gy / 100.0
    else:
        threshold = spec.value
    return float(100.0 * np.count_nonzero(doses >= threshold) / doses.size)


@dataclass
class MetricsReport:
    mae_gy: float
    ssim: float
    psnr_db: float
    dose_deltas: Dict[str, float]
    volume_deltas: Dict[str, float]
    dose_score_gy: Optional[float]
    volume_score_percent: Optional[float]
    pred_values: Dict[str, float] = field(default_factory=dict)
    truth_values: Dict[str, float] = field(default_factory=dict)
    dvh_curves: Dict[str, Tuple[DvhCurve, DvhCurve]] = field(default_factory=dict, repr=False)

    def scalars(self) -> Dict[str, float]:
        """Flat map of every scalar, including each per-spec delta."""
        out = {"mae_gy": self.mae_gy, "ssim": self.ssim, "psnr_db": self.psnr_db}
        if self.dose_score_gy is not None:
            out["dose_score_gy"] = self.dose_score_gy
        if self.volume_score_percent is not None:
            out["volume_score_percent"] = self.volume_score_percent
        out.update({f"delta/{k}": v for k, v in self.dose_deltas.items()})
        out.update({f"delta/{k}": v for k, v in self.volume_deltas.items()})
        return out

    def to_dict(self) -> dict:
        return {
            "mae_gy": self.mae_gy,
            "ssim": self.ssim,
            "psnr_db": self.psnr_db,
            "dose_score_gy": self.dose_score_gy,
            "volume_score_percent": self.volume_score_percent,
            "dose_deltas": self.dose_deltas,
            "volume_deltas": self.volume_deltas,
            "pred_values": self.pred_values,
            "truth_values": self.truth_values,
        }


def score_report(
    pred: ArrayOrVolume,
    truth: ArrayOrVolume,
    rois: Mapping[str, ArrayOrVolume],
    specs: Sequence[RoiMetricSpec],
    body: ArrayOrVolume,
    bin_gy: float = DVH_BIN_GY
) -> MetricsReport:
    """
    Compare a predicted dose with the reference on image and dosimetric metrics.

    Args:
        pred: Predicted dose (Gy)
        truth: Reference dose (Gy)
        rois: ROI masks by name
        specs: Metrics to evaluate; every spec.roi must be in rois
        body: Body mask restricting MAE, SSIM and PSNR
        bin_gy: DVH bin width

    Returns:
        MetricsReport with per-spec deltas, the two scores and per-ROI DVH pairs
    """
    missing = sorted({s.roi for s in specs} - set(rois))
    if missing:
        raise ValueError(f"Metric specs reference unknown ROIs: {missing}")

    dose_deltas, volume_deltas = {}, {}
    pred_values, truth_values = {}, {}
    for spec in specs:
        p = dose_metric(pred, rois[spec.roi], spec)
        t = dose_metric(truth, rois[spec.roi], spec)
        pred_values[spec.label], truth_values[spec.label] = p, t
        target = volume_deltas if spec.is_volume_metric else dose_deltas
        target[spec.label] = abs(p - t)

    top = max(float(as_array(pred).max()), float(as_array(truth).max()))
    curves = {
        name: (dvh(pred, mask, bin_gy, top), dvh(truth, mask, bin_gy, top))
        for name, mask in rois.items()
    }

    report = MetricsReport(
        mae_gy=mae_masked(pred, truth, body),
        ssim=ssim_masked(pred, truth, body),
        psnr_db=psnr_masked(pred, truth, body),
        dose_deltas=dose_deltas,
        volume_deltas=volume_deltas,
        dose_score_gy=float(np.mean(list(dose_deltas.values()))) if dose_deltas else None,
        volume_score_percent=float(np.mean(list(volume_deltas.values()))) if volume_deltas else None,
        pred_values=pred_values,
        truth_values=truth_values,
        dvh_curves=curves,
    )
    logger.debug(f"Report: MAE {report.mae_gy:.3f} Gy, dose score {report.dose_score_gy}")
    return report


def aggregate_reports(reports: Sequence[MetricsReport]) -> Dict[str, Dict[str, Optional[float]]]:
    """
    Mean and (population) standard deviation of every scalar shared by all reports.

    Only finite values enter the statistics (a perfect case has PSNR = +inf); "count" is the
    number that did. A metric with no finite value gets None for mean and std.
    """
    if not reports:
        raise ValueError("Cannot aggregate an empty list of reports")
    keys = set(reports[0].scalars())
    for report in reports[1:]:
        keys &= set(report.scalars())

    summary = {}
    for key in sorted(keys):
        values = np.array([r.scalars()[key] for r in reports], dtype=np.float64)
        finite = values[np.isfinite(values)]
        if finite.size == 0:
            summary[key] = {"mean": None, "std": None, "count": 0}
        else:
            summary[key] = {"mean": float(finite.mean()), "std": float(finite.std()), "count": int(finite.size)}
    return summary
