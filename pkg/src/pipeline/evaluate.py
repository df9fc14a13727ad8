"""Case-wise evaluation of predicted doses against the dataset's reference doses."""

import csv
import json
import logging
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Tuple, Union

from ..metrics.dosimetry import (
    DVH_BIN_GY,
    MetricsReport,
    RoiMetricSpec,
    aggregate_reports,
    default_specs,
    score_report,
)
from ..volume.volume import Volume, VolumeKind
from ..volume.volume_io import read_volume
from .dataset import CaseData, load_case, load_manifest

logger = logging.getLogger(__name__)

SpecTable = Mapping[str, List[str]]


def load_spec_table(path: Optional[Union[str, Path]]) -> Optional[SpecTable]:
    """Read {roi_name: ["D95", "V95", ...]}; None means use the clinical presets."""
    if path is None:
        return None
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Metric specs file not found: {path}")
    table = json.loads(path.read_text())
    if not isinstance(table, dict) or not all(isinstance(v, list) for v in table.values()):
        raise ValueError(f"Metric specs in {path} must map ROI names to lists of metric names")
    return table


def specs_for_case(case: CaseData, table: Optional[SpecTable] = None) -> List[RoiMetricSpec]:
    if table is None:
        return default_specs(case.roi_names, case.prescription_gy)
    unknown = sorted(set(table) - set(case.roi_names))
    if unknown:
        raise ValueError(f"Metric specs name ROIs absent from {case.case_id}: {unknown}")
    return [
        RoiMetricSpec.parse(text, roi, roi.startswith("target"), case.prescription_gy)
        for roi, names in table.items()
        for text in names
    ]


def evaluate_case(prediction: Volume, case: CaseData, table: Optional[SpecTable] = None) -> MetricsReport:
    if prediction.kind != VolumeKind.DOSE_GY:
        raise ValueError(f"Prediction for {case.case_id} is {prediction.kind.value}, expected DOSE_GY")
    if prediction.shape != case.dose.shape:
        raise ValueError(f"Prediction for {case.case_id} has shape {prediction.shape}, reference {case.dose.shape}")
    rois = dict(zip(case.roi_names, case.rois))
    return score_report(prediction, case.dose, rois, specs_for_case(case, table), case.body)


def evaluate_predictions(
    predictions: Mapping[str, Volume],
    data_dir: Union[str, Path],
    table: Optional[SpecTable] = None,
    on_case: Optional[Callable[[int, int], None]] = None
) -> Tuple[Dict[str, MetricsReport], Dict[str, Dict[str, float]]]:
    """
    Score every prediction against its reference case.

    Args:
        predictions: Predicted dose volumes by case id
        data_dir: Dataset directory holding the reference cases
        table: Optional ROI -> metric names table
        on_case: Progress callback (done, total)

    Returns:
        (per-case reports, aggregate mean/std per scalar)
    """
    if not predictions:
        raise ValueError("No predictions to evaluate")
    manifest = load_manifest(data_dir)
    known = {c["id"] for c in manifest["cases"]}
    unmatched = sorted(set(predictions) - known)
    if unmatched:
        raise ValueError(f"Predictions without a reference case: {unmatched}")

    reports = {}
    for done, case_id in enumerate(sorted(predictions), start=1):
        case = load_case(data_dir, case_id, manifest)
        try:
            reports[case_id] = evaluate_case(predictions[case_id], case, table)
        except ValueError as e:
            logger.error(f"Evaluation of {case_id} failed: {e}")
            raise
        if on_case:
            on_case(done, len(predictions))

    aggregate = aggregate_reports(list(reports.values()))
    logger.info(f"Evaluated {len(reports)} cases: MAE {aggregate['mae_gy']['mean']:.3f} Gy")
    return reports, aggregate


def read_predictions(pred_dir: Union[str, Path]) -> Dict[str, Volume]:
    pred_dir = Path(pred_dir)
    headers = sorted(pred_dir.glob("case_*.json"))
    if not headers:
        raise FileNotFoundError(f"No predicted volumes (case_*.json) in {pred_dir}")
    return {h.stem: read_volume(h) for h in headers}


def write_dvh_tables(reports: Mapping[str, MetricsReport], out_dir: Union[str, Path]) -> List[Path]:
    """One CSV per case and ROI with columns dose_gy, fraction_pred, fraction_truth."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for case_id, report in reports.items():
        for roi, (pred_curve, truth_curve) in report.dvh_curves.items():
            path = out_dir / f"{case_id}_{roi}.csv"
            with open(path, "w", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(["dose_gy", "fraction_pred", "fraction_truth"])
                for dose, p, t in zip(pred_curve.dose_axis, pred_curve.volume_fraction, truth_curve.volume_fraction):
                    writer.writerow([f"{dose:.4f}", repr(float(p)), repr(float(t))])
            written.append(path)
    return written


def report_document(reports: Mapping[str, MetricsReport], aggregate: dict) -> dict:
    return {
        "cases": {case_id: report.to_dict() for case_id, report in sorted(reports.items())},
        "aggregate": aggregate,
        "dvh_bin_gy": DVH_BIN_GY,
    }


def run_evaluate(
    pred_dir: Union[str, Path],
    truth_dir: Union[str, Path],
    specs_path: Optional[Union[str, Path]] = None,
    out: Optional[Union[str, Path]] = None,
    on_case: Optional[Callable[[int, int], None]] = None
) -> dict:
    """
    Evaluate a directory of predictions and write the JSON report plus DVH tables.

    Returns:
        The report document (per-case reports and the aggregate)
    """
    predictions = read_predictions(pred_dir)
    reports, aggregate = evaluate_predictions(predictions, truth_dir, load_spec_table(specs_path), on_case)
    document = report_document(reports, aggregate)

    if out is not None:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        try:
            out.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")
            write_dvh_tables(reports, out.parent / "dvh")
        except OSError as e:
            logger.error(f"Failed to write report {out}: {e}")
            raise
        logger.info(f"Wrote evaluation report to {out}")
    return document
