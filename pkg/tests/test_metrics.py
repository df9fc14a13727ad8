import json

import numpy as np
import pytest

from src.metrics.dosimetry import (
    MetricKind,
    RoiMetricSpec,
    aggregate_reports,
    default_specs,
    dose_metric,
    dvh,
    score_report,
)
from src.metrics.image_metrics import mae_masked, psnr_masked, ssim_masked


def column(values):
    return np.asarray(values, dtype=np.float64).reshape(-1, 1, 1)


@pytest.fixture
def body():
    return np.ones((12, 12, 2))


class TestImageMetrics:
    def test_mae_only_counts_body(self):
        u, v = column([1.0, 2.0, 100.0]), column([2.0, 4.0, 0.0])
        assert mae_masked(u, v, column([1, 1, 0])) == pytest.approx(1.5)

    def test_psnr_reference_points(self, body):
        zeros = np.zeros(body.shape)
        assert psnr_masked(zeros, zeros + 30.0, body) == pytest.approx(40.0)
        assert psnr_masked(zeros, zeros + 3000.0, body) == pytest.approx(0.0, abs=1e-12)
        assert psnr_masked(zeros, zeros, body) == float("inf")

    def test_ssim_identical_is_one(self, rng, body):
        u = rng.uniform(0, 60, size=body.shape)
        assert ssim_masked(u, u, body) == pytest.approx(1.0)

    def test_ssim_constant_volumes(self, body):
        zeros = np.zeros(body.shape)
        assert ssim_masked(zeros, zeros + 3000.0, body) == pytest.approx(900.0 / 9000900.0)

    def test_ssim_drops_with_noise(self, rng, body):
        u = rng.uniform(0, 60, size=body.shape)
        assert ssim_masked(u, u + rng.normal(0, 20, size=body.shape), body) < 0.99

    def test_mae_and_psnr_match_direct_summation(self, rng):
        u, v = rng.uniform(0, 70, size=(10, 9, 3)), rng.uniform(0, 70, size=(10, 9, 3))
        mask = rng.random((10, 9, 3)) < 0.5
        abs_sum, sq_sum, count = 0.0, 0.0, 0
        for index in zip(*np.nonzero(mask)):
            diff = float(u[index]) - float(v[index])
            abs_sum += abs(diff)
            sq_sum += diff * diff
            count += 1
        assert mae_masked(u, v, mask) == pytest.approx(abs_sum / count, abs=1e-9)
        expected_psnr = 10.0 * np.log10(3000.0 ** 2 / (sq_sum / count))
        assert psnr_masked(u, v, mask) == pytest.approx(expected_psnr, abs=1e-9)

    def test_ssim_is_symmetric_and_bounded(self, rng, body):
        for _ in range(5):
            u = rng.uniform(0, 60, size=body.shape)
            v = u + rng.normal(0, 15, size=body.shape)
            forward = ssim_masked(u, v, body)
            assert forward == pytest.approx(ssim_masked(v, u, body), abs=1e-12)
            assert -1.0 <= forward <= 1.0

    def test_alignment_and_empty_body(self, body):
        with pytest.raises(ValueError, match="not aligned"):
            mae_masked(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), np.ones((2, 2, 2)))
        with pytest.raises(ValueError, match="empty"):
            mae_masked(np.zeros(body.shape), np.zeros(body.shape), np.zeros(body.shape))


class TestDoseMetrics:
    def test_d95_of_constant_dose(self):
        spec = RoiMetricSpec("target", MetricKind.D_V, 95.0)
        assert dose_metric(column([20.0] * 40), column([1] * 40), spec) == 20.0

    def test_d95_of_split_dose(self):
        spec = RoiMetricSpec("target", MetricKind.D_V, 95.0)
        assert dose_metric(column([10.0] * 20 + [20.0] * 20), column([1] * 40), spec) == 10.0

    def test_d50_takes_the_upper_half(self):
        spec = RoiMetricSpec("target", MetricKind.D_V, 50.0)
        assert dose_metric(column([10.0] * 20 + [20.0] * 20), column([1] * 40), spec) == 20.0

    def test_v95_percent_of_prescription(self):
        spec = RoiMetricSpec.parse("V95", "target", True, prescription_gy=20.0)
        assert dose_metric(column([10.0] * 20 + [20.0] * 20), column([1] * 40), spec) == 50.0

    def test_oar_v_is_a_gy_threshold(self):
        spec = RoiMetricSpec.parse("V30", "oar_1", False)
        assert spec.kind == MetricKind.V_OAR
        assert dose_metric(column([10.0, 29.9, 30.0, 45.0]), column([1, 1, 1, 1]), spec) == 50.0

    def test_summary_statistics_respect_mask(self):
        dose, roi = column([5.0, 10.0, 30.0, 99.0]), column([1, 1, 1, 0])
        assert dose_metric(dose, roi, RoiMetricSpec("r", MetricKind.D_MIN)) == 5.0
        assert dose_metric(dose, roi, RoiMetricSpec("r", MetricKind.D_MEAN)) == 15.0
        assert dose_metric(dose, roi, RoiMetricSpec("r", MetricKind.D_MAX)) == 30.0

    def test_empty_roi_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            dose_metric(column([1.0]), column([0]), RoiMetricSpec("r", MetricKind.D_MAX))


class TestSpecParsing:
    @pytest.mark.parametrize("text,kind,value", [
        ("D95", MetricKind.D_V, 95.0),
        ("d2.5", MetricKind.D_V, 2.5),
        ("Dmean", MetricKind.D_MEAN, None),
        ("DMAX", MetricKind.D_MAX, None),
    ])
    def test_dose_names(self, text, kind, value):
        spec = RoiMetricSpec.parse(text, "oar_1", False)
        assert spec.kind == kind
        assert spec.value == value

    @pytest.mark.parametrize("text", ["X95", "Vmean", "D", "95"])
    def test_unrecognized(self, text):
        with pytest.raises(ValueError, match="Unrecognized"):
            RoiMetricSpec.parse(text, "target", True, 60.0)

    def test_target_volume_needs_prescription(self):
        with pytest.raises(ValueError, match="prescription"):
            RoiMetricSpec.parse("V95", "target", True)

    def test_labels(self):
        assert RoiMetricSpec.parse("D95", "target", True, 60.0).label == "target:D95"
        assert RoiMetricSpec.parse("V30", "oar_2", False).label == "oar_2:V30"
        assert RoiMetricSpec.parse("Dmax", "oar_1", False).label == "oar_1:Dmax"

    def test_default_presets(self):
        labels = [spec.label for spec in default_specs(["target", "oar_1", "oar_2"], 60.0)]
        assert labels == ["target:D95", "target:V95", "oar_1:Dmax", "oar_2:Dmean", "oar_2:V30"]


class TestDvh:
    def test_cumulative_curve(self):
        curve = dvh(column([0.0, 0.1, 0.2, 0.3]), column([1, 1, 1, 1]), bin_gy=0.1)
        np.testing.assert_array_equal(curve.dose_axis, [0.0, 0.1, 0.2, 0.3, 0.4])
        np.testing.assert_array_equal(curve.volume_fraction, [1.0, 0.75, 0.5, 0.25, 0.0])
        assert curve.volume_fraction[0] == 1.0
        assert curve.volume_fraction[-1] == 0.0
        assert np.all(np.diff(curve.volume_fraction) <= 0)

    def test_uniform_roi_is_a_step(self):
        curve = dvh(column([20.0] * 10), column([1] * 10))
        assert np.all(curve.volume_fraction[curve.dose_axis <= 20.0] == 1.0)
        assert np.all(curve.volume_fraction[curve.dose_axis > 20.0] == 0.0)
        assert 20.0 in curve.dose_axis

    def test_two_level_mixture(self):
        curve = dvh(column([10.0] * 20 + [20.0] * 20), column([1] * 40))
        axis, fraction = curve.dose_axis, curve.volume_fraction
        assert np.all(fraction[axis <= 10.0] == 1.0)
        assert np.all(fraction[(axis > 10.0) & (axis <= 20.0)] == 0.5)
        assert np.all(fraction[axis > 20.0] == 0.0)

    def test_axis_labels_are_exact_multiples(self):
        curve = dvh(column([7.3]), column([1]), bin_gy=0.1)
        assert curve.dose_axis[3] == 0.3
        assert curve.dose_axis[73] == 7.3
        assert curve.volume_fraction[73] == 1.0
        assert curve.volume_fraction[74] == 0.0

    def test_random_curves_are_monotone(self, rng):
        for _ in range(100):
            dose = rng.uniform(0.0, 70.0, size=(8, 8, 4))
            roi = rng.random((8, 8, 4)) < 0.4
            roi[0, 0, 0] = True
            fraction = dvh(dose, roi).volume_fraction
            assert fraction[0] == 1.0
            assert fraction[-1] == 0.0
            assert np.all(np.diff(fraction) <= 0.0)

    def test_shared_axis(self):
        curve = dvh(column([1.0, 2.0]), column([1, 1]), bin_gy=0.5, max_dose_gy=10.0)
        assert curve.dose_axis[-1] >= 10.0

    def test_bin_must_be_positive(self):
        with pytest.raises(ValueError, match="bin width"):
            dvh(column([1.0]), column([1]), bin_gy=0.0)


class TestScoreReport:
    @pytest.fixture
    def case(self, rng):
        shape = (12, 12, 2)
        truth = rng.uniform(0, 60, size=shape)
        target = np.zeros(shape)
        target[3:8, 3:8] = 1
        oar = np.zeros(shape)
        oar[8:11, 1:4] = 1
        return truth, {"target": target, "oar_1": oar, "oar_2": oar}, np.ones(shape)

    def test_identity_scores_zero(self, case):
        truth, rois, body = case
        report = score_report(truth, truth, rois, default_specs(list(rois), 60.0), body)
        assert report.mae_gy == 0.0
        assert report.psnr_db == float("inf")
        assert report.dose_score_gy == 0.0
        assert report.volume_score_percent == 0.0
        assert report.ssim == pytest.approx(1.0)

    def test_uniform_shift_moves_dose_deltas(self, case):
        truth, rois, body = case
        report = score_report(truth + 2.0, truth, rois, default_specs(list(rois), 60.0), body)
        assert report.mae_gy == pytest.approx(2.0)
        assert report.dose_score_gy == pytest.approx(2.0)
        assert set(report.dose_deltas) == {"target:D95", "oar_1:Dmax", "oar_2:Dmean"}
        assert set(report.volume_deltas) == {"target:V95", "oar_2:V30"}
        pred_curve, truth_curve = report.dvh_curves["target"]
        np.testing.assert_array_equal(pred_curve.dose_axis, truth_curve.dose_axis)

    def test_unknown_roi_rejected(self, case):
        truth, rois, body = case
        with pytest.raises(ValueError, match="unknown ROIs"):
            score_report(truth, truth, rois, [RoiMetricSpec("bladder", MetricKind.D_MAX)], body)

    def test_aggregate(self, case):
        truth, rois, body = case
        specs = default_specs(list(rois), 60.0)
        reports = [score_report(truth + shift, truth, rois, specs, body) for shift in (1.0, 3.0)]
        summary = aggregate_reports(reports)
        assert summary["mae_gy"]["mean"] == pytest.approx(2.0)
        assert summary["mae_gy"]["std"] == pytest.approx(1.0)
        assert "delta/target:D95" in summary

    def test_scores_match_brute_force(self, case, rng):
        truth, rois, body = case
        pred = truth + rng.normal(0, 4, size=truth.shape)
        report = score_report(pred, truth, rois, default_specs(list(rois), 60.0), body)

        def dose_at_volume(doses, percent):
            return max(d for d in doses if np.count_nonzero(doses >= d) * 100.0 >= percent * doses.size)

        def percent_at_least(doses, threshold):
            return 100.0 * np.mean(doses >= threshold)

        def roi_doses(dose, name):
            return dose[rois[name] > 0]

        dose_deltas = [
            abs(dose_at_volume(roi_doses(pred, "target"), 95.0) - dose_at_volume(roi_doses(truth, "target"), 95.0)),
            abs(roi_doses(pred, "oar_1").max() - roi_doses(truth, "oar_1").max()),
            abs(roi_doses(pred, "oar_2").mean() - roi_doses(truth, "oar_2").mean()),
        ]
        volume_deltas = [
            abs(percent_at_least(roi_doses(pred, "target"), 57.0) - percent_at_least(roi_doses(truth, "target"), 57.0)),
            abs(percent_at_least(roi_doses(pred, "oar_2"), 30.0) - percent_at_least(roi_doses(truth, "oar_2"), 30.0)),
        ]
        assert report.dose_score_gy == pytest.approx(np.mean(dose_deltas), abs=1e-9)
        assert report.volume_score_percent == pytest.approx(np.mean(volume_deltas), abs=1e-9)

    def test_aggregate_skips_infinite_psnr(self, case):
        truth, rois, body = case
        specs = default_specs(list(rois), 60.0)
        reports = [score_report(truth + shift, truth, rois, specs, body) for shift in (0.0, 2.0)]
        summary = aggregate_reports(reports)
        assert summary["psnr_db"] == {"mean": reports[1].psnr_db, "std": 0.0, "count": 1}
        assert summary["mae_gy"]["count"] == 2
        json.dumps(summary, allow_nan=False)

    def test_aggregate_all_perfect(self, case):
        truth, rois, body = case
        reports = [score_report(truth, truth, rois, default_specs(list(rois), 60.0), body)] * 2
        summary = aggregate_reports(reports)
        assert summary["psnr_db"] == {"mean": None, "std": None, "count": 0}
        assert summary["mae_gy"] == {"mean": 0.0, "std": 0.0, "count": 2}
        json.dumps(summary, allow_nan=False)

    def test_aggregate_needs_reports(self):
        with pytest.raises(ValueError, match="empty"):
            aggregate_reports([])
