import csv
import json
import shutil
from dataclasses import replace

import numpy as np
import pytest

import dosediff
from src.model.checkpoint import checkpoint_from_model, load_checkpoint, restore_model, save_checkpoint
from src.model.mmfnet import MMFNet
from src.pipeline import train as train_module
from src.pipeline.config import save_run_config
from src.pipeline.dataset import load_case, load_manifest, split_case_ids
from src.pipeline.evaluate import (
    evaluate_predictions,
    load_spec_table,
    read_predictions,
    run_evaluate,
)
from src.pipeline.predict import load_predictor, predict_volumes, run_predict, volume_seed, write_predictions
from src.pipeline.studies import (
    ablate,
    ablation_variant,
    baseline,
    dispersion,
    mean_training_dose,
    seed_study,
    sweep_steps,
    variant_name,
)
from src.pipeline.train import BEST_NAME, BEST_VAL_KEY, LAST_NAME, LOSS_LOG_NAME, run_train
from src.tensor.tensor import Tensor
from src.volume.volume import Volume, VolumeKind


@pytest.fixture(scope="module")
def trained(small_dataset, tmp_path_factory):
    """Two-iteration run that also keeps its first-iteration checkpoint."""
    data_dir, config = small_dataset
    config = replace(config, training=replace(config.training, checkpoint_every=1))
    run_dir = tmp_path_factory.mktemp("run")
    return run_dir, run_train(config, run_dir, data_dir), config


def weights(checkpoint_path):
    return {name: param.data for name, param in restore_model(load_checkpoint(checkpoint_path)).named_parameters()}


def held_out_ids(data_dir):
    return split_case_ids(load_manifest(data_dir), "test")


def truth_predictions(data_dir, case_ids):
    return {case_id: load_case(data_dir, case_id).dose for case_id in case_ids}


class TestTrain:
    def test_run_artifacts(self, trained):
        run_dir, result, config = trained
        assert result.last_checkpoint == run_dir / LAST_NAME
        assert result.best_checkpoint == run_dir / BEST_NAME
        assert (run_dir / "ckpt_000001.json").exists()
        assert not (run_dir / "ckpt_000002.json").exists()
        assert json.loads((run_dir / "config.json").read_text()) == config.to_dict()
        assert len(result.losses) == 2 and all(np.isfinite(result.losses))
        assert len(result.val_losses) == 2

    def test_loss_log(self, trained):
        run_dir, result, _ = trained
        with open(run_dir / LOSS_LOG_NAME, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["iteration", "loss", "lr", "val_loss"]
        assert [int(row[0]) for row in rows[1:]] == [1, 2]
        assert [float(row[1]) for row in rows[1:]] == result.losses

    def test_checkpoint_records_run(self, trained):
        run_dir, _, config = trained
        checkpoint = load_checkpoint(run_dir / LAST_NAME)
        assert checkpoint.iteration == 2
        assert checkpoint.run_config == config.to_dict()
        assert checkpoint.optimizer_state()

    def test_training_is_reproducible(self, trained, small_dataset, tmp_path):
        run_dir, result, config = trained
        again = run_train(config, tmp_path / "again", small_dataset[0])
        np.testing.assert_allclose(again.losses, result.losses, rtol=1e-6)
        first, second = weights(result.last_checkpoint), weights(again.last_checkpoint)
        for name in first:
            np.testing.assert_allclose(second[name], first[name], rtol=1e-5, atol=1e-7, err_msg=name)

    def test_resume_continues_the_run(self, trained, small_dataset, tmp_path):
        run_dir, result, config = trained
        resumed = run_train(config, tmp_path / "resumed", small_dataset[0], resume=run_dir / "ckpt_000001.json")
        assert len(resumed.losses) == 1
        assert resumed.losses[0] == pytest.approx(result.losses[1], rel=1e-5)
        first, second = weights(result.last_checkpoint), weights(resumed.last_checkpoint)
        for name in first:
            np.testing.assert_allclose(second[name], first[name], rtol=1e-5, atol=1e-7, err_msg=name)

    def test_checkpoints_carry_best_validation_loss(self, trained):
        run_dir, result, _ = trained
        periodic = load_checkpoint(run_dir / "ckpt_000001.json")
        assert periodic.extra[BEST_VAL_KEY] == pytest.approx(result.val_losses[0])
        assert load_checkpoint(run_dir / LAST_NAME).extra[BEST_VAL_KEY] == pytest.approx(min(result.val_losses))

    def test_resume_keeps_a_better_best_checkpoint(self, trained, small_dataset, tmp_path):
        run_dir, _, config = trained
        copy = tmp_path / "copy"
        shutil.copytree(run_dir, copy)
        best = load_checkpoint(copy / BEST_NAME)
        best.extra["val_loss"] = 0.0
        save_checkpoint(best, copy / BEST_NAME)
        before = (copy / BEST_NAME).read_bytes()

        resumed = run_train(config, copy, small_dataset[0], resume=copy / "ckpt_000001.json")
        assert resumed.best_checkpoint == copy / BEST_NAME
        assert (copy / BEST_NAME).read_bytes() == before
        assert load_checkpoint(copy / LAST_NAME).extra[BEST_VAL_KEY] == 0.0

    def test_non_finite_loss_aborts(self, small_dataset, tmp_path, monkeypatch):
        data_dir, config = small_dataset
        monkeypatch.setattr(train_module, "training_loss", lambda *args, **kwargs: Tensor(np.array([np.nan])))
        with pytest.raises(RuntimeError, match="Non-finite loss"):
            run_train(config, tmp_path / "nan", data_dir)

    def test_roi_count_must_match(self, small_dataset, tmp_path, make_model_config):
        data_dir, config = small_dataset
        mismatched = replace(config, model=make_model_config(sdm_channels=4),
                             data=replace(config.data, oar_count=3))
        with pytest.raises(ValueError, match="ROIs"):
            run_train(mismatched, tmp_path / "bad", data_dir)


class TestPredict:
    def test_volumes_are_physical(self, trained, small_dataset):
        run_dir, _, _ = trained
        data_dir, _ = small_dataset
        case_id = held_out_ids(data_dir)[0]
        volume = predict_volumes(run_dir / LAST_NAME, [case_id])[case_id]
        case = load_case(data_dir, case_id)
        assert volume.kind == VolumeKind.DOSE_GY
        assert volume.shape == case.dose.shape
        assert volume.spacing_mm == case.dose.spacing_mm
        assert volume.values.min() >= 0.0
        assert np.all(volume.values[case.body.values == 0] == 0.0)

    def test_seeded_sampling(self, trained, small_dataset):
        run_dir, _, _ = trained
        case_id = held_out_ids(small_dataset[0])[0]
        ckpt = run_dir / LAST_NAME
        first = predict_volumes(ckpt, [case_id], steps=2, seed=5)[case_id].values
        np.testing.assert_array_equal(predict_volumes(ckpt, [case_id], steps=2, seed=5)[case_id].values, first)
        assert not np.array_equal(predict_volumes(ckpt, [case_id], steps=2, seed=6)[case_id].values, first)

    def test_process_pool_matches_single_lane(self, trained, small_dataset):
        run_dir, _, _ = trained
        data_dir, _ = small_dataset
        case_ids = split_case_ids(load_manifest(data_dir), "train")[:2]
        single = predict_volumes(run_dir / LAST_NAME, case_ids, steps=1, workers=1)
        pooled = predict_volumes(run_dir / LAST_NAME, case_ids, steps=1, workers=2)
        for case_id in case_ids:
            np.testing.assert_allclose(pooled[case_id].values, single[case_id].values, rtol=1e-6, atol=1e-6)

    def test_volume_seed_depends_on_case(self):
        a = np.random.default_rng(volume_seed(0, "case_000")).uniform()
        b = np.random.default_rng(volume_seed(0, "case_001")).uniform()
        assert a != b
        assert a == np.random.default_rng(volume_seed(0, "case_000")).uniform()

    def test_run_predict_paths(self, trained, small_dataset, tmp_path):
        run_dir, _, _ = trained
        case_id = held_out_ids(small_dataset[0])[0]
        assert run_predict(run_dir / LAST_NAME, case_id, steps=1, out=tmp_path) == tmp_path / f"{case_id}.json"
        named = tmp_path / "named" / "dose.json"
        assert run_predict(run_dir / LAST_NAME, case_id, steps=1, out=named) == named

    def test_requires_cases(self, trained):
        run_dir, _, _ = trained
        with pytest.raises(ValueError, match="No cases"):
            predict_volumes(run_dir / LAST_NAME, [])

    def test_checkpoint_without_run_config(self, tmp_path, toy_config):
        path = save_checkpoint(checkpoint_from_model(MMFNet(toy_config)), tmp_path / "bare.json")
        with pytest.raises(RuntimeError, match="no run config"):
            load_predictor(path)


class TestEvaluate:
    def test_reference_scores_perfectly(self, small_dataset):
        data_dir, _ = small_dataset
        case_ids = held_out_ids(data_dir) + split_case_ids(load_manifest(data_dir), "val")
        reports, aggregate = evaluate_predictions(truth_predictions(data_dir, case_ids), data_dir)
        assert sorted(reports) == sorted(case_ids)
        assert aggregate["mae_gy"]["mean"] == 0.0
        assert aggregate["dose_score_gy"]["mean"] == 0.0
        assert aggregate["ssim"]["mean"] == pytest.approx(1.0)

    def test_run_evaluate_writes_report_and_dvh(self, small_dataset, tmp_path):
        data_dir, _ = small_dataset
        case_id = held_out_ids(data_dir)[0]
        shifted = load_case(data_dir, case_id).dose
        shifted = Volume(shifted.values + 1.0, shifted.spacing_mm, VolumeKind.DOSE_GY)
        write_predictions({case_id: shifted}, tmp_path / "pred")
        assert list(read_predictions(tmp_path / "pred")) == [case_id]

        document = run_evaluate(tmp_path / "pred", data_dir, out=tmp_path / "report" / "metrics.json")
        saved = json.loads((tmp_path / "report" / "metrics.json").read_text())
        assert saved["cases"][case_id]["mae_gy"] == pytest.approx(1.0)
        assert document["aggregate"]["mae_gy"]["mean"] == pytest.approx(1.0)
        tables = sorted(p.name for p in (tmp_path / "report" / "dvh").glob("*.csv"))
        assert tables == [f"{case_id}_{roi}.csv" for roi in ("oar_1", "oar_2", "target")]

    def test_spec_table(self, small_dataset, tmp_path):
        data_dir, _ = small_dataset
        case_id = held_out_ids(data_dir)[0]
        (tmp_path / "specs.json").write_text(json.dumps({"target": ["D95", "Dmean"], "oar_1": ["V20"]}))
        table = load_spec_table(tmp_path / "specs.json")
        reports, _ = evaluate_predictions(truth_predictions(data_dir, [case_id]), data_dir, table)
        report = reports[case_id]
        assert set(report.dose_deltas) == {"target:D95", "target:Dmean"}
        assert set(report.volume_deltas) == {"oar_1:V20"}

    def test_spec_table_errors(self, small_dataset, tmp_path):
        data_dir, _ = small_dataset
        assert load_spec_table(None) is None
        with pytest.raises(FileNotFoundError):
            load_spec_table(tmp_path / "absent.json")
        (tmp_path / "list.json").write_text(json.dumps(["D95"]))
        with pytest.raises(ValueError, match="must map ROI names"):
            load_spec_table(tmp_path / "list.json")
        case_id = held_out_ids(data_dir)[0]
        with pytest.raises(ValueError, match="absent"):
            evaluate_predictions(truth_predictions(data_dir, [case_id]), data_dir, {"bladder": ["Dmax"]})

    def test_prediction_errors(self, small_dataset, tmp_path):
        data_dir, _ = small_dataset
        case_id = held_out_ids(data_dir)[0]
        dose = load_case(data_dir, case_id).dose
        with pytest.raises(ValueError, match="without a reference case"):
            evaluate_predictions({"case_777": dose}, data_dir)
        with pytest.raises(ValueError, match="No predictions"):
            evaluate_predictions({}, data_dir)
        with pytest.raises(ValueError, match="expected DOSE_GY"):
            evaluate_predictions({case_id: Volume(dose.values, dose.spacing_mm, VolumeKind.SDM_DM)}, data_dir)
        with pytest.raises(FileNotFoundError):
            read_predictions(tmp_path)


class TestStudies:
    def test_dispersion(self):
        stats = dispersion([1.0, 3.0])
        assert stats == {"mean": 2.0, "std": 1.0, "var": 1.0, "cv": 0.5}
        assert dispersion([-1.0, 1.0])["cv"] == float("inf")

    def test_variants(self, small_dataset):
        _, config = small_dataset
        assert variant_name("psdm", True, False) == "psdm_ms1_ff0"
        variant = ablation_variant(config, "isdm", False, True)
        assert variant.conditioning == "isdm"
        assert not variant.model.multi_scale_fusion and variant.model.fusion_former
        with pytest.raises(ValueError):
            ablation_variant(config, "contours", True, True)

    def test_mean_dose_baseline(self, small_dataset):
        data_dir, _ = small_dataset
        level = mean_training_dose(data_dir)
        result = baseline(data_dir)
        assert result["mean_dose_gy"] == level
        assert 0.0 < level < 62.0
        assert result["aggregate"]["mae_gy"]["mean"] > 0.0

    def test_sweep_steps(self, trained, small_dataset):
        run_dir, _, _ = trained
        rows = sweep_steps(run_dir / LAST_NAME, [1, 2], data_dir=small_dataset[0])
        assert [row["steps"] for row in rows] == [1, 2]
        assert all(row["seconds"] >= 0.0 and "mae_gy" in row["aggregate"] for row in rows)

    def test_seed_study(self, trained, small_dataset):
        run_dir, _, _ = trained
        result = seed_study(run_dir / LAST_NAME, seeds=2, steps=1, data_dir=small_dataset[0])
        assert [row["seed"] for row in result["per_seed"]] == [0, 1]
        assert set(result["summary"]["mae_gy"]) == {"mean", "std", "var", "cv"}
        with pytest.raises(ValueError, match="at least 2 seeds"):
            seed_study(run_dir / LAST_NAME, seeds=1)

    def test_ablate_single_variant(self, small_dataset, tmp_path):
        _, config = small_dataset
        summary = ablate(config, tmp_path, ["mask"], [False], [False])
        assert list(summary) == ["mask_ms0_ff0"]
        assert summary["mask_ms0_ff0"]["conditioning"] == "mask"
        assert (tmp_path / "mask_ms0_ff0" / LAST_NAME).exists()
        assert json.loads((tmp_path / "summary.json").read_text()).keys() == summary.keys()


class TestCli:
    def test_phantom_gen(self, tmp_path, make_run_config):
        config = make_run_config(tmp_path / "unused")
        config = replace(config, data=replace(config.data, phantom_count=2, split=(0.5, 0.5, 0.0)))
        save_run_config(config, tmp_path / "config.json")
        code = dosediff.main(["phantom-gen", "--config", str(tmp_path / "config.json"),
                              "--out", str(tmp_path / "data")])
        assert code == 0
        assert len(load_manifest(tmp_path / "data")["cases"]) == 2

    def test_make_sdm(self, small_dataset, tmp_path):
        data_dir, _ = small_dataset
        code = dosediff.main(["make-sdm", "--rois", str(data_dir / "case_000"), "--out", str(tmp_path),
                              "--spacing", "1,1,1"])
        assert code == 0
        assert len(list(tmp_path.glob("sdm_*.json"))) == 3

    def test_baseline_report(self, small_dataset, tmp_path):
        data_dir, _ = small_dataset
        assert dosediff.main(["baseline", "--data", str(data_dir), "--out", str(tmp_path / "b.json")]) == 0
        assert "mean_dose_gy" in json.loads((tmp_path / "b.json").read_text())

    @pytest.mark.parametrize("argv", [
        ["evaluate", "--pred", "missing_dir", "--truth", "missing_dir"],
        ["make-sdm", "--rois", ".", "--out", ".", "--spacing", "1,2"],
        ["ablate", "--out", "unused", "--ms", "maybe"],
    ])
    def test_failures_return_one(self, argv, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        assert dosediff.main(argv) == 1
