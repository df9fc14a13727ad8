"""Experiment drivers: generation-step sweep, sampling-seed variance, ablation grid and the mean-dose baseline."""

import itertools
import json
import logging
import time
from dataclasses import replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from ..sdm.distance_maps import ConditioningMode
from ..volume.volume import Volume, VolumeKind
from .config import RunConfig
from .dataset import load_case, load_manifest, split_case_ids
from .evaluate import evaluate_predictions
from .predict import load_predictor, predict_volumes
from .train import run_train

logger = logging.getLogger(__name__)

DEFAULT_SWEEP_STEPS = (1, 2, 4, 8, 16)
SUMMARY_NAME = "summary.json"

Progress = Optional[Callable[[int, int], None]]


def _test_ids(data_dir: Path) -> List[str]:
    case_ids = split_case_ids(load_manifest(data_dir), "test")
    if not case_ids:
        raise ValueError(f"Dataset {data_dir} has no test cases")
    return case_ids


def _resolve_data_dir(checkpoint_path, data_dir) -> Path:
    if data_dir is not None:
        return Path(data_dir)
    _, config = load_predictor(checkpoint_path)
    return Path(config.data.data_dir)


def sweep_steps(
    checkpoint_path: Union[str, Path],
    steps: Sequence[int] = DEFAULT_SWEEP_STEPS,
    seed: int = 0,
    data_dir: Optional[Union[str, Path]] = None,
    workers: int = 1,
    on_step: Progress = None
) -> List[dict]:
    """
    Held-out metrics and wall-clock sampling time for each number of generation steps.

    Returns:
        One row per S: {"steps", "seconds", "aggregate"}
    """
    data_dir = _resolve_data_dir(checkpoint_path, data_dir)
    case_ids = _test_ids(data_dir)
    rows = []
    for done, s in enumerate(steps, start=1):
        started = time.time()
        predictions = predict_volumes(checkpoint_path, case_ids, s, seed, data_dir, workers)
        seconds = time.time() - started
        _, aggregate = evaluate_predictions(predictions, data_dir)
        rows.append({"steps": int(s), "seconds": seconds, "aggregate": aggregate})
        logger.info(f"S={s}: MAE {aggregate['mae_gy']['mean']:.3f} Gy in {seconds:.1f}s")
        if on_step:
            on_step(done, len(steps))
    return rows


def dispersion(values: Sequence[float]) -> Dict[str, float]:
    """Mean, std, variance and coefficient of variation (std / |mean|)."""
    values = np.asarray(values, dtype=np.float64)
    mean = float(values.mean())
    std = float(values.std())
    cv = std / abs(mean) if mean != 0 else float("inf")
    return {"mean": mean, "std": std, "var": float(values.var()), "cv": cv}


def seed_study(
    checkpoint_path: Union[str, Path],
    seeds: int = 10,
    steps: Optional[int] = None,
    data_dir: Optional[Union[str, Path]] = None,
    workers: int = 1,
    on_seed: Progress = None
) -> dict:
    """
    Repeat held-out prediction under different sampling seeds.

    Returns:
        {"per_seed": [{"seed", "metrics"}], "summary": {metric: dispersion}}
    """
    if seeds < 2:
        raise ValueError(f"A seed study needs at least 2 seeds, got {seeds}")
    data_dir = _resolve_data_dir(checkpoint_path, data_dir)
    case_ids = _test_ids(data_dir)

    per_seed = []
    for seed in range(seeds):
        predictions = predict_volumes(checkpoint_path, case_ids, steps, seed, data_dir, workers)
        _, aggregate = evaluate_predictions(predictions, data_dir)
        metrics = {k: v["mean"] for k, v in aggregate.items() if v["mean"] is not None}
        per_seed.append({"seed": seed, "metrics": metrics})
        if on_seed:
            on_seed(seed + 1, seeds)

    keys = set(per_seed[0]["metrics"])
    for row in per_seed[1:]:
        keys &= set(row["metrics"])
    summary = {key: dispersion([row["metrics"][key] for row in per_seed]) for key in sorted(keys)}
    logger.info(f"Seed study over {seeds} seeds: MAE cv {summary['mae_gy']['cv']:.4f}")
    return {"per_seed": per_seed, "summary": summary}


def ablation_variant(config: RunConfig, conditioning: str, multi_scale: bool, fusion: bool) -> RunConfig:
    model = replace(config.model, multi_scale_fusion=multi_scale, fusion_former=fusion)
    return replace(config, model=model, conditioning=ConditioningMode(conditioning).value)


def variant_name(conditioning: str, multi_scale: bool, fusion: bool) -> str:
    return f"{conditioning}_ms{int(multi_scale)}_ff{int(fusion)}"


def ablate(
    config: RunConfig,
    out_dir: Union[str, Path],
    conditionings: Sequence[str] = tuple(m.value for m in ConditioningMode),
    multi_scale: Sequence[bool] = (True, False),
    fusion: Sequence[bool] = (True, False),
    workers: int = 1,
    on_variant: Progress = None
) -> dict:
    """
    Train, predict and evaluate every combination of conditioning mode, MS and FF.

    Args:
        config: Base run config
        out_dir: Receives one run directory per variant and summary.json
        conditionings: Subset of mask, isdm, psdm
        multi_scale: MS settings to cover
        fusion: FF settings to cover
        workers: Process-pool size for prediction

    Returns:
        Summary {variant: {"conditioning", "multi_scale", "fusion", "aggregate", "checkpoint"}}
    """
    out_dir = Path(out_dir)
    data_dir = Path(config.data.data_dir)
    case_ids = _test_ids(data_dir)
    grid = list(itertools.product(conditionings, multi_scale, fusion))
    summary = {}

    for done, (mode, ms, ff) in enumerate(grid, start=1):
        name = variant_name(mode, ms, ff)
        variant = ablation_variant(config, mode, ms, ff)
        logger.info(f"Ablation variant {name} ({done}/{len(grid)})")
        result = run_train(variant, out_dir / name, data_dir)
        checkpoint = result.best_checkpoint or result.last_checkpoint
        predictions = predict_volumes(checkpoint, case_ids, data_dir=data_dir, workers=workers)
        _, aggregate = evaluate_predictions(predictions, data_dir)
        summary[name] = {
            "conditioning": mode,
            "multi_scale": ms,
            "fusion": ff,
            "aggregate": aggregate,
            "checkpoint": str(checkpoint),
        }
        if on_variant:
            on_variant(done, len(grid))

    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / SUMMARY_NAME).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def mean_training_dose(data_dir: Union[str, Path]) -> float:
    """Mean dose over every body voxel of the training split."""
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir)
    train_ids = split_case_ids(manifest, "train")
    if not train_ids:
        raise ValueError(f"Dataset {data_dir} has no training cases")
    total, count = 0.0, 0
    for case_id in train_ids:
        case = load_case(data_dir, case_id, manifest)
        inside = case.body.values > 0
        total += float(case.dose.values[inside].sum(dtype=np.float64))
        count += int(inside.sum())
    return total / count


def baseline(data_dir: Union[str, Path], on_case: Progress = None) -> dict:
    """
    Evaluate the mean-dose predictor on the test split.

    Returns:
        {"mean_dose_gy", "aggregate"}
    """
    data_dir = Path(data_dir)
    level = mean_training_dose(data_dir)
    manifest = load_manifest(data_dir)
    predictions = {}
    for case_id in _test_ids(data_dir):
        case = load_case(data_dir, case_id, manifest)
        values = level * (case.body.values > 0)
        predictions[case_id] = Volume(values, case.ct.spacing_mm, VolumeKind.DOSE_GY)

    _, aggregate = evaluate_predictions(predictions, data_dir, on_case=on_case)
    logger.info(f"Mean-dose baseline {level:.2f} Gy: MAE {aggregate['mae_gy']['mean']:.3f} Gy")
    return {"mean_dose_gy": level, "aggregate": aggregate}
