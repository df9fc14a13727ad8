"""Slice-wise dose prediction for whole volumes from a trained checkpoint."""

import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..diffusion.sampler import sample
from ..diffusion.schedule import DdimPlan, NoiseSchedule, make_plan
from ..model.checkpoint import load_checkpoint, restore_model
from ..model.mmfnet import MMFNet
from ..volume.volume import Volume, VolumeKind, dose_from_unit, resample_slices
from ..volume.volume_io import write_volume
from .config import RunConfig
from .dataset import CaseData, load_case, load_manifest, prepare_case
from .train import schedule_from_config

logger = logging.getLogger(__name__)

PREDICT_BATCH = 16


def load_predictor(checkpoint_path: Union[str, Path]) -> Tuple[MMFNet, RunConfig]:
    """Restore the model and the run config it was trained with."""
    checkpoint = load_checkpoint(checkpoint_path)
    if checkpoint.run_config is None:
        raise RuntimeError(f"Checkpoint {checkpoint_path} carries no run config")
    config = RunConfig.from_dict(checkpoint.run_config)
    return restore_model(checkpoint), config


def volume_seed(seed: int, case_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, zlib.crc32(case_id.encode("utf-8"))])


def predict_case(
    model: MMFNet,
    config: RunConfig,
    case: CaseData,
    plan: DdimPlan,
    schedule: NoiseSchedule,
    seed: int,
    cache_dir: Optional[Path] = None
) -> Volume:
    """
    Sample every in-plane slice of one case and restack them as a dose volume.

    Args:
        model: Trained denoiser
        config: Run config the model was trained with
        case: Case conditions (CT, ROIs, body)
        plan: DDIM plan
        schedule: Noise schedule
        seed: Sampling seed; combined with the case id so each volume gets its own stream
        cache_dir: SDM cache directory for the case

    Returns:
        DOSE_GY volume on the case grid, zero outside the body
    """
    prepared = prepare_case(case, config, cache_dir)
    height, width, depth = prepared.ct.shape
    try:
        config.model.check_input_shape(height, width)
    except ValueError as e:
        logger.error(f"Case {case.case_id}: {e}")
        raise ValueError(f"Case {case.case_id}, slices 0..{depth - 1}: {e}") from e

    unit = np.full((height, width, depth), -1.0)
    slices = [k for k in range(depth) if prepared.body[:, :, k].any()]
    chunk_seeds = volume_seed(seed, case.case_id).spawn((len(slices) + PREDICT_BATCH - 1) // PREDICT_BATCH)

    for chunk, start in enumerate(range(0, len(slices), PREDICT_BATCH)):
        ks = slices[start:start + PREDICT_BATCH]
        x_ct = np.stack([prepared.ct[None, :, :, k] for k in ks])
        x_sdm = np.stack([prepared.sdm[:, :, :, k] for k in ks])
        try:
            y = sample(model, x_ct, x_sdm, plan, schedule, chunk_seeds[chunk], config.sampler.clip_denoised)
        except ValueError as e:
            logger.error(f"Sampling failed on {case.case_id} slices {ks[0]}..{ks[-1]}: {e}")
            raise ValueError(f"Case {case.case_id}, slice {ks[0]}: {e}") from e
        for row, k in enumerate(ks):
            unit[:, :, k] = y[row, 0]
        logger.debug(f"{case.case_id}: sampled slices {ks[0]}..{ks[-1]}")

    dose = dose_from_unit(unit)
    if prepared.crop_box is not None:
        box = prepared.crop_box
        box_shape = (box[0].stop - box[0].start, box[1].stop - box[1].start)
        full = np.zeros(case.ct.shape)
        full[box] = resample_slices(dose, box_shape)
        dose = full

    dose = np.clip(dose, 0.0, None) * (case.body.values > 0)
    return Volume(dose, case.ct.spacing_mm, VolumeKind.DOSE_GY)


def _predict_job(args) -> Tuple[str, Volume]:
    checkpoint_path, case_id, steps, seed, data_dir = args
    model, config = load_predictor(checkpoint_path)
    schedule = schedule_from_config(config)
    plan = make_plan(steps, schedule, config.sampler.sigma_rule, config.sampler.eta)
    case = load_case(data_dir, case_id)
    return case_id, predict_case(model, config, case, plan, schedule, seed, Path(data_dir) / case_id)


def predict_volumes(
    checkpoint_path: Union[str, Path],
    case_ids: Sequence[str],
    steps: Optional[int] = None,
    seed: Optional[int] = None,
    data_dir: Optional[Union[str, Path]] = None,
    workers: int = 1,
    on_case: Optional[Callable[[int, int], None]] = None
) -> Dict[str, Volume]:
    """
    Predict several cases, in parallel across cases when workers > 1.

    Args:
        checkpoint_path: Checkpoint manifest
        case_ids: Cases to predict
        steps: Generation steps S (defaults to the checkpoint's sampler config)
        seed: Sampling seed (defaults to the checkpoint's sampler config)
        data_dir: Dataset directory (defaults to the checkpoint's data config)
        workers: Process-pool size
        on_case: Progress callback (done, total)

    Returns:
        Predicted dose volumes by case id
    """
    model, config = load_predictor(checkpoint_path)
    steps = config.sampler.steps if steps is None else steps
    seed = config.sampler.seed if seed is None else seed
    data_dir = Path(data_dir or config.data.data_dir)
    if not case_ids:
        raise ValueError("No cases to predict")

    schedule = schedule_from_config(config)
    plan = make_plan(steps, schedule, config.sampler.sigma_rule, config.sampler.eta)
    manifest = load_manifest(data_dir)
    results: Dict[str, Volume] = {}
    started = time.time()

    if workers > 1:
        jobs = [(str(checkpoint_path), case_id, steps, seed, str(data_dir)) for case_id in case_ids]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for done, (case_id, volume) in enumerate(pool.map(_predict_job, jobs), start=1):
                results[case_id] = volume
                if on_case:
                    on_case(done, len(case_ids))
    else:
        for done, case_id in enumerate(case_ids, start=1):
            case = load_case(data_dir, case_id, manifest)
            results[case_id] = predict_case(model, config, case, plan, schedule, seed, data_dir / case_id)
            if on_case:
                on_case(done, len(case_ids))

    logger.info(f"Predicted {len(results)} volumes with S={steps} in {time.time() - started:.1f}s")
    return results


def write_predictions(predictions: Dict[str, Volume], out_dir: Union[str, Path]) -> List[Path]:
    out_dir = Path(out_dir)
    return [write_volume(volume, out_dir / f"{case_id}.json") for case_id, volume in predictions.items()]


def run_predict(
    checkpoint_path: Union[str, Path],
    case_id: str,
    steps: Optional[int] = None,
    seed: Optional[int] = None,
    data_dir: Optional[Union[str, Path]] = None,
    out: Optional[Union[str, Path]] = None
) -> Path:
    """
    Predict one case and write it as a volume file.

    Args:
        out: A .json header path, or a directory receiving <case_id>.json

    Returns:
        Path of the written header
    """
    volume = predict_volumes(checkpoint_path, [case_id], steps, seed, data_dir)[case_id]
    out = Path(out or ".")
    target = out if out.suffix == ".json" else out / f"{case_id}.json"
    path = write_volume(volume, target)
    logger.info(f"Wrote predicted dose for {case_id} to {path}")
    return path
