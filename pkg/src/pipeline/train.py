"""Training loop: AdamW on the noise-prediction objective with step-decay learning rate."""

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Union

import numpy as np

from ..diffusion.sampler import training_loss
from ..diffusion.schedule import NoiseSchedule, make_linear_schedule
from ..model.checkpoint import (
    checkpoint_from_model,
    load_checkpoint,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)
from ..model.mmfnet import MMFNet
from ..tensor.optim import AdamW, StepDecay
from ..tensor.tensor import Tape, backward
from .augment import SliceAugmenter
from .config import RunConfig, save_run_config
from .dataset import SliceDataset, load_case, load_manifest, prepare_case, split_case_ids

logger = logging.getLogger(__name__)

LOSS_LOG_NAME = "loss.csv"
BEST_NAME = "best.json"
LAST_NAME = "last.json"
BEST_VAL_KEY = "best_val_loss"
VAL_STREAM = 1
VAL_NOISE_STREAM = 2


@dataclass
class TrainResult:
    last_checkpoint: Path
    best_checkpoint: Optional[Path]
    losses: List[float] = field(default_factory=list)
    val_losses: List[float] = field(default_factory=list)
    seconds: float = 0.0


def schedule_from_config(config: RunConfig) -> NoiseSchedule:
    s = config.schedule
    return make_linear_schedule(s.T, s.alpha1, s.alphaT)


def load_split(config: RunConfig, split: str, data_dir: Optional[Union[str, Path]] = None) -> SliceDataset:
    """Prepare every case of a split as a slice dataset."""
    data_dir = Path(data_dir or config.data.data_dir)
    manifest = load_manifest(data_dir)
    case_ids = split_case_ids(manifest, split)
    if not case_ids:
        raise ValueError(f"Split {split!r} of {data_dir} holds no cases")

    prepared = []
    for case_id in case_ids:
        case = load_case(data_dir, case_id, manifest)
        if len(case.rois) != config.roi_count:
            raise ValueError(f"Case {case_id} has {len(case.rois)} ROIs, config expects {config.roi_count}")
        prepared.append(prepare_case(case, config, cache_dir=data_dir / case_id))
    logger.info(f"Loaded {len(prepared)} {split} cases from {data_dir}")
    return SliceDataset(prepared)


def _validation_batch(val_set: SliceDataset, config: RunConfig):
    rng = np.random.default_rng([config.training.seed, VAL_STREAM])
    size = min(config.training.val_batch, len(val_set))
    positions = rng.choice(len(val_set), size=size, replace=False)
    return val_set.batch(np.sort(positions))


def validation_loss(model: MMFNet, batch, schedule: NoiseSchedule, config: RunConfig) -> float:
    """Loss on a fixed batch with fixed timesteps and noise."""
    rng = np.random.default_rng([config.training.seed, VAL_NOISE_STREAM])
    y0, x_ct, x_sdm = batch
    return training_loss(model, y0, x_ct, x_sdm, schedule, rng, config.training.loss_norm).item()


def _best_extra(best_val: float) -> dict:
    return {BEST_VAL_KEY: best_val} if math.isfinite(best_val) else {}


def run_train(
    config: RunConfig,
    out_dir: Union[str, Path],
    data_dir: Optional[Union[str, Path]] = None,
    resume: Optional[Union[str, Path]] = None,
    on_iteration: Optional[Callable[[int, int, float], None]] = None
) -> TrainResult:
    """
    Train the denoiser and write checkpoints plus a loss log.

    Args:
        config: Run config
        out_dir: Run directory for checkpoints, loss.csv and config.json
        data_dir: Dataset directory (defaults to data.data_dir)
        resume: Checkpoint manifest to continue from
        on_iteration: Progress callback (iteration, total, loss)

    Returns:
        TrainResult with the last and best checkpoint paths and the loss curve
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_run_config(config, out_dir / "config.json")
    tc = config.training

    train_set = load_split(config, "train", data_dir)
    try:
        val_set = load_split(config, "val", data_dir)
        val_batch = _validation_batch(val_set, config)
    except ValueError as e:
        logger.warning(f"Validation disabled: {e}")
        val_batch = None

    schedule = schedule_from_config(config)
    augmenter = SliceAugmenter(tc, config.conditioning)

    start = 0
    best_val = math.inf
    result = TrainResult(last_checkpoint=out_dir / LAST_NAME, best_checkpoint=None)
    if resume is not None:
        checkpoint = load_checkpoint(resume)
        model = restore_model(checkpoint)
        optimizer = AdamW(list(model.named_parameters()), tc.lr, tc.betas, tc.weight_decay)
        restore_optimizer(checkpoint, optimizer)
        start = checkpoint.iteration
        best_val = checkpoint.extra.get(BEST_VAL_KEY, math.inf)
        if (out_dir / BEST_NAME).exists():
            best_val = min(best_val, load_checkpoint(out_dir / BEST_NAME).extra.get("val_loss", math.inf))
            result.best_checkpoint = out_dir / BEST_NAME
        logger.info(f"Resuming from {resume} at iteration {start}")
    else:
        model = MMFNet(config.model)
        optimizer = AdamW(list(model.named_parameters()), tc.lr, tc.betas, tc.weight_decay)

    lr_schedule = StepDecay(tc.lr, max(1, int(round(tc.lr_step_fraction * tc.iterations))), tc.lr_step_decay)
    logger.info(
        f"Training {model.num_parameters()} parameters on {len(train_set)} slices "
        f"for {tc.iterations} iterations"
    )

    log_path = out_dir / LOSS_LOG_NAME
    started = time.time()

    with open(log_path, "a" if start else "w", newline="") as log_file:
        writer = csv.writer(log_file)
        if not start:
            writer.writerow(["iteration", "loss", "lr", "val_loss"])

        for iteration in range(start, tc.iterations):
            rng = np.random.default_rng([tc.seed, iteration])
            positions = rng.integers(0, len(train_set), size=tc.batch)
            y0, x_ct, x_sdm = train_set.batch(positions, augmenter if augmenter.enabled else None, rng)

            lr = lr_schedule(iteration)
            with Tape() as tape:
                loss = training_loss(model, y0, x_ct, x_sdm, schedule, rng, tc.loss_norm)
                value = loss.item()
                if not math.isfinite(value):
                    logger.error(f"Non-finite loss {value} at iteration {iteration}")
                    raise RuntimeError(f"Non-finite loss {value} at iteration {iteration}")
                gradients = backward(loss, tape)
            optimizer.step(gradients, lr)
            tape.clear()
            result.losses.append(value)

            step = iteration + 1
            val_value = None
            if val_batch is not None and (step % tc.val_every == 0 or step == tc.iterations):
                val_value = validation_loss(model, val_batch, schedule, config)
                result.val_losses.append(val_value)
                if val_value < best_val:
                    best_val = val_value
                    checkpoint = checkpoint_from_model(model, optimizer, step, config.to_dict(), {"val_loss": val_value})
                    result.best_checkpoint = save_checkpoint(checkpoint, out_dir / BEST_NAME)

            writer.writerow([step, repr(value), repr(lr), "" if val_value is None else repr(val_value)])

            if step % tc.log_every == 0:
                logger.info(f"Iteration {step}/{tc.iterations}: loss {value:.4f}, lr {lr:.2e}")
            if step % tc.checkpoint_every == 0 and step != tc.iterations:
                save_checkpoint(checkpoint_from_model(model, optimizer, step, config.to_dict(), _best_extra(best_val)),
                                out_dir / f"ckpt_{step:06d}.json")
            if on_iteration:
                on_iteration(step, tc.iterations, value)

    final = checkpoint_from_model(model, optimizer, tc.iterations, config.to_dict(), _best_extra(best_val))
    result.last_checkpoint = save_checkpoint(final, out_dir / LAST_NAME)
    result.seconds = time.time() - started
    logger.info(f"Training finished in {result.seconds:.1f}s; loss log at {log_path}")
    return result
