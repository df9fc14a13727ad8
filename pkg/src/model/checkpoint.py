"""Checkpoint format: JSON manifest plus one raw little-endian float32 blob."""

import json
import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from ..tensor.optim import AdamW
from .config import ModelConfig
from .mmfnet import MMFNet

logger = logging.getLogger(__name__)

BLOB_DTYPE = np.dtype("<f4")
OPTIMIZER_PREFIX = "adam."


@dataclass
class Checkpoint:
    """Model weights, optimizer moments, iteration counter and the run config snapshot."""
    model_config: ModelConfig
    tensors: "OrderedDict[str, np.ndarray]"
    iteration: int = 0
    optimizer_step: int = 0
    run_config: Optional[dict] = None
    extra: Dict[str, float] = field(default_factory=dict)

    def model_state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v) for k, v in self.tensors.items() if not k.startswith(OPTIMIZER_PREFIX))

    def optimizer_state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v) for k, v in self.tensors.items() if k.startswith(OPTIMIZER_PREFIX))


def checkpoint_from_model(
    model: MMFNet,
    optimizer: Optional[AdamW] = None,
    iteration: int = 0,
    run_config: Optional[dict] = None,
    extra: Optional[Dict[str, float]] = None
) -> Checkpoint:
    """Snapshot a model (and optionally its optimizer) as float32 arrays."""
    tensors = OrderedDict((name, np.asarray(value, dtype=np.float32)) for name, value in model.state_dict().items())
    step = 0
    if optimizer is not None:
        for name, value in optimizer.state_dict().items():
            tensors[name] = np.asarray(value, dtype=np.float32)
        step = optimizer.step_count
    return Checkpoint(model.config, tensors, iteration, step, run_config, dict(extra or {}))


def save_checkpoint(checkpoint: Checkpoint, manifest_path: Union[str, Path]) -> Path:
    """
    Write <name>.json and <name>.bin.

    Args:
        checkpoint: Checkpoint to store
        manifest_path: Destination of the JSON manifest

    Returns:
        Path of the manifest
    """
    manifest_path = Path(manifest_path)
    if manifest_path.suffix != ".json":
        manifest_path = manifest_path.with_suffix(".json")
    blob_path = manifest_path.with_suffix(".bin")
    manifest_path.parent.mkdir(parents=True, exist_ok=True)

    entries = []
    chunks = []
    offset = 0
    for name, value in checkpoint.tensors.items():
        array = np.ascontiguousarray(value, dtype=BLOB_DTYPE)
        entries.append({"name": name, "shape": [int(n) for n in array.shape], "offset": offset, "len": int(array.size)})
        chunks.append(array.tobytes(order="C"))
        offset += int(array.size)

    manifest = {
        "config": checkpoint.model_config.to_dict(),
        "tensors": entries,
        "data_file": blob_path.name,
        "iteration": int(checkpoint.iteration),
        "optimizer_step": int(checkpoint.optimizer_step),
        "run_config": checkpoint.run_config,
        "extra": checkpoint.extra,
    }

    try:
        blob_path.write_bytes(b"".join(chunks))
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        logger.error(f"Failed to write checkpoint {manifest_path}: {e}")
        raise

    logger.info(f"Saved checkpoint at iteration {checkpoint.iteration} to {manifest_path}")
    return manifest_path


def load_checkpoint(manifest_path: Union[str, Path]) -> Checkpoint:
    """Read a checkpoint written by save_checkpoint."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"Checkpoint manifest not found: {manifest_path}")

    try:
        manifest = json.loads(manifest_path.read_text())
        blob = np.frombuffer((manifest_path.parent / manifest["data_file"]).read_bytes(), dtype=BLOB_DTYPE)
    except (json.JSONDecodeError, KeyError, OSError) as e:
        logger.error(f"Unreadable checkpoint {manifest_path}: {e}")
        raise RuntimeError(f"Unreadable checkpoint {manifest_path}: {e}") from e

    tensors = OrderedDict()
    for entry in manifest["tensors"]:
        start, length = int(entry["offset"]), int(entry["len"])
        if start + length > blob.size or length != int(np.prod(entry["shape"], dtype=np.int64)):
            raise RuntimeError(f"Checkpoint entry {entry['name']} is inconsistent with its blob")
        tensors[entry["name"]] = blob[start:start + length].reshape(entry["shape"]).copy()

    return Checkpoint(
        model_config=ModelConfig.from_dict(manifest["config"]),
        tensors=tensors,
        iteration=int(manifest.get("iteration", 0)),
        optimizer_step=int(manifest.get("optimizer_step", 0)),
        run_config=manifest.get("run_config"),
        extra=manifest.get("extra", {}),
    )


def restore_model(checkpoint: Checkpoint) -> MMFNet:
    """Build the network from the stored config and load its weights."""
    model = MMFNet(checkpoint.model_config)
    try:
        model.load_state_dict(checkpoint.model_state())
    except ValueError as e:
        logger.error(f"Checkpoint weights do not match the stored config: {e}")
        raise RuntimeError(f"Inconsistent checkpoint: {e}") from e
    return model


def restore_optimizer(checkpoint: Checkpoint, optimizer: AdamW) -> None:
    state = checkpoint.optimizer_state()
    if not state:
        raise RuntimeError("Checkpoint carries no optimizer state")
    optimizer.load_state_dict(state, checkpoint.optimizer_step)
