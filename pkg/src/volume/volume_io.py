"""Volume file format: JSON header plus raw little-endian float32 payload."""

import json
import logging
from pathlib import Path
from typing import Union

import numpy as np

from .volume import Volume, VolumeKind

logger = logging.getLogger(__name__)

PAYLOAD_DTYPE = "f32le"
_NUMPY_PAYLOAD = np.dtype("<f4")


def write_volume(volume: Volume, header_path: Union[str, Path]) -> Path:
    """
    Write a volume as <name>.json header and <name>.raw payload.

    Args:
        volume: Volume to store; values are written as float32 in (i, j, k) order, k fastest
        header_path: Destination of the JSON header

    Returns:
        Path of the written header
    """
    header_path = Path(header_path)
    if header_path.suffix != ".json":
        header_path = header_path.with_suffix(".json")
    raw_path = header_path.with_suffix(".raw")
    header_path.parent.mkdir(parents=True, exist_ok=True)

    header = {
        "shape": [int(n) for n in volume.shape],
        "spacing_mm": [float(s) for s in volume.spacing_mm],
        "kind": volume.kind.value,
        "dtype": PAYLOAD_DTYPE,
        "data_file": raw_path.name,
    }

    try:
        payload = np.ascontiguousarray(volume.values, dtype=_NUMPY_PAYLOAD)
        raw_path.write_bytes(payload.tobytes(order="C"))
        header_path.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        logger.error(f"Failed to write volume {header_path}: {e}")
        raise

    logger.debug(f"Wrote {volume.kind.value} volume {volume.shape} to {header_path}")
    return header_path


def read_volume(header_path: Union[str, Path]) -> Volume:
    """Read a volume written by write_volume; values come back as float32."""
    header_path = Path(header_path)
    if not header_path.exists():
        raise FileNotFoundError(f"Volume header not found: {header_path}")

    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as e:
        logger.error(f"Malformed volume header {header_path}: {e}")
        raise RuntimeError(f"Malformed volume header {header_path}: {e}") from e

    if header.get("dtype") != PAYLOAD_DTYPE:
        raise RuntimeError(f"Unsupported payload dtype {header.get('dtype')!r} in {header_path}")

    shape = tuple(int(n) for n in header["shape"])
    raw_path = header_path.parent / header["data_file"]
    payload = np.frombuffer(raw_path.read_bytes(), dtype=_NUMPY_PAYLOAD)
    if payload.size != int(np.prod(shape)):
        raise RuntimeError(
            f"Payload {raw_path} holds {payload.size} values, header shape {shape} needs {int(np.prod(shape))}"
        )

    values = payload.reshape(shape).astype(np.float32)
    return Volume(values, tuple(header["spacing_mm"]), VolumeKind(header["kind"]))
