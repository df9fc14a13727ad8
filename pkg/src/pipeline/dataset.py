"""Synthetic dataset on disk: phantom cases, the dataset manifest and conditioning stacks."""

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from ..sdm.distance_maps import ConditioningMode, build_stack
from ..volume.phantom import PhantomSpec, phantom_generate, random_phantom_spec
from ..volume.volume import (
    Volume,
    VolumeKind,
    body_bounding_box,
    crop_to_body,
    ct_to_unit,
    dose_to_unit,
    resample_bilinear,
)
from ..volume.volume_io import read_volume, write_volume
from .config import DataConfig, RunConfig

logger = logging.getLogger(__name__)

MANIFEST_NAME = "dataset.json"
SPLITS = ("train", "val", "test")

# Body ellipsoid semi-axes as fractions of the grid extent
BODY_FRACTIONS = (0.45, 0.36, 0.93)


class CaseData(NamedTuple):
    case_id: str
    ct: Volume
    dose: Volume
    body: Volume
    rois: List[Volume]
    roi_names: List[str]
    prescription_gy: float


class PreparedCase(NamedTuple):
    """Model-ready arrays on the (possibly cropped and resized) training grid."""
    case_id: str
    ct: np.ndarray
    dose: np.ndarray
    sdm: np.ndarray
    body: np.ndarray
    crop_box: Optional[Tuple[slice, slice, slice]]


def case_id_for(index: int) -> str:
    return f"case_{index:03d}"


def base_phantom_spec(data: DataConfig, seed: int) -> PhantomSpec:
    extent = [(n - 1) * s for n, s in zip(data.shape, data.spacing_mm)]
    return PhantomSpec(
        seed=seed,
        shape=tuple(data.shape),
        spacing_mm=tuple(data.spacing_mm),
        body_center_mm=tuple(e / 2.0 for e in extent),
        body_semi_axes_mm=tuple(f * e for f, e in zip(BODY_FRACTIONS, extent)),
        target_center_mm=tuple(e / 2.0 for e in extent),
        oar_count=data.oar_count,
    )


def assign_splits(count: int, ratios: Sequence[float], seed: int) -> Dict[int, str]:
    """Seeded patient-wise split; train and val sizes are rounded, test takes the rest."""
    order = np.random.default_rng([seed, 104729]).permutation(count)
    n_train = int(round(ratios[0] * count))
    n_val = int(round(ratios[1] * count))
    splits = {}
    for position, index in enumerate(order):
        if position < n_train:
            splits[int(index)] = "train"
        elif position < n_train + n_val:
            splits[int(index)] = "val"
        else:
            splits[int(index)] = "test"
    return splits


def _write_case(args) -> dict:
    index, data_dict, out_dir = args
    data = DataConfig(**data_dict)
    case_id = case_id_for(index)
    spec = random_phantom_spec(data.seed * 100003 + index, base_phantom_spec(data, index))
    phantom = phantom_generate(spec)

    case_dir = Path(out_dir) / case_id
    write_volume(phantom.ct, case_dir / "ct.json")
    write_volume(phantom.dose, case_dir / "dose.json")
    write_volume(phantom.body, case_dir / "body.json")
    for name, roi in zip(phantom.roi_names, phantom.rois):
        write_volume(roi, case_dir / f"roi_{name}.json")

    return {
        "id": case_id,
        "prescription_gy": spec.prescribed_dose_gy,
        "roi_names": phantom.roi_names,
        "spacing_mm": list(spec.spacing_mm),
        "spec": spec.to_dict(),
    }


def generate_dataset(
    config: RunConfig,
    out_dir: Optional[Union[str, Path]] = None,
    workers: int = 1,
    on_case: Optional[Callable[[int, int], None]] = None
) -> Path:
    """
    Synthesize phantom cases and write them with a dataset manifest.

    Args:
        config: Run config; its data section sets count, grid, split and seed
        out_dir: Destination (defaults to data.data_dir)
        workers: Process-pool size; 1 runs in-process
        on_case: Progress callback (done, total)

    Returns:
        Path of the written manifest
    """
    data = config.data
    out_dir = Path(out_dir or data.data_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    count = data.phantom_count
    if count < 1:
        raise ValueError(f"phantom_count must be >= 1, got {count}")

    data_dict = {k: (list(v) if isinstance(v, tuple) else v) for k, v in config.to_dict()["data"].items()}
    jobs = [(index, data_dict, str(out_dir)) for index in range(count)]
    cases = []
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for done, record in enumerate(pool.map(_write_case, jobs), start=1):
                    cases.append(record)
                    if on_case:
                        on_case(done, count)
        else:
            for done, job in enumerate(jobs, start=1):
                cases.append(_write_case(job))
                if on_case:
                    on_case(done, count)
    except (OSError, RuntimeError, ValueError) as e:
        logger.error(f"Phantom generation failed in {out_dir}: {e}")
        raise

    splits = assign_splits(count, data.split, data.seed)
    for index, record in enumerate(cases):
        record["split"] = splits[index]

    manifest = {
        "cases": cases,
        "roi_names": cases[0]["roi_names"],
        "config": config.to_dict(),
    }
    manifest_path = out_dir / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    counts = {s: sum(1 for c in cases if c["split"] == s) for s in SPLITS}
    logger.info(f"Wrote {count} phantom cases to {out_dir} (split {counts})")
    return manifest_path


def load_manifest(data_dir: Union[str, Path]) -> dict:
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"Dataset manifest not found: {path} (run phantom-gen first)")
    return json.loads(path.read_text())


def split_case_ids(manifest: dict, split: str) -> List[str]:
    if split not in SPLITS:
        raise ValueError(f"Unknown split {split!r}; expected one of {SPLITS}")
    return [case["id"] for case in manifest["cases"] if case["split"] == split]


def _case_record(manifest: dict, case_id: str) -> dict:
    for case in manifest["cases"]:
        if case["id"] == case_id:
            return case
    raise ValueError(f"Case {case_id!r} is not in the dataset manifest")


def load_case(data_dir: Union[str, Path], case_id: str, manifest: Optional[dict] = None) -> CaseData:
    """Read one case's volumes in the manifest's ROI order."""
    manifest = manifest or load_manifest(data_dir)
    record = _case_record(manifest, case_id)
    case_dir = Path(data_dir) / case_id
    rois = [read_volume(case_dir / f"roi_{name}.json") for name in record["roi_names"]]
    return CaseData(
        case_id=case_id,
        ct=read_volume(case_dir / "ct.json"),
        dose=read_volume(case_dir / "dose.json"),
        body=read_volume(case_dir / "body.json"),
        rois=rois,
        roi_names=list(record["roi_names"]),
        prescription_gy=float(record["prescription_gy"]),
    )


def conditioning_stack(case: CaseData, mode: Union[str, ConditioningMode], cache_dir: Optional[Path] = None) -> np.ndarray:
    """
    Per-ROI conditioning maps (C, i, j, k) for a case, cached as SDM volumes when cache_dir is set.
    """
    mode = ConditioningMode(mode)
    if cache_dir is not None:
        paths = [Path(cache_dir) / f"{mode.value}_{name}.json" for name in case.roi_names]
        if all(p.exists() for p in paths):
            return np.stack([read_volume(p).values.astype(np.float64) for p in paths])

    stack = build_stack(case.rois, case.ct.spacing_mm, case.roi_names, mode)
    if cache_dir is not None:
        for path, sdm in zip(paths, stack.maps):
            write_volume(sdm.to_volume(case.ct.spacing_mm), path)
        # Round through float32 so fresh and cached stacks agree bit for bit
        return np.stack([m.values.astype(np.float32).astype(np.float64) for m in stack.maps])
    return stack.as_array()


def write_sdm_files(rois_dir: Union[str, Path], out_dir: Union[str, Path], mode: str = "psdm",
                    spacing_mm: Optional[Sequence[float]] = None) -> List[Path]:
    """
    Convert every roi_<name>.json mask in a directory into an SDM volume file.

    Args:
        rois_dir: Directory holding ROI mask volumes
        out_dir: Destination directory
        mode: psdm, isdm or mask
        spacing_mm: Override spacing; None uses each mask's own ("auto")

    Returns:
        Written header paths in ROI name order
    """
    rois_dir, out_dir = Path(rois_dir), Path(out_dir)
    headers = sorted(rois_dir.glob("roi_*.json"))
    if not headers:
        raise FileNotFoundError(f"No roi_*.json mask volumes in {rois_dir}")

    masks = [read_volume(h) for h in headers]
    names = [h.stem[len("roi_"):] for h in headers]
    stack = build_stack(masks, spacing_mm, names, ConditioningMode(mode))
    written = []
    for name, sdm, mask in zip(names, stack.maps, masks):
        spacing = spacing_mm if spacing_mm is not None else mask.spacing_mm
        written.append(write_volume(sdm.to_volume(spacing), out_dir / f"sdm_{name}.json"))
    logger.info(f"Wrote {len(written)} {mode} maps to {out_dir}")
    return written


def _resize_planes(values: np.ndarray, spacing, shape: Tuple[int, int], kind: VolumeKind) -> np.ndarray:
    return resample_bilinear(Volume(values, spacing, kind), shape).values


def prepare_case(case: CaseData, config: RunConfig, cache_dir: Optional[Path] = None) -> PreparedCase:
    """
    Normalize CT and dose to [-1, 1] and attach the conditioning stack.

    With data.crop_to_body set, every array is cropped to the body box and resized in-plane
    back to the configured grid.
    """
    sdm = conditioning_stack(case, config.conditioning, cache_dir)
    ct = ct_to_unit(case.ct.values)
    dose = dose_to_unit(np.maximum(case.dose.values, 0.0))
    body = (case.body.values > 0).astype(np.float64)

    box = None
    if config.data.crop_to_body:
        box = body_bounding_box(case.body, config.data.crop_margin)
        spacing = case.ct.spacing_mm
        target = tuple(config.data.shape[:2])
        cropped = crop_to_body(
            {"ct": Volume(ct, spacing, VolumeKind.NORMALIZED),
             "dose": Volume(dose, spacing, VolumeKind.NORMALIZED)},
            case.body, config.data.crop_margin,
        )
        ct = _resize_planes(cropped["ct"].values, spacing, target, VolumeKind.NORMALIZED)
        dose = _resize_planes(cropped["dose"].values, spacing, target, VolumeKind.NORMALIZED)
        body = _resize_planes(body[box], spacing, target, VolumeKind.MASK)
        masks = ConditioningMode(config.conditioning) == ConditioningMode.MASK
        sdm_kind = VolumeKind.MASK if masks else VolumeKind.SDM_DM
        sdm = np.stack([_resize_planes(channel[box], spacing, target, sdm_kind) for channel in sdm])

    return PreparedCase(case.case_id, ct, dose, sdm, body, box)


class SliceDataset:
    """In-plane (k) slices of prepared cases, sampled into NCHW batches."""

    def __init__(self, cases: Sequence[PreparedCase]):
        if not cases:
            raise ValueError("SliceDataset needs at least one case")
        self.cases = list(cases)
        self.index = [
            (c, k)
            for c, case in enumerate(self.cases)
            for k in range(case.ct.shape[2])
            if case.body[:, :, k].any()
        ]
        if not self.index:
            raise ValueError("No slice intersects a body mask")

    def __len__(self) -> int:
        return len(self.index)

    def get(self, position: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(dose (H, W), ct (H, W), sdm (C, H, W)) for one slice."""
        c, k = self.index[position]
        case = self.cases[c]
        return case.dose[:, :, k], case.ct[:, :, k], case.sdm[:, :, :, k]

    def batch(self, positions: Sequence[int], augmenter=None, rng: Optional[np.random.Generator] = None):
        """Stack slices into (y0, x_ct, x_sdm) arrays, optionally augmenting each one."""
        doses, cts, sdms = [], [], []
        for position in positions:
            dose, ct, sdm = self.get(int(position))
            if augmenter is not None:
                dose, ct, sdm = augmenter(dose, ct, sdm, rng)
            doses.append(dose[None])
            cts.append(ct[None])
            sdms.append(sdm)
        return np.stack(doses), np.stack(cts), np.stack(sdms)
