"""Run configuration: environment settings plus the JSON experiment config."""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Tuple, Union

from dotenv import load_dotenv

from ..diffusion.schedule import DEFAULT_ALPHA_1, DEFAULT_ALPHA_T, DEFAULT_STEPS, DEFAULT_T, SigmaRule
from ..model.config import ModelConfig
from ..sdm.distance_maps import ConditioningMode
from ..volume.phantom import DEFAULT_SHAPE, DEFAULT_SPACING_MM

load_dotenv()

logger = logging.getLogger(__name__)

DATA_DIR = os.getenv("DOSEDIFF_DATA_DIR", "data/phantoms")
RUNS_DIR = os.getenv("DOSEDIFF_RUNS_DIR", "runs")
LOG_LEVEL = os.getenv("DOSEDIFF_LOG_LEVEL", "INFO")

DEFAULT_LR = 1e-4
DEFAULT_BATCH = 8
DEFAULT_ITERATIONS = 20000
DEFAULT_PHANTOM_COUNT = 128
DEFAULT_SPLIT = (0.7, 0.1, 0.2)
SPLIT_TOLERANCE = 1e-9


def worker_count(deterministic: bool = False) -> int:
    """Process-pool size from DOSEDIFF_WORKERS; one lane when deterministic."""
    if deterministic:
        return 1
    try:
        return max(1, int(os.getenv("DOSEDIFF_WORKERS", "1")))
    except ValueError:
        logger.warning(f"Ignoring non-integer DOSEDIFF_WORKERS={os.getenv('DOSEDIFF_WORKERS')!r}")
        return 1


def _strict(cls, data: Optional[dict], section: str):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"Unknown keys in config section '{section}': {sorted(unknown)}")
    return cls(**data)


@dataclass
class ScheduleConfig:
    T: int = DEFAULT_T
    alpha1: float = DEFAULT_ALPHA_1
    alphaT: float = DEFAULT_ALPHA_T


@dataclass
class SamplerConfig:
    steps: int = DEFAULT_STEPS
    seed: int = 0
    sigma_rule: str = SigmaRule.ADJACENT.value
    eta: float = 1.0
    clip_denoised: bool = True


@dataclass
class TrainingConfig:
    lr: float = DEFAULT_LR
    batch: int = DEFAULT_BATCH
    iterations: int = DEFAULT_ITERATIONS
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    lr_step_decay: float = 0.5
    lr_step_fraction: float = 0.4
    loss_norm: str = "l1"
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 2000
    val_every: int = 500
    val_batch: int = 16
    augment_flip: bool = True
    augment_rotate: bool = True
    augment_zoom: bool = True
    augment_prob: float = 0.5
    zoom_range: Tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.zoom_range = tuple(self.zoom_range)


@dataclass
class DataConfig:
    phantom_count: int = DEFAULT_PHANTOM_COUNT
    split: Tuple[float, float, float] = DEFAULT_SPLIT
    data_dir: str = DATA_DIR
    shape: Tuple[int, int, int] = DEFAULT_SHAPE
    spacing_mm: Tuple[float, float, float] = DEFAULT_SPACING_MM
    oar_count: int = 2
    seed: int = 0
    crop_to_body: bool = False
    crop_margin: int = 2

    def __post_init__(self):
        self.split = tuple(float(s) for s in self.split)
        self.shape = tuple(int(n) for n in self.shape)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)


@dataclass
class RunConfig:
    """Complete experiment settings; every artifact records the config it was built with."""
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    conditioning: str = ConditioningMode.PSDM.value

    def __post_init__(self):
        self.validate()

    @property
    def roi_count(self) -> int:
        return 1 + self.data.oar_count

    def validate(self) -> None:
        if abs(sum(self.data.split) - 1.0) > SPLIT_TOLERANCE or len(self.data.split) != 3:
            raise ValueError(f"Split ratios must be three values summing to 1, got {self.data.split}")
        if min(self.data.split) < 0:
            raise ValueError(f"Split ratios must be non-negative, got {self.data.split}")
        if self.training.iterations < 1:
            raise ValueError(f"training.iterations must be >= 1, got {self.training.iterations}")
        if self.training.batch < 1:
            raise ValueError(f"training.batch must be >= 1, got {self.training.batch}")
        if self.training.loss_norm not in ("l1", "l2"):
            raise ValueError(f"training.loss_norm must be l1 or l2, got {self.training.loss_norm!r}")
        ConditioningMode(self.conditioning)
        SigmaRule(self.sampler.sigma_rule)
        if self.model.sdm_channels != self.roi_count:
            raise ValueError(
                f"model.sdm_channels={self.model.sdm_channels} must equal the ROI count "
                f"1 + data.oar_count = {self.roi_count}"
            )
        if self.sampler.steps > self.schedule.T:
            raise ValueError(f"sampler.steps={self.sampler.steps} exceeds schedule.T={self.schedule.T}")
        self.model.check_input_shape(self.data.shape[0], self.data.shape[1])

    def to_dict(self) -> dict:
        data = {
            "schedule": asdict(self.schedule),
            "sampler": asdict(self.sampler),
            "model": self.model.to_dict(),
            "training": asdict(self.training),
            "data": asdict(self.data),
            "conditioning": self.conditioning,
        }
        for section in ("training", "data"):
            data[section] = {k: list(v) if isinstance(v, tuple) else v for k, v in data[section].items()}
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        sections = {"schedule", "sampler", "model", "training", "data", "conditioning"}
        unknown = set(data) - sections
        if unknown:
            raise ValueError(f"Unknown config sections: {sorted(unknown)}")
        return cls(
            schedule=_strict(ScheduleConfig, data.get("schedule"), "schedule"),
            sampler=_strict(SamplerConfig, data.get("sampler"), "sampler"),
            model=ModelConfig.from_dict(data.get("model", {})),
            training=_strict(TrainingConfig, data.get("training"), "training"),
            data=_strict(DataConfig, data.get("data"), "data"),
            conditioning=data.get("conditioning", ConditioningMode.PSDM.value),
        )


def load_run_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """Load a RunConfig from JSON; defaults when no path is given."""
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        logger.error(f"Malformed config {path}: {e}")
        raise ValueError(f"Malformed config {path}: {e}") from e
    return RunConfig.from_dict(data)


def save_run_config(config: RunConfig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
