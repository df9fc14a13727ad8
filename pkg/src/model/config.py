"""Architecture configuration for the multi-encoder fusion denoiser."""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Tuple

logger = logging.getLogger(__name__)

DEFAULT_BASE_CHANNELS = 32
DEFAULT_LEVELS = 4
DEFAULT_RES_BLOCKS = 2
DEFAULT_CHANNEL_MULT = (1, 2, 2, 4)
DEFAULT_EMBED_DIM = 64
DEFAULT_GROUPS = 8
PATCH = (2, 2)


@dataclass
class ModelConfig:
    """
    Channel plan, block counts and ablation toggles.

    multi_scale_fusion sums CT/SDM encoder features into the y_t path at every level;
    with it off the conditions are concatenated with y_t at the input instead.
    fusion_former enables the bottleneck attention block.
    """
    base_channels: int = DEFAULT_BASE_CHANNELS
    levels: int = DEFAULT_LEVELS
    res_blocks_per_level: int = DEFAULT_RES_BLOCKS
    channel_mult: Tuple[int, ...] = DEFAULT_CHANNEL_MULT
    sdm_channels: int = 3
    ct_channels: int = 1
    dose_channels: int = 1
    patch: Tuple[int, int] = PATCH
    timestep_embed_dim: int = DEFAULT_EMBED_DIM
    groups: int = DEFAULT_GROUPS
    multi_scale_fusion: bool = True
    fusion_former: bool = True
    swap_query_key: bool = False
    scale_attention: bool = False
    zero_init_residual: bool = False
    seed: int = 0

    def __post_init__(self):
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        self.patch = tuple(int(p) for p in self.patch)
        self.validate()

    def validate(self) -> None:
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if len(self.channel_mult) != self.levels:
            raise ValueError(
                f"channel_mult {self.channel_mult} must have one entry per level ({self.levels})"
            )
        if self.res_blocks_per_level < 1:
            raise ValueError(f"res_blocks_per_level must be >= 1, got {self.res_blocks_per_level}")
        if self.patch != PATCH:
            raise ValueError(f"Patch size is fixed at {PATCH}, got {self.patch}")
        if self.sdm_channels < 1:
            raise ValueError(f"sdm_channels must be >= 1, got {self.sdm_channels}")
        if self.timestep_embed_dim < 2 or self.timestep_embed_dim % 2:
            raise ValueError(f"timestep_embed_dim must be even and >= 2, got {self.timestep_embed_dim}")
        for width in self.widths:
            if width % self.groups:
                raise ValueError(f"{self.groups} groups do not divide level width {width}")

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_mult)

    @property
    def spatial_divisor(self) -> int:
        """Input extents must be multiples of this; the 2x2 patching needs one extra halving."""
        return 2 ** (self.levels + (1 if self.fusion_former else 0))

    def check_input_shape(self, height: int, width: int) -> None:
        divisor = self.spatial_divisor
        if height % divisor or width % divisor:
            raise ValueError(
                f"Slice shape {height}x{width} is not divisible by {divisor} "
                f"(levels={self.levels}, fusion_former={self.fusion_former})"
            )

    def to_dict(self) -> dict:
        data = asdict(self)
        data["channel_mult"] = list(self.channel_mult)
        data["patch"] = list(self.patch)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"Unknown model config keys: {sorted(unknown)}")
        return cls(**data)
