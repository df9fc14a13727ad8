"""Multi-encoder, multi-scale fusion denoiser eps_theta(y_t, x_ct, x_sdm, t)."""

import logging
from typing import List, Optional

import numpy as np

from ..tensor import ops
from ..tensor.module import Conv2d, GroupNorm, Module, ModuleList
from ..tensor.tensor import Tensor
from .blocks import Downsample, FusionFormer, ResBlock, TimestepEmbedding, Upsample, multi_scale_fuse
from .config import ModelConfig

logger = logging.getLogger(__name__)


class Encoder(Module):
    """Input convolution, then per level R Res-blocks and a stride-2 downsample."""

    def __init__(self, in_channels: int, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        widths = config.widths
        self.stem = Conv2d(in_channels, widths[0], 3, rng)
        self.stages = ModuleList()
        self.downs = ModuleList()

        current = widths[0]
        for width in widths:
            blocks = ModuleList()
            for _ in range(config.res_blocks_per_level):
                blocks.append(ResBlock(current, width, config.timestep_embed_dim, config.groups, rng,
                                       zero_init=config.zero_init_residual))
                current = width
            self.stages.append(blocks)
            self.downs.append(Downsample(width, rng))

    def run_level(self, level: int, f: Tensor, emb: Tensor) -> Tensor:
        for block in self.stages[level]:
            f = block(f, emb)
        return f


class Decoder(Module):
    """Per level: upsample, concatenate the fused skip, R Res-blocks; then a 1-channel head."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        widths = config.widths
        self.ups = ModuleList()
        self.stages = ModuleList()

        current = widths[-1]
        for width in reversed(widths):
            self.ups.append(Upsample(current, width, rng))
            blocks = ModuleList()
            incoming = 2 * width
            for _ in range(config.res_blocks_per_level):
                blocks.append(ResBlock(incoming, width, config.timestep_embed_dim, config.groups, rng,
                                       zero_init=config.zero_init_residual))
                incoming = width
            self.stages.append(blocks)
            current = width

        self.out_norm = GroupNorm(config.groups, widths[0])
        self.out_conv = Conv2d(widths[0], config.dose_channels, 3, rng)

    def forward(self, f: Tensor, skips: List[Tensor], emb: Tensor) -> Tensor:
        for up, blocks, skip in zip(self.ups, self.stages, reversed(skips)):
            f = ops.concat([up(f), skip], axis=1)
            for block in blocks:
                f = block(f, emb)
        return self.out_conv(ops.silu(self.out_norm(f)))


class MMFNet(Module):
    """
    Three encoders (y_t, CT, SDM stack) fused by summation at every level, a fusionFormer
    bottleneck and a single decoder fed by the fused skips.

    Ablations: with multi_scale_fusion off the conditions are concatenated to y_t at the input
    and the CT/SDM encoders only run when the fusionFormer needs their bottleneck features.
    With fusion_former off the bottleneck passes the y_t features through.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        widths = config.widths

        self.time_embed = TimestepEmbedding(config.timestep_embed_dim, rng)

        y_in = config.dose_channels
        if not config.multi_scale_fusion:
            y_in += config.ct_channels + config.sdm_channels
        self.y_encoder = Encoder(y_in, config, rng)

        self.uses_condition_encoders = config.multi_scale_fusion or config.fusion_former
        if self.uses_condition_encoders:
            self.ct_encoder = Encoder(config.ct_channels, config, rng)
            self.sdm_encoder = Encoder(config.sdm_channels, config, rng)

        if config.fusion_former:
            self.fusion_former = FusionFormer(widths[-1], rng, config.swap_query_key, config.scale_attention)

        self.middle = ResBlock(widths[-1], widths[-1], config.timestep_embed_dim, config.groups, rng,
                               zero_init=config.zero_init_residual)
        self.decoder = Decoder(config, rng)

        logger.debug(f"MMFNet built: widths {widths}, {self.num_parameters()} parameters")

    def _check_inputs(self, y_t: Tensor, x_ct: Tensor, x_sdm: Tensor) -> None:
        cfg = self.config
        if y_t.ndim != 4 or y_t.shape[1] != cfg.dose_channels:
            raise ValueError(f"y_t must be (N, {cfg.dose_channels}, H, W), got {y_t.shape}")
        if x_ct.shape[1] != cfg.ct_channels or x_sdm.shape[1] != cfg.sdm_channels:
            raise ValueError(
                f"Expected {cfg.ct_channels} CT and {cfg.sdm_channels} SDM channels, "
                f"got {x_ct.shape} and {x_sdm.shape}"
            )
        if not (y_t.shape[0], *y_t.shape[2:]) == (x_ct.shape[0], *x_ct.shape[2:]) == (x_sdm.shape[0], *x_sdm.shape[2:]):
            raise ValueError(f"Inputs are not aligned: {y_t.shape}, {x_ct.shape}, {x_sdm.shape}")
        cfg.check_input_shape(y_t.shape[2], y_t.shape[3])

    def forward(self, y_t, x_ct, x_sdm, t) -> Tensor:
        """
        Predict the noise contained in y_t.

        Args:
            y_t: Noisy normalized dose (N, 1, H, W)
            x_ct: Normalized CT (N, 1, H, W)
            x_sdm: Conditioning stack (N, C, H, W)
            t: Timesteps, scalar or shape (N,)

        Returns:
            eps_hat with y_t's shape
        """
        y_t, x_ct, x_sdm = ops.as_tensor(y_t), ops.as_tensor(x_ct), ops.as_tensor(x_sdm)
        self._check_inputs(y_t, x_ct, x_sdm)
        cfg = self.config

        t = np.broadcast_to(np.asarray(t), (y_t.shape[0],))
        emb = self.time_embed(t)

        if cfg.multi_scale_fusion:
            f_y = self.y_encoder.stem(y_t)
        else:
            f_y = self.y_encoder.stem(ops.concat([y_t, x_ct, x_sdm], axis=1))

        f_ct: Optional[Tensor] = None
        f_sdm: Optional[Tensor] = None
        if self.uses_condition_encoders:
            f_ct = self.ct_encoder.stem(x_ct)
            f_sdm = self.sdm_encoder.stem(x_sdm)

        skips = []
        for level in range(cfg.levels):
            f_y = self.y_encoder.run_level(level, f_y, emb)
            if self.uses_condition_encoders:
                f_ct = self.ct_encoder.run_level(level, f_ct, emb)
                f_sdm = self.sdm_encoder.run_level(level, f_sdm, emb)
            if cfg.multi_scale_fusion:
                f_y = multi_scale_fuse(f_y, f_ct, f_sdm)
            skips.append(f_y)

            f_y = self.y_encoder.downs[level](f_y)
            if self.uses_condition_encoders and (cfg.fusion_former or level < cfg.levels - 1):
                f_ct = self.ct_encoder.downs[level](f_ct)
                f_sdm = self.sdm_encoder.downs[level](f_sdm)

        if cfg.fusion_former:
            f_y = self.fusion_former(f_ct, f_sdm, f_y)

        f_y = self.middle(f_y, emb)
        return self.decoder(f_y, skips, emb)

    def predict_noise(self, y_t: np.ndarray, x_ct: np.ndarray, x_sdm: np.ndarray, t) -> np.ndarray:
        """Inference helper returning a plain array."""
        return self.forward(y_t, x_ct, x_sdm, t).data
