"""Building blocks of the fusion denoiser: timestep embedding, AdaGN Res-blocks and fusionFormer."""

import logging
from typing import Tuple

import numpy as np

from ..tensor import ops
from ..tensor.module import Conv2d, GroupNorm, LayerNorm, Linear, Module, Parameter
from ..tensor.tensor import Tensor

logger = logging.getLogger(__name__)

MAX_PERIOD = 10000.0
FFB_EXPANSION = 2


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """
    Fixed sinusoidal encoding of integer timesteps.

    Args:
        t: Timesteps of shape (N,)
        dim: Even embedding width

    Returns:
        Array (N, dim): sines in the first half, cosines in the second
    """
    half = dim // 2
    freqs = np.exp(-np.log(MAX_PERIOD) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs.reshape(1, -1)
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class TimestepEmbedding(Module):
    """Sinusoidal base followed by Linear -> SiLU -> Linear."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.dim = dim
        self.proj_in = Linear(dim, dim, rng)
        self.proj_out = Linear(dim, dim, rng)

    def forward(self, t: np.ndarray) -> Tensor:
        t = np.asarray(t).reshape(-1)
        if np.any(t < 1):
            raise ValueError(f"Timesteps must be >= 1, got min {t.min()}")
        base = ops.as_tensor(sinusoidal_embedding(t, self.dim))
        return self.proj_out(ops.silu(self.proj_in(base)))


def timestep_embed(t, embedding: TimestepEmbedding) -> Tensor:
    """Embed one timestep or a batch of them."""
    return embedding(np.atleast_1d(t))


def adagn(f: Tensor, scale: Tensor, shift: Tensor, groups: int) -> Tensor:
    """
    Adaptive group normalization e_s * GN(f) + e_b.

    Args:
        f: Feature map (N, C, H, W)
        scale: Per-sample, per-channel e_s of shape (N, C)
        shift: Per-sample, per-channel e_b of shape (N, C)
        groups: GN group count

    Returns:
        Modulated feature map with f's shape
    """
    n, c = f.shape[:2]
    if scale.shape != (n, c) or shift.shape != (n, c):
        raise ValueError(
            f"AdaGN channel mismatch: features {f.shape}, scale {scale.shape}, shift {shift.shape}"
        )
    normalized = ops.group_norm(f, groups)
    modulated = ops.mul(normalized, ops.reshape(scale, (n, c, 1, 1)))
    return ops.add(modulated, ops.reshape(shift, (n, c, 1, 1)))


class ResBlock(Module):
    """GN -> SiLU -> conv3x3 -> AdaGN -> SiLU -> conv3x3 with a residual connection."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        embed_dim: int,
        groups: int,
        rng: np.random.Generator,
        zero_init: bool = False
    ):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.groups = groups

        self.norm = GroupNorm(groups, in_channels)
        self.conv_in = Conv2d(in_channels, out_channels, 3, rng)
        self.embed_proj = Linear(embed_dim, 2 * out_channels, rng)
        # Scale half starts at 1 so an untrained block sees plain GN
        self.embed_proj.bias = Parameter(np.concatenate([np.ones(out_channels), np.zeros(out_channels)]))
        self.conv_out = Conv2d(out_channels, out_channels, 3, rng, zero_init=zero_init)
        self.skip = Conv2d(in_channels, out_channels, 1, rng) if in_channels != out_channels else None

    def forward(self, f: Tensor, emb: Tensor) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.in_channels:
            raise ValueError(f"ResBlock expects {self.in_channels} input channels, got shape {f.shape}")

        h = self.conv_in(ops.silu(self.norm(f)))
        scale, shift = ops.split_channels(self.embed_proj(ops.silu(emb)), 2, axis=1)
        h = adagn(h, scale, shift, self.groups)
        h = self.conv_out(ops.silu(h))

        residual = self.skip(f) if self.skip is not None else f
        return ops.add(h, residual)


def multi_scale_fuse(f_yt: Tensor, f_ct: Tensor, f_sdm: Tensor) -> Tensor:
    """Sum same-resolution features of the three encoders."""
    if not f_yt.shape == f_ct.shape == f_sdm.shape:
        raise ValueError(f"Cannot fuse features of shapes {f_yt.shape}, {f_ct.shape}, {f_sdm.shape}")
    return ops.add(ops.add(f_yt, f_ct), f_sdm)


class Downsample(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(channels, channels, 3, rng, stride=2)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(x)


class Upsample(Module):
    """Nearest-neighbour x2 followed by a 3x3 convolution."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv(ops.upsample_nearest2x(x))


def patchify(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, HW/4, 4C) tokens of non-overlapping 2x2 patches."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"2x2 patching needs even spatial extents, got {h}x{w}")
    tiles = ops.reshape(x, (n, c, h // 2, 2, w // 2, 2))
    tiles = ops.transpose(tiles, (0, 2, 4, 1, 3, 5))
    return ops.reshape(tiles, (n, (h // 2) * (w // 2), 4 * c))


def unpatchify(tokens: Tensor, shape: Tuple[int, int, int, int]) -> Tensor:
    """Inverse of patchify for a target (N, C, H, W) shape."""
    n, c, h, w = shape
    tiles = ops.reshape(tokens, (n, h // 2, w // 2, c, 2, 2))
    tiles = ops.transpose(tiles, (0, 3, 1, 4, 2, 5))
    return ops.reshape(tiles, (n, c, h, w))


class TokenEmbedding(Module):
    """Linear projection followed by layer normalization."""

    def __init__(self, dim: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.proj = Linear(dim, dim, rng)
        self.norm = LayerNorm(dim, shift=bias)

    def forward(self, tokens: Tensor) -> Tensor:
        return self.norm(self.proj(tokens))


class FusionFormer(Module):
    """
    Bottleneck attention where condition features weight the noisy-dose features.

    Query and key come from the CT and SDM maps (swapped when swap_query_key is set),
    value from the y_t map:

        att = softmax(beta(f_q) gamma(f_k)^T) delta(f_v) + delta(f_v)
        out = MLP(LN(att)) + att

    A constant added to every key only shifts each logit row, which softmax ignores,
    so the key path carries no bias terms.
    """

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        swap_query_key: bool = False,
        scale_attention: bool = False
    ):
        super().__init__()
        dim = 4 * channels
        self.channels = channels
        self.dim = dim
        self.swap_query_key = swap_query_key
        self.scale_attention = scale_attention

        self.query_embed = TokenEmbedding(dim, rng)
        self.key_embed = TokenEmbedding(dim, rng, bias=False)
        self.value_embed = TokenEmbedding(dim, rng)
        self.beta = Linear(dim, dim, rng)
        self.gamma = Linear(dim, dim, rng, bias=False)
        self.delta = Linear(dim, dim, rng)

        self.ffb_norm = LayerNorm(dim)
        self.ffb_in = Linear(dim, FFB_EXPANSION * dim, rng)
        self.ffb_out = Linear(FFB_EXPANSION * dim, dim, rng)
        self.proj_out = Linear(dim, dim, rng)

    def embed(self, f_ct: Tensor, f_sdm: Tensor, f_yt: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        """Patchify the three maps and produce (f_q, f_k, f_v) token embeddings."""
        if not f_ct.shape == f_sdm.shape == f_yt.shape:
            raise ValueError(
                f"fusionFormer inputs differ in shape: {f_ct.shape}, {f_sdm.shape}, {f_yt.shape}"
            )
        if f_yt.shape[1] != self.channels:
            raise ValueError(f"fusionFormer expects {self.channels} channels, got {f_yt.shape[1]}")

        query_source, key_source = (f_sdm, f_ct) if self.swap_query_key else (f_ct, f_sdm)
        f_q = self.query_embed(patchify(query_source))
        f_k = self.key_embed(patchify(key_source))
        f_v = self.value_embed(patchify(f_yt))
        return f_q, f_k, f_v

    def attend(self, f_q: Tensor, f_k: Tensor, f_v: Tensor) -> Tuple[Tensor, Tensor]:
        """Return (att, attention weights) for already-embedded tokens."""
        logits = ops.matmul(self.beta(f_q), ops.transpose(self.gamma(f_k), (0, 2, 1)))
        if self.scale_attention:
            logits = ops.mul(logits, 1.0 / np.sqrt(self.dim))
        weights = ops.softmax_rows(logits)
        values = self.delta(f_v)
        return ops.add(ops.matmul(weights, values), values), weights

    def forward(self, f_ct: Tensor, f_sdm: Tensor, f_yt: Tensor) -> Tensor:
        f_q, f_k, f_v = self.embed(f_ct, f_sdm, f_yt)
        att, _ = self.attend(f_q, f_k, f_v)
        hidden = self.ffb_out(ops.silu(self.ffb_in(self.ffb_norm(att))))
        tokens = self.proj_out(ops.add(hidden, att))
        return unpatchify(tokens, f_yt.shape)
