"""Forward noising, the conditional training objective and DDIM sampling."""

import logging
from enum import Enum
from typing import Callable, Union

import numpy as np

from ..tensor import ops
from ..tensor.tensor import Tensor
from .schedule import DdimPlan, NoiseSchedule

logger = logging.getLogger(__name__)

RADICAND_TOLERANCE = 1e-12

# (y_t, x_ct, x_sdm, t) -> predicted noise, all NCHW except t of shape (N,)
Denoiser = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], Union[Tensor, np.ndarray]]


class LossNorm(str, Enum):
    L1 = "l1"
    L2 = "l2"


def _per_sample(coefficient: np.ndarray, ndim: int) -> np.ndarray:
    """Reshape a per-sample coefficient so it broadcasts over NCHW."""
    coefficient = np.asarray(coefficient, dtype=np.float64)
    if coefficient.ndim == 0:
        return coefficient
    return coefficient.reshape((-1,) + (1,) * (ndim - 1))


def q_sample(y0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """
    Draw y_t ~ q(y_t | y_0) with the supplied noise.

    Args:
        y0: Clean sample
        t: Timestep, scalar or one per batch element, in [1, T]
        eps: Standard normal noise with y0's shape
        schedule: Noise schedule

    Returns:
        sqrt(ab_t) * y0 + sqrt(1 - ab_t) * eps
    """
    y0 = np.asarray(y0)
    eps = np.asarray(eps)
    if y0.shape != eps.shape:
        raise ValueError(f"q_sample shape mismatch: y0 {y0.shape} vs eps {eps.shape}")
    if np.any(np.asarray(t) < 1):
        raise ValueError(f"q_sample timestep must be >= 1, got {t}")

    signal = _per_sample(schedule.sqrt_alpha_bar(t), y0.ndim)
    noise = _per_sample(schedule.sqrt_one_minus_alpha_bar(t), y0.ndim)
    return signal * y0 + noise * eps


def predict_y0(y_t: np.ndarray, eps_hat: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    """y_{0|t} = (y_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)."""
    if np.any(np.asarray(t) < 1):
        raise ValueError(f"predict_y0 timestep must be >= 1, got {t}")
    y_t = np.asarray(y_t)
    signal = _per_sample(schedule.sqrt_alpha_bar(t), y_t.ndim)
    noise = _per_sample(schedule.sqrt_one_minus_alpha_bar(t), y_t.ndim)
    return (y_t - noise * np.asarray(eps_hat)) / signal


def ddpm_posterior_mean(y_t: np.ndarray, eps_hat: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Ancestral mean (y_t - (1 - alpha_t) / sqrt(1 - ab_t) * eps_hat) / sqrt(alpha_t)."""
    alpha_t = schedule.alpha[t]
    return (y_t - (1.0 - alpha_t) / schedule.sqrt_one_minus_alpha_bar(t) * eps_hat) / np.sqrt(alpha_t)


def ddim_step(
    y: np.ndarray,
    eps_hat: np.ndarray,
    i: int,
    plan: DdimPlan,
    schedule: NoiseSchedule,
    z: np.ndarray,
    clip_denoised: bool = False
) -> np.ndarray:
    """
    Move from y_{tau_i} to y_{tau_{i-1}} (or to y_0 when i = 1).

    Args:
        y: Current state y_{tau_i}
        eps_hat: Predicted noise at tau_i
        i: One-based plan position in [1, S]
        plan: DDIM plan
        schedule: Noise schedule
        z: Standard normal draw, ignored when sigma is zero
        clip_denoised: Clip y_{0|t} to [-1, 1] before re-noising

    Returns:
        Next state
    """
    if not 1 <= i <= plan.steps:
        raise ValueError(f"Plan position {i} outside [1, {plan.steps}]")

    t = int(plan.tau[i - 1])
    sigma = float(plan.sigma[i - 1])
    y0 = predict_y0(y, eps_hat, t, schedule)
    if clip_denoised:
        y0 = np.clip(y0, -1.0, 1.0)

    noise = sigma * z if sigma > 0 else 0.0
    if i == 1:
        return y0 + noise

    t_prev = int(plan.tau[i - 2])
    one_minus_prev = float(schedule.sqrt_one_minus_alpha_bar(t_prev)) ** 2
    radicand = one_minus_prev - sigma * sigma
    if radicand < -RADICAND_TOLERANCE:
        raise ValueError(
            f"Inconsistent DDIM plan at tau={t}: 1 - ab({t_prev}) - sigma^2 = {radicand:.3e} < 0"
        )
    direction = np.sqrt(max(radicand, 0.0)) * eps_hat
    return float(schedule.sqrt_alpha_bar(t_prev)) * y0 + direction + noise


def _to_array(value) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def training_loss(
    model: Denoiser,
    y0: np.ndarray,
    x_ct: np.ndarray,
    x_sdm: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    norm: LossNorm = LossNorm.L1
) -> Tensor:
    """
    Noise-prediction objective: mean |eps - model(y_t, x_ct, x_sdm, t)|.

    Args:
        model: Denoiser returning a Tensor so the loss stays differentiable
        y0: Normalized dose batch (N, 1, H, W)
        x_ct: Normalized CT batch (N, 1, H, W)
        x_sdm: Conditioning stack batch (N, C, H, W)
        schedule: Noise schedule
        rng: Source of t ~ U{1..T} and eps ~ N(0, I)
        norm: l1 (mean absolute error) or l2 (mean squared error)

    Returns:
        Scalar loss tensor
    """
    n = y0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(y0.shape)
    y_t = q_sample(y0, t, eps, schedule)

    eps_hat = ops.as_tensor(model(y_t, x_ct, x_sdm, t))
    diff = ops.sub(ops.as_tensor(eps), eps_hat)
    residual = ops.absolute(diff) if LossNorm(norm) == LossNorm.L1 else ops.square(diff)
    return ops.mean(residual)


def sample(
    model: Denoiser,
    x_ct: np.ndarray,
    x_sdm: np.ndarray,
    plan: DdimPlan,
    schedule: NoiseSchedule,
    seed,
    clip_denoised: bool = True
) -> np.ndarray:
    """
    Generate a normalized dose batch by running the DDIM plan from pure noise.

    Args:
        model: Denoiser
        x_ct: Normalized CT batch (N, 1, H, W)
        x_sdm: Conditioning stack batch (N, C, H, W)
        plan: DDIM plan
        schedule: Noise schedule
        seed: Seed (int or entropy sequence) fixing y_T and every per-step draw
        clip_denoised: Clip intermediate y_{0|t} estimates to [-1, 1]

    Returns:
        y_0 estimate clipped to [-1, 1], shape (N, 1, H, W)
    """
    rng = np.random.default_rng(seed)
    shape = (x_ct.shape[0], 1) + tuple(x_ct.shape[2:])
    y = rng.standard_normal(shape)

    for i in range(plan.steps, 0, -1):
        t = int(plan.tau[i - 1])
        eps_hat = _to_array(model(y, x_ct, x_sdm, np.full(shape[0], t))).astype(np.float64)
        if eps_hat.shape != shape:
            raise ValueError(f"Denoiser returned shape {eps_hat.shape}, expected {shape}")
        z = rng.standard_normal(shape)
        y = ddim_step(y, eps_hat, i, plan, schedule, z, clip_denoised=clip_denoised)

    return np.clip(y, -1.0, 1.0)
