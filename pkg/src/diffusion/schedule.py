"""Noise schedules and DDIM sub-sequence plans."""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_T = 1000
DEFAULT_ALPHA_1 = 0.9999
DEFAULT_ALPHA_T = 0.08
DEFAULT_STEPS = 8


class SigmaRule(str, Enum):
    # sigma_t evaluated with alpha_bar_{t-1}, as the step noise is printed
    ADJACENT = "adjacent"
    # sigma_t evaluated with alpha_bar of the previous plan entry
    SUBSEQUENCE = "subsequence"


@dataclass
class NoiseSchedule:
    """
    alpha_1..alpha_T and cumulative products.

    All arrays are indexed by t directly: alpha[0] is unused and alpha_bar[0] = 1.
    alpha_bar underflows to 0 near T for steep schedules, so coefficients are
    derived from log_alpha_bar, which stays strictly decreasing.
    """
    T: int
    alpha: np.ndarray
    alpha_bar: np.ndarray
    log_alpha_bar: np.ndarray

    def _check(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"Timestep out of range [0, {self.T}]: {t}")
        return t

    def alpha_bar_at(self, t) -> np.ndarray:
        return self.alpha_bar[self._check(t)]

    def sqrt_alpha_bar(self, t) -> np.ndarray:
        return np.exp(0.5 * self.log_alpha_bar[self._check(t)])

    def sqrt_one_minus_alpha_bar(self, t) -> np.ndarray:
        return np.sqrt(-np.expm1(self.log_alpha_bar[self._check(t)]))

    def step_sigma(self, t: int, t_prev: int) -> float:
        """sqrt((1 - ab_prev) / (1 - ab_t)) * sqrt(1 - ab_t / ab_prev)."""
        if t_prev == 0:
            return 0.0
        log_t = self.log_alpha_bar[self._check(t)]
        log_prev = self.log_alpha_bar[self._check(t_prev)]
        one_minus_prev = -np.expm1(log_prev)
        one_minus_t = -np.expm1(log_t)
        ratio_term = -np.expm1(log_t - log_prev)
        return float(np.sqrt(one_minus_prev / one_minus_t) * np.sqrt(ratio_term))


def make_linear_schedule(T: int = DEFAULT_T, a1: float = DEFAULT_ALPHA_1, aT: float = DEFAULT_ALPHA_T) -> NoiseSchedule:
    """
    Linearly decreasing alpha from a1 at t=1 to aT at t=T.

    Args:
        T: Number of diffusion steps (>= 2)
        a1: alpha_1
        aT: alpha_T, with 0 < aT < a1 < 1

    Returns:
        NoiseSchedule with alpha_bar accumulated in float64
    """
    if T < 2:
        raise ValueError(f"Schedule needs T >= 2, got {T}")
    if not 0.0 < aT < a1 < 1.0:
        raise ValueError(f"Schedule bounds must satisfy 0 < aT < a1 < 1, got a1={a1}, aT={aT}")

    t = np.arange(1, T + 1, dtype=np.float64)
    alpha = np.empty(T + 1)
    alpha[0] = 1.0
    alpha[1:] = a1 - (t - 1.0) * (a1 - aT) / (T - 1)

    log_alpha_bar = np.empty(T + 1)
    log_alpha_bar[0] = 0.0
    log_alpha_bar[1:] = np.cumsum(np.log(alpha[1:]))

    alpha_bar = np.empty(T + 1)
    alpha_bar[0] = 1.0
    alpha_bar[1:] = np.cumprod(alpha[1:])

    logger.debug(f"Linear schedule T={T}: log alpha_bar_T = {log_alpha_bar[-1]:.1f}")
    return NoiseSchedule(T=T, alpha=alpha, alpha_bar=alpha_bar, log_alpha_bar=log_alpha_bar)


@dataclass
class DdimPlan:
    """
    Sub-sequence tau_1 < ... < tau_S = T with the per-entry noise scale.

    sigma[i] belongs to tau[i] (zero-based).
    """
    tau: np.ndarray
    sigma: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.tau)


def make_tau(S: int, T: int) -> np.ndarray:
    """Evenly spaced sub-sequence round(i * T / S), deduplicated, ending at T."""
    if S < 1:
        raise ValueError(f"Number of generation steps must be >= 1, got {S}")
    if S > T:
        raise ValueError(f"Generation steps S={S} exceed diffusion steps T={T}")

    tau = np.round(np.arange(1, S + 1) * T / S).astype(np.int64)
    tau = np.unique(np.clip(tau, 1, T))
    tau[-1] = T
    return tau


def make_plan(
    S: int,
    schedule: NoiseSchedule,
    sigma_rule: SigmaRule = SigmaRule.ADJACENT,
    eta: float = 1.0
) -> DdimPlan:
    """
    Build the DDIM plan for S generation steps.

    Args:
        S: Number of generation steps
        schedule: Noise schedule supplying alpha_bar
        sigma_rule: Which predecessor sigma is evaluated against
        eta: Multiplier on sigma (0 gives the deterministic sampler)

    Returns:
        DdimPlan with tau and sigma
    """
    if eta < 0:
        raise ValueError(f"eta must be non-negative, got {eta}")
    sigma_rule = SigmaRule(sigma_rule)

    tau = make_tau(S, schedule.T)
    previous = np.concatenate([[0], tau[:-1]])
    sigma = np.empty(len(tau))
    for i, t in enumerate(tau):
        t_prev = t - 1 if sigma_rule == SigmaRule.ADJACENT else previous[i]
        sigma[i] = eta * schedule.step_sigma(int(t), int(t_prev))
    return DdimPlan(tau=tau, sigma=sigma)
