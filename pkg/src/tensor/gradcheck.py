"""Central finite-difference checks for the reverse-mode gradients."""

import logging
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward

logger = logging.getLogger(__name__)

FD_STEP = 1e-4
RELATIVE_FLOOR = 1e-6


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = RELATIVE_FLOOR) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def numerical_gradient(
    fn: Callable[[], Tensor],
    tensor: Tensor,
    indices: Sequence[int],
    h: float = FD_STEP
) -> np.ndarray:
    """Central differences of fn() with respect to selected flat entries of tensor."""
    original = tensor.data
    flat = original.reshape(-1)
    grads = np.empty(len(indices), dtype=np.float64)

    try:
        for out_pos, index in enumerate(indices):
            bumped = flat.copy()
            bumped[index] += h
            tensor.data = bumped.reshape(original.shape)
            plus = fn().item()

            bumped[index] -= 2 * h
            tensor.data = bumped.reshape(original.shape)
            minus = fn().item()

            grads[out_pos] = (plus - minus) / (2 * h)
    finally:
        tensor.data = original

    return grads


def check_gradients(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = FD_STEP,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    per_tensor: bool = False
) -> Dict[str, float]:
    """
    Compare analytic and numerical gradients of a scalar function.

    Args:
        fn: Zero-argument callable recomputing the scalar loss from inputs
        inputs: Tensors to differentiate with respect to
        h: Finite-difference step
        max_entries: Check at most this many entries per tensor (all when None)
        rng: Generator used to pick entries when max_entries is set
        per_tensor: Scale errors by the largest analytic gradient of each tensor
            instead of entry by entry

    Returns:
        Map from input label to max relative error
    """
    with Tape() as tape:
        loss = fn()
    analytic = backward(loss, tape, wrt=inputs)

    rng = rng or np.random.default_rng(0)
    errors = {}
    for position, tensor in enumerate(inputs):
        label = tensor.name or f"input_{position}"
        size = tensor.size
        if max_entries is not None and size > max_entries:
            indices = np.sort(rng.choice(size, max_entries, replace=False))
        else:
            indices = np.arange(size)

        numeric = numerical_gradient(fn, tensor, indices, h)
        exact = analytic[tensor].reshape(-1)[indices]
        if per_tensor:
            scale = max(float(np.abs(analytic[tensor]).max()), RELATIVE_FLOOR)
            errors[label] = float(np.max(np.abs(exact - numeric))) / scale
        else:
            errors[label] = relative_error(exact, numeric)
        logger.debug(f"Gradient check {label}: max relative error {errors[label]:.3e}")

    return errors
