"""AdamW optimizer with decoupled weight decay and a step-decay learning rate."""

import logging
from collections import OrderedDict
from typing import Dict, List, Tuple

import numpy as np

from .module import Parameter

logger = logging.getLogger(__name__)

DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_WEIGHT_DECAY = 0.01
ADAM_EPS = 1e-8


class StepDecay:
    """Multiply the base learning rate by gamma every step_size iterations."""

    def __init__(self, base_lr: float, step_size: int, gamma: float = 0.5):
        if step_size < 1:
            raise ValueError(f"step_size must be >= 1, got {step_size}")
        self.base_lr = base_lr
        self.step_size = step_size
        self.gamma = gamma

    def __call__(self, iteration: int) -> float:
        return self.base_lr * self.gamma ** (iteration // self.step_size)


class AdamW:
    """Adaptive moments with weight decay applied directly to the parameters."""

    def __init__(
        self,
        named_params: List[Tuple[str, Parameter]],
        lr: float,
        betas: Tuple[float, float] = DEFAULT_BETAS,
        weight_decay: float = DEFAULT_WEIGHT_DECAY,
        eps: float = ADAM_EPS
    ):
        self.params = OrderedDict(named_params)
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.step_count = 0
        self.m = OrderedDict((name, np.zeros_like(p.data)) for name, p in self.params.items())
        self.v = OrderedDict((name, np.zeros_like(p.data)) for name, p in self.params.items())

    def step(self, gradients: Dict, lr: float = None) -> None:
        """
        Apply one update.

        Args:
            gradients: Map from parameter tensor to gradient (as returned by backward)
            lr: Learning rate for this step (defaults to the constructor value)
        """
        lr = self.lr if lr is None else lr
        beta1, beta2 = self.betas
        self.step_count += 1
        bias1 = 1.0 - beta1 ** self.step_count
        bias2 = 1.0 - beta2 ** self.step_count

        for name, param in self.params.items():
            grad = gradients.get(param)
            if grad is None:
                grad = np.zeros_like(param.data)
            self.m[name] = beta1 * self.m[name] + (1.0 - beta1) * grad
            self.v[name] = beta2 * self.v[name] + (1.0 - beta2) * grad * grad
            m_hat = self.m[name] / bias1
            v_hat = self.v[name] / bias2
            updated = param.data * (1.0 - lr * self.weight_decay)
            updated = updated - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            param.data = updated.astype(param.dtype)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        """Moment buffers keyed as adam.m/<name> and adam.v/<name>."""
        state = OrderedDict()
        for name in self.params:
            state[f"adam.m/{name}"] = self.m[name]
        for name in self.params:
            state[f"adam.v/{name}"] = self.v[name]
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], step_count: int) -> None:
        for name, param in self.params.items():
            self.m[name] = np.asarray(state[f"adam.m/{name}"], dtype=param.dtype).reshape(param.shape)
            self.v[name] = np.asarray(state[f"adam.v/{name}"], dtype=param.dtype).reshape(param.shape)
        self.step_count = step_count
