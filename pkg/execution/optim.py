"""Adam over named numpy parameter groups, updated in place."""

import logging
from dataclasses import dataclass, field

import numpy as np

from errors import InvalidArgumentError

logger = logging.getLogger(__name__)


@dataclass
class Adam:
    lrs: dict[str, float]
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """One update; a group with zero gradient and zero moments does not move."""
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, param in params.items():
            grad = grads.get(name)
            if grad is None:
                continue
            if grad.shape != param.shape:
                raise InvalidArgumentError(f"Gradient for '{name}' has shape {grad.shape}, param {param.shape}")
            m = self.m.setdefault(name, np.zeros_like(param))
            v = self.v.setdefault(name, np.zeros_like(param))
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param -= self.lrs.get(name, 0.0) * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {"adam_step": np.array([self.step_count], dtype=np.int64)}
        for name in self.m:
            arrays[f"adam_m_{name}"] = self.m[name]
            arrays[f"adam_v_{name}"] = self.v[name]
        return arrays

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if "adam_step" not in arrays:
            return
        self.step_count = int(arrays["adam_step"][0])
        for key, value in arrays.items():
            if key.startswith("adam_m_"):
                self.m[key[len("adam_m_"):]] = value.copy()
            elif key.startswith("adam_v_"):
                self.v[key[len("adam_v_"):]] = value.copy()
