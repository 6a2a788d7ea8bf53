"""
Diffusion schedule math: noise schedule, forward noising, x0 recovery and
the timestep sampler used by score distillation.
"""

import logging
from dataclasses import dataclass

import numpy as np

from errors import InvalidArgumentError

logger = logging.getLogger(__name__)

DEFAULT_NUM_STEPS = 1000
DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    num_steps: int
    beta: np.ndarray
    alpha_bar: np.ndarray
    weight: np.ndarray

    def check_timestep(self, t: int) -> int:
        if int(t) != t or not 0 <= t < self.num_steps:
            raise InvalidArgumentError(f"Timestep {t} outside [0, {self.num_steps})")
        return int(t)

    def signal_to_noise(self, t: int) -> float:
        """sqrt(abar) / sqrt(1 - abar), the factor the oracle gradient carries."""
        a = self.alpha_bar[self.check_timestep(t)]
        return float(np.sqrt(a) / np.sqrt(1.0 - a))


def make_schedule(num_steps: int = DEFAULT_NUM_STEPS, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END, schedule: str = "scaled_linear") -> DiffusionSchedule:
    if num_steps < 1:
        raise InvalidArgumentError(f"num_steps must be >= 1, got {num_steps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise InvalidArgumentError(f"Need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if schedule == "scaled_linear":
        beta = np.linspace(beta_start ** 0.5, beta_end ** 0.5, num_steps, dtype=np.float64) ** 2
    elif schedule == "linear":
        beta = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    else:
        raise InvalidArgumentError(f"Unknown beta schedule '{schedule}'")
    alpha_bar = np.cumprod(1.0 - beta)
    return DiffusionSchedule(int(num_steps), beta, alpha_bar, 1.0 - alpha_bar)


def add_noise(x0: np.ndarray, t: int, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise InvalidArgumentError(f"Noise shape {eps.shape} does not match image {x0.shape}")
    a = schedule.alpha_bar[schedule.check_timestep(t)]
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def recover_x0(x_t: np.ndarray, t: int, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    a = schedule.alpha_bar[schedule.check_timestep(t)]
    return (np.asarray(x_t, dtype=np.float64) - np.sqrt(1.0 - a) * np.asarray(eps, dtype=np.float64)) / np.sqrt(a)


class TimestepSampler:
    """Uniform integer timesteps in [min_frac T, upper T], where the upper
    bound anneals linearly from max_frac to anneal_to over the run."""

    def __init__(self, schedule: DiffusionSchedule, total_iterations: int = 1,
                 min_frac: float = 0.02, max_frac: float = 0.98, anneal_to: float | None = 0.5):
        if not 0.0 <= min_frac <= max_frac <= 1.0:
            raise InvalidArgumentError(f"Need 0 <= min_frac <= max_frac <= 1, got {min_frac}, {max_frac}")
        self.schedule = schedule
        self.total_iterations = max(1, int(total_iterations))
        self.min_frac = min_frac
        self.max_frac = max_frac
        self.anneal_to = max_frac if anneal_to is None else max(min_frac, anneal_to)

    def bounds(self, iteration: int) -> tuple[int, int]:
        progress = min(1.0, max(0.0, iteration / self.total_iterations))
        upper_frac = self.max_frac + (self.anneal_to - self.max_frac) * progress
        last = self.schedule.num_steps - 1
        lo = int(round(self.min_frac * last))
        hi = max(lo, int(round(upper_frac * last)))
        return lo, hi

    def sample(self, rng: np.random.Generator, iteration: int = 0) -> int:
        lo, hi = self.bounds(iteration)
        return int(rng.integers(lo, hi + 1))
