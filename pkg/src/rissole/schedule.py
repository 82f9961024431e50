"""Linear variance schedule and the forward (noising) process."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables stored 0-based; public timesteps are 1-based."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def check_t(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")
        return t - 1


def build_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}"
        )
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        steps = np.arange(T, dtype=np.float64) / (T - 1)
        beta = beta_start + steps * (beta_end - beta_start)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    for arr in (beta, alpha, alpha_bar, sigma):
        arr.setflags(write=False)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def forward_diffuse(schedule: NoiseSchedule, z0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """Sample ``q(z_t | z_0)`` given the noise draw ``eps``."""
    idx = schedule.check_t(t)
    if np.shape(eps) != np.shape(z0):
        raise ValueError(f"eps shape {np.shape(eps)} != z0 shape {np.shape(z0)}")
    ab = schedule.alpha_bar[idx]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def forward_diffuse_batch(schedule: NoiseSchedule, z0: np.ndarray, t: np.ndarray,
                          eps: np.ndarray) -> np.ndarray:
    """Vectorized :func:`forward_diffuse` with one timestep per leading-axis row."""
    t = np.asarray(t)
    if t.min() < 1 or t.max() > schedule.T:
        raise ValueError(f"timesteps must lie in 1..{schedule.T}")
    ab = schedule.alpha_bar[t - 1].reshape((-1,) + (1,) * (z0.ndim - 1))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


def forward_step(schedule: NoiseSchedule, z_prev: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """One Markov step ``q(z_t | z_{t-1})``."""
    idx = schedule.check_t(t)
    if np.shape(eps) != np.shape(z_prev):
        raise ValueError(f"eps shape {np.shape(eps)} != z_prev shape {np.shape(z_prev)}")
    beta = schedule.beta[idx]
    return np.sqrt(1.0 - beta) * z_prev + np.sqrt(beta) * eps
