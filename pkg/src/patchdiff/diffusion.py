"""DDPM schedule and DDIM stepping.

Timesteps are 1-based: t in {1..T} indexes the noisy marginals, t = 0 is the
clean signal (alpha_bar = 1 there by convention).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NoiseSchedule",
    "DdimParams",
    "make_schedule",
    "forward_noise",
    "denoised_estimate",
    "sigma_t",
    "ddim_step",
    "sampling_timesteps",
]

SIGMA_RULES = ("standard", "dds")


@dataclass(frozen=True)
class NoiseSchedule:
    timesteps: int
    beta: np.ndarray  # (T,), beta[i] is the variance increment at t = i + 1
    alpha_bar: np.ndarray  # (T,), cumulative product of (1 - beta)

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar for a 1-based timestep; t = 0 returns 1 (clean signal)."""
        if not 0 <= t <= self.timesteps:
            raise ValueError(f"t {t} outside [0, {self.timesteps}]")
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])


@dataclass(frozen=True)
class DdimParams:
    eta: float = 0.8
    steps: int = 200
    sigma_rule: str = "dds"

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must be in [0, 1], got {self.eta}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.sigma_rule not in SIGMA_RULES:
            raise ValueError(f"sigma_rule must be one of {SIGMA_RULES}, got {self.sigma_rule!r}")


def make_schedule(timesteps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule, endpoints inclusive."""
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(timesteps, beta, alpha_bar)


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} does not match x0 shape {x0.shape}")
    ab = schedule.alpha_bar_at(t)
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(x0.dtype, copy=False)


def denoised_estimate(x_t: np.ndarray, eps_hat: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Invert forward_noise at the predicted noise: (x_t - sqrt(1-abar) eps) / sqrt(abar)."""
    ab = schedule.alpha_bar_at(t)
    if ab == 0.0:
        raise ValueError(f"alpha_bar vanishes at t={t}")
    out = (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
    return out.astype(x_t.dtype, copy=False)


def sigma_t(params: DdimParams, schedule: NoiseSchedule, t: int, t_prev: int) -> float:
    """Stochasticity scale for the step t -> t_prev under the configured rule."""
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    ab_prev = schedule.alpha_bar_at(t_prev)
    if params.sigma_rule == "dds":
        return params.eta * float(np.sqrt(1.0 - ab_prev))
    ab = schedule.alpha_bar_at(t)
    return params.eta * float(np.sqrt((1.0 - ab_prev) / (1.0 - ab)) * np.sqrt(1.0 - ab / ab_prev))


def ddim_step(
    x_hat: np.ndarray,
    eps_hat: np.ndarray,
    eps_fresh: np.ndarray,
    t: int,
    t_prev: int,
    params: DdimParams,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """x_{t_prev} = sqrt(abar_prev) x_hat + sqrt(1 - abar_prev - sigma^2) eps_hat + sigma eps_fresh."""
    sig = sigma_t(params, schedule, t, t_prev)
    ab_prev = schedule.alpha_bar_at(t_prev)
    radicand = 1.0 - ab_prev - sig * sig
    if radicand < -1e-12:
        raise ValueError(f"sigma {sig} too large at t_prev={t_prev}: 1 - abar_prev - sigma^2 < 0")
    out = np.sqrt(ab_prev) * x_hat + np.sqrt(max(radicand, 0.0)) * eps_hat + sig * eps_fresh
    return out.astype(x_hat.dtype, copy=False)


def sampling_timesteps(timesteps: int, steps: int) -> list[tuple[int, int]]:
    """Descending (t, t_prev) pairs covering a strided subsequence that ends at 1 -> 0.

    The subsequence is 1, 1+s, ..., 1+(steps-1)*s with stride s = floor(T/steps),
    walked from the top; the final pair steps to t = 0.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    steps = min(steps, timesteps)
    stride = timesteps // steps
    ts = [1 + stride * j for j in range(steps)][::-1]
    return list(zip(ts, ts[1:] + [0]))
