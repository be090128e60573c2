"""Variance schedules and the closed-form forward noising process.

The forward process destroys an image x over T discrete steps by mixing in
Gaussian noise. All downstream sampling code consumes only the cumulative
signal coefficients abar_t, exposed here with the convention abar_0 == 1
(the zeroth "step" leaves the image untouched).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

SCHEDULE_KINDS = ("linear",)


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step noise variances and their cumulative products.

    betas[i] is the variance added at step i+1 (steps are 1-based in the
    math, 0-based in storage); alpha_bars[i] = prod_{k<=i} (1 - betas[k]).
    Both are float64 so the cumulative product stays exact to ~1e-16.
    """

    kind: str
    num_steps: int
    beta_start: float
    beta_end: float
    betas: torch.Tensor = field(repr=False)
    alpha_bars: torch.Tensor = field(repr=False)

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal coefficient for 1-based timestep t; t=0 -> 1.0."""
        if not isinstance(t, int):
            raise TypeError(f"timestep must be int, got {type(t).__name__}")
        if t < 0 or t > self.num_steps:
            raise ValueError(f"timestep {t} outside [0, {self.num_steps}]")
        if t == 0:
            return 1.0
        return float(self.alpha_bars[t - 1])

    def config(self) -> dict:
        return {
            "kind": self.kind,
            "num_steps": self.num_steps,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }


def build_schedule(
    kind: str = "linear",
    num_steps: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
) -> VarianceSchedule:
    """Construct a variance schedule.

    The linear schedule interpolates beta from beta_start to beta_end over
    num_steps values (endpoints included).
    """
    if kind not in SCHEDULE_KINDS:
        raise ValueError(f"unknown schedule kind {kind!r}; known: {SCHEDULE_KINDS}")
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if not (0.0 < beta_start < 1.0 and 0.0 < beta_end < 1.0):
        raise ValueError(f"beta bounds must lie in (0, 1), got ({beta_start}, {beta_end})")
    if beta_start >= beta_end:
        raise ValueError(f"beta_start must be < beta_end, got ({beta_start}, {beta_end})")

    betas = torch.linspace(beta_start, beta_end, num_steps, dtype=torch.float64)
    alpha_bars = torch.cumprod(1.0 - betas, dim=0)
    return VarianceSchedule(
        kind=kind,
        num_steps=num_steps,
        beta_start=beta_start,
        beta_end=beta_end,
        betas=betas,
        alpha_bars=alpha_bars,
    )


def schedule_from_config(cfg: dict) -> VarianceSchedule:
    return build_schedule(
        kind=cfg["kind"],
        num_steps=cfg["num_steps"],
        beta_start=cfg["beta_start"],
        beta_end=cfg["beta_end"],
    )


def perturb(
    x: torch.Tensor, t: int, eps: torch.Tensor, schedule: VarianceSchedule
) -> torch.Tensor:
    """Jump the clean image x directly to noise level t.

    Closed form of t sequential noising steps:
        x_t = sqrt(abar_t) * x + sqrt(1 - abar_t) * eps
    """
    if eps.shape != x.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != image shape {tuple(x.shape)}")
    if t < 1 or t > schedule.num_steps:
        raise ValueError(f"timestep {t} outside [1, {schedule.num_steps}]")
    abar = schedule.alpha_bar(t)
    return math.sqrt(abar) * x + math.sqrt(1.0 - abar) * eps


def perturb_batch(
    x: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    schedule: VarianceSchedule,
) -> torch.Tensor:
    """Vectorized perturb with a per-item timestep vector t of shape [B]."""
    if eps.shape != x.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != image shape {tuple(x.shape)}")
    if t.dim() != 1 or t.shape[0] != x.shape[0]:
        raise ValueError(f"timestep vector shape {tuple(t.shape)} does not match batch {x.shape[0]}")
    if bool((t < 1).any()) or bool((t > schedule.num_steps).any()):
        raise ValueError(f"timesteps outside [1, {schedule.num_steps}]")
    abar = schedule.alpha_bars[t.long() - 1]  # [B], float64
    shape = (x.shape[0],) + (1,) * (x.dim() - 1)
    signal = abar.sqrt().reshape(shape).to(x.dtype)
    noise = (1.0 - abar).sqrt().reshape(shape).to(x.dtype)
    return signal * x + noise * eps
