"""Conditioned reconstruction by strided deterministic denoising.

An input image is jumped to an intermediate noise level (well short of pure
noise) and iteratively denoised. At every step the predicted noise is
corrected by comparing the current state against an equally-noised copy of a
target image, which steers the trajectory toward the target's appearance.
For anomaly detection the target is the input itself: regions the model
finds plausible are reproduced, defects get pulled toward the learned
nominal appearance instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .schedule import VarianceSchedule, perturb


@dataclass(frozen=True)
class ReconstructionConfig:
    """Knobs of the conditioned sampler.

    w: conditioning strength (0 disables guidance entirely)
    t_start: perturbation depth, in schedule steps
    n_steps: number of denoising iterations over [1, t_start]
    sigma_mode: DDIM stochasticity scale in [0, 1]; 0 is fully deterministic
    """

    w: float = 3.0
    t_start: int = 250
    n_steps: int = 10
    sigma_mode: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.w < 0:
            raise ValueError(f"w must be >= 0, got {self.w}")
        if self.t_start < 1:
            raise ValueError(f"t_start must be >= 1, got {self.t_start}")
        if not 1 <= self.n_steps <= self.t_start:
            raise ValueError(
                f"n_steps must be in [1, t_start={self.t_start}], got {self.n_steps}"
            )
        if not 0.0 <= self.sigma_mode <= 1.0:
            raise ValueError(f"sigma_mode must be in [0, 1], got {self.sigma_mode}")


@dataclass
class Trajectory:
    """Descending timestep subsequence; the terminal successor is 0."""

    timesteps: list

    def pairs(self):
        nexts = list(self.timesteps[1:]) + [0]
        return list(zip(self.timesteps, nexts))


def make_trajectory(t_start: int, n_steps: int) -> Trajectory:
    """Uniformly strided subsequence of [1, t_start], first == t_start.

    timesteps[i] = round(t_start * (n_steps - i) / n_steps); strictly
    descending whenever n_steps <= t_start.
    """
    if t_start < 1:
        raise ValueError(f"t_start must be >= 1, got {t_start}")
    if not 1 <= n_steps <= t_start:
        raise ValueError(f"n_steps must be in [1, t_start={t_start}], got {n_steps}")
    ts = [int(round(t_start * k / n_steps)) for k in range(n_steps, 0, -1)]
    if ts[0] != t_start or ts[-1] < 1 or any(b >= a for a, b in zip(ts, ts[1:])):
        raise RuntimeError(f"degenerate trajectory for ({t_start}, {n_steps}): {ts}")
    return Trajectory(ts)


def target_noisy(
    y: torch.Tensor, t: int, eps_pred: torch.Tensor, schedule: VarianceSchedule
) -> torch.Tensor:
    """Noise the target with the model's own prediction: the same affine map
    as the forward perturbation, so an exact prediction makes y_t == x_t when
    y == x."""
    return perturb(y, t, eps_pred, schedule)


def adjust_noise(
    eps_pred: torch.Tensor,
    x_t: torch.Tensor,
    y_t: torch.Tensor,
    w: float,
    t: int,
    schedule: VarianceSchedule,
) -> torch.Tensor:
    """Steer the predicted noise toward the target state."""
    if w < 0:
        raise ValueError(f"w must be >= 0, got {w}")
    if w == 0:
        return eps_pred  # exact degeneracy to the unconditioned step
    scale = w * math.sqrt(1.0 - schedule.alpha_bar(t))
    return eps_pred - scale * (y_t - x_t)


def predict_x0(
    x_t: torch.Tensor, eps_hat: torch.Tensor, t: int, schedule: VarianceSchedule
) -> torch.Tensor:
    """Invert the closed-form perturbation under the predicted noise."""
    if t < 1:
        raise ValueError(f"prediction needs t >= 1, got {t}")
    abar = schedule.alpha_bar(t)
    return (x_t - math.sqrt(1.0 - abar) * eps_hat) / math.sqrt(abar)


def ddim_sigma(t: int, t_next: int, eta: float, schedule: VarianceSchedule) -> float:
    """Per-step stochasticity; 0 at eta == 0 and always 0 into the terminal
    step (abar_0 == 1)."""
    if eta == 0.0:
        return 0.0
    ab_t = schedule.alpha_bar(t)
    ab_n = schedule.alpha_bar(t_next)
    return eta * math.sqrt((1.0 - ab_n) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_n)


def denoise_step(
    x0_hat: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_next: int,
    sigma_mode: float,
    schedule: VarianceSchedule,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """One strided denoising update from level t to level t_next."""
    if not 0 <= t_next < t:
        raise ValueError(f"need 0 <= t_next < t, got t={t}, t_next={t_next}")
    ab_next = schedule.alpha_bar(t_next)
    sigma = ddim_sigma(t, t_next, sigma_mode, schedule)
    resid = 1.0 - ab_next - sigma * sigma
    if resid < 0:
        raise ValueError(
            f"stochasticity {sigma:.4g} exceeds the noise budget at t_next={t_next}"
        )
    out = math.sqrt(ab_next) * x0_hat + math.sqrt(resid) * eps_hat
    if sigma > 0.0:
        if generator is None:
            raise ValueError("stochastic step needs a generator")
        out = out + sigma * torch.randn(out.shape, generator=generator, dtype=out.dtype)
    return out


def reconstruct(
    model,
    x: torch.Tensor,
    y: torch.Tensor,
    cfg: ReconstructionConfig,
    schedule: VarianceSchedule,
    x_start: torch.Tensor | None = None,
    keep_trace: bool = False,
):
    """Run the full conditioned denoising loop.

    x, y: [C,H,W] or [B,C,H,W] in [-1, 1]; y is the conditioning target
    (pass y=x for anomaly detection). The generator is seeded from
    cfg.seed; its first draw is the initial perturbation noise, unless
    x_start pins the starting state directly. Returns the reconstruction
    (and the per-step trace when keep_trace).
    """
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
        y = y.unsqueeze(0)
    if x.shape != y.shape:
        raise ValueError(f"input shape {tuple(x.shape)} != target shape {tuple(y.shape)}")
    if cfg.t_start > schedule.num_steps:
        raise ValueError(
            f"t_start={cfg.t_start} exceeds schedule length {schedule.num_steps}"
        )
    if getattr(model, "num_timesteps", schedule.num_steps) != schedule.num_steps:
        raise ValueError(
            f"model is bound to {model.num_timesteps} timesteps, schedule has "
            f"{schedule.num_steps}"
        )

    g = torch.Generator().manual_seed(cfg.seed)
    if x_start is None:
        eps0 = torch.randn(x.shape, generator=g, dtype=x.dtype)
        x_t = perturb(x, cfg.t_start, eps0, schedule)
    else:
        if x_start.shape != x.shape:
            raise ValueError(
                f"x_start shape {tuple(x_start.shape)} != input shape {tuple(x.shape)}"
            )
        x_t = x_start

    trace = []
    with torch.no_grad():
        for t, t_next in make_trajectory(cfg.t_start, cfg.n_steps).pairs():
            eps_pred = model.predict_noise(x_t, t)
            y_t = target_noisy(y, t, eps_pred, schedule)
            eps_hat = adjust_noise(eps_pred, x_t, y_t, cfg.w, t, schedule)
            x0_hat = predict_x0(x_t, eps_hat, t, schedule)
            x_t = denoise_step(x0_hat, eps_hat, t, t_next, cfg.sigma_mode, schedule, g)
            if keep_trace:
                trace.append(
                    {
                        "t": t,
                        "t_next": t_next,
                        "sigma": ddim_sigma(t, t_next, cfg.sigma_mode, schedule),
                        "residual": float((x_t - y).abs().mean()) if t_next == 0 else None,
                    }
                )

    out = x_t.squeeze(0) if single else x_t
    return (out, trace) if keep_trace else out
