"""Noise schedules and the DDPM/DDIM update rules.

Timesteps are 1-based: ``t`` in ``1..t_train`` reads ``betas[t - 1]``. The inference steps
are a spaced subsequence of those timesteps; a sampler position ``k`` in ``1..S`` refers to
``inference_steps[k - 1]`` and position ``0`` is the clean image.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Literal, Protocol

import torch

from .exceptions import ScheduleError
from .guidance import cfg_combine

_LOGGER = logging.getLogger(__name__)

LatentImage = torch.Tensor
ConditioningSequence = torch.Tensor
Timestep = int | torch.Tensor


class NoisePredictor(Protocol):
    def __call__(
        self, x_t: LatentImage, t: Timestep, cond: ConditioningSequence
    ) -> LatentImage: ...


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    t_train: int
    betas: torch.Tensor
    alphas: torch.Tensor
    alpha_bars: torch.Tensor
    sigmas: torch.Tensor
    inference_steps: tuple[int, ...]

    def __post_init__(self):
        if self.t_train < 1:
            raise ScheduleError("t_train must be positive")
        for name in ("betas", "alphas", "alpha_bars", "sigmas"):
            if getattr(self, name).shape != (self.t_train,):
                raise ScheduleError(f"{name} must have length {self.t_train}")
        if not torch.equal(self.alphas, 1.0 - self.betas):
            raise ScheduleError("alphas must equal 1 - betas")
        if not bool(torch.all(self.alpha_bars[1:] < self.alpha_bars[:-1])):
            raise ScheduleError("alpha_bars must be strictly decreasing")
        if not bool(torch.all((self.alpha_bars > 0) & (self.alpha_bars <= 1))):
            raise ScheduleError("alpha_bars must lie in (0, 1]")
        if bool(torch.any(self.sigmas < 0)):
            raise ScheduleError("sigmas must be non-negative")
        steps = self.inference_steps
        if not steps or any(b <= a for a, b in zip(steps, steps[1:], strict=False)):
            raise ScheduleError("inference_steps must be strictly increasing")
        if steps[0] < 1 or steps[-1] > self.t_train:
            raise ScheduleError(f"inference_steps must lie in 1..{self.t_train}")

    @property
    def num_inference_steps(self) -> int:
        return len(self.inference_steps)

    def check_timestep(self, t: Timestep) -> None:
        if isinstance(t, torch.Tensor):
            low, high = int(t.min()), int(t.max())
        else:
            low = high = int(t)
        if low < 1 or high > self.t_train:
            raise ScheduleError(f"Timestep {t} outside 1..{self.t_train}")

    def alpha_bar(self, t: int) -> float:
        """ᾱ_t, with ᾱ_0 = 1."""
        if t == 0:
            return 1.0
        self.check_timestep(t)
        return float(self.alpha_bars[t - 1])

    def timestep(self, position: int) -> int:
        if not 1 <= position <= self.num_inference_steps:
            raise ScheduleError(
                f"Position {position} outside 1..{self.num_inference_steps}"
            )
        return self.inference_steps[position - 1]

    def previous_timestep(self, t: int) -> int:
        """Predecessor of ``t`` within the inference steps, 0 for the first step."""
        try:
            position = self.inference_steps.index(t)
        except ValueError:
            raise ScheduleError(f"Timestep {t} is not an inference step") from None
        return self.inference_steps[position - 1] if position else 0


def build_schedule(
    t_train: int, beta_start: float, beta_end: float, num_inference_steps: int
) -> NoiseSchedule:
    """Linear β schedule with evenly spaced inference steps."""
    if not 0 < beta_start < beta_end < 1:
        raise ScheduleError(f"Need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    if not 1 <= num_inference_steps <= t_train:
        raise ScheduleError(
            f"num_inference_steps must lie in 1..{t_train}, got {num_inference_steps}"
        )

    betas = torch.linspace(beta_start, beta_end, t_train, dtype=torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    alpha_bars_prev = torch.cat([alpha_bars.new_ones(1), alpha_bars[:-1]])
    sigmas = torch.sqrt(betas * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars))

    ratio = t_train // num_inference_steps
    steps = tuple(position * ratio + 1 for position in range(num_inference_steps))

    return NoiseSchedule(
        t_train=t_train,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        sigmas=sigmas,
        inference_steps=steps,
    )


def _gather(values: torch.Tensor, t: Timestep, like: torch.Tensor) -> torch.Tensor | float:
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        gathered = values.to(like.device)[t.long() - 1].to(like.dtype)
        return gathered.reshape(-1, *([1] * (like.ndim - 1)))
    return float(values[int(t) - 1])


def q_sample(x0: LatentImage, eps: LatentImage, alpha_bar: float | torch.Tensor) -> LatentImage:
    return alpha_bar**0.5 * x0 + (1.0 - alpha_bar) ** 0.5 * eps


def forward_noise(
    x0: LatentImage, t: Timestep, eps: LatentImage, schedule: NoiseSchedule
) -> LatentImage:
    """x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps."""
    schedule.check_timestep(t)
    return q_sample(x0, eps, _gather(schedule.alpha_bars, t, x0))


def ddpm_update(
    x_t: LatentImage,
    eps_pred: LatentImage,
    noise: LatentImage,
    alpha: float | torch.Tensor,
    alpha_bar: float | torch.Tensor,
    sigma: float | torch.Tensor,
) -> LatentImage:
    if isinstance(alpha, float) and alpha == 1.0:
        eps_coef = 0.0
    else:
        eps_coef = (1.0 - alpha) / (1.0 - alpha_bar) ** 0.5
    return (x_t - eps_coef * eps_pred) / alpha**0.5 + sigma * noise


def ddpm_step(
    x_t: LatentImage,
    t: Timestep,
    eps_pred: LatentImage,
    noise: LatentImage,
    schedule: NoiseSchedule,
) -> LatentImage:
    """One ancestral step x_t -> x_{t-1}."""
    schedule.check_timestep(t)
    return ddpm_update(
        x_t,
        eps_pred,
        noise,
        _gather(schedule.alphas, t, x_t),
        _gather(schedule.alpha_bars, t, x_t),
        _gather(schedule.sigmas, t, x_t),
    )


def training_loss(
    x0: LatentImage,
    eps: LatentImage,
    t: Timestep,
    cond: ConditioningSequence,
    denoiser: NoisePredictor,
    schedule: NoiseSchedule,
    reduction: Literal["sum", "sample_mean", "mean"] = "sum",
) -> torch.Tensor:
    """‖eps − ε_θ(x_t, t, C)‖².

    ``sum`` reduces over every element, ``sample_mean`` sums per image then averages over
    the batch, ``mean`` averages over every element.
    """
    x_t = forward_noise(x0, t, eps, schedule)
    squared = (eps - denoiser(x_t, t, cond)) ** 2
    if reduction == "sum":
        return squared.sum()
    if reduction == "sample_mean":
        return squared.flatten(1).sum(dim=1).mean() if squared.ndim == 4 else squared.sum()
    return squared.mean()


def edict_coefficients(alpha_bar: float, alpha_bar_prev: float) -> tuple[float, float]:
    a_t = math.sqrt(alpha_bar_prev / alpha_bar)
    b_t = math.sqrt(1.0 - alpha_bar_prev) - math.sqrt(
        alpha_bar_prev * (1.0 - alpha_bar) / alpha_bar
    )
    return a_t, b_t


def edict_coeffs(t: int, schedule: NoiseSchedule) -> tuple[float, float]:
    """(a_t, b_t) between inference step ``t`` and its predecessor (ᾱ_0 = 1)."""
    previous = schedule.previous_timestep(t)
    return edict_coefficients(schedule.alpha_bar(t), schedule.alpha_bar(previous))


@torch.no_grad()
def ddpm_sample(
    denoiser: NoisePredictor,
    cond: ConditioningSequence,
    schedule: NoiseSchedule,
    shape: tuple[int, ...],
    generator: torch.Generator,
    uncond: ConditioningSequence | None = None,
    w: float = 0.0,
) -> LatentImage:
    """Ancestral sampling over all training timesteps, CFG-guided when ``uncond`` is set."""
    x = torch.randn(shape, generator=generator)
    for t in range(schedule.t_train, 0, -1):
        eps = denoiser(x, t, cond)
        if uncond is not None:
            eps = cfg_combine(eps, denoiser(x, t, uncond), w)
        noise = torch.randn(shape, generator=generator) if t > 1 else torch.zeros(shape)
        x = ddpm_step(x, t, eps, noise, schedule)
    return x


@torch.no_grad()
def ddim_sample(
    denoiser: NoisePredictor,
    cond: ConditioningSequence,
    schedule: NoiseSchedule,
    shape: tuple[int, ...],
    generator: torch.Generator,
) -> LatentImage:
    """Deterministic (σ = 0) sampling over the inference steps."""
    x = torch.randn(shape, generator=generator)
    for position in range(schedule.num_inference_steps, 0, -1):
        t = schedule.timestep(position)
        a_t, b_t = edict_coeffs(t, schedule)
        x = a_t * x + b_t * denoiser(x, t, cond)
    return x
