"""Exactly invertible coupled two-stream sampler.

``step_index`` counts inference positions: 0 is the clean image and ``k`` is the noisy state
at ``schedule.timestep(k)``. Denoising from ``k`` uses the coefficients of that timestep;
inverting from ``k`` uses the coefficients of ``k + 1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from .exceptions import ScheduleError, ValidationError
from .guidance import GuidanceConfig, guided_score
from .schedule import (
    ConditioningSequence,
    LatentImage,
    NoisePredictor,
    NoiseSchedule,
    edict_coeffs,
)

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class EdictState:
    x: LatentImage
    y: LatentImage
    step_index: int = 0

    @classmethod
    def from_image(cls, x0: LatentImage) -> EdictState:
        return cls(x=x0.clone(), y=x0.clone(), step_index=0)


@dataclass(frozen=True)
class EdictConfig:
    p: float
    tau: int
    guidance: GuidanceConfig

    def __post_init__(self):
        if not 0 < self.p < 1:
            raise ValidationError(f"Mixing parameter p must lie in (0, 1), got {self.p}")
        if self.tau < 0:
            raise ValidationError(f"tau must be non-negative, got {self.tau}")


@torch.no_grad()
def edict_denoise_step(
    state: EdictState,
    denoiser: NoisePredictor,
    cond_pos: ConditioningSequence,
    cond_neg: ConditioningSequence,
    cfg: EdictConfig,
    schedule: NoiseSchedule,
) -> EdictState:
    """One denoising step k -> k-1, four denoiser evaluations."""
    if state.step_index <= 0:
        raise ScheduleError("Cannot denoise below step 0")
    t = schedule.timestep(state.step_index)
    a_t, b_t = edict_coeffs(t, schedule)
    p = cfg.p

    def score(z: LatentImage) -> LatentImage:
        return guided_score(denoiser, z, t, cond_pos, cond_neg, cfg.guidance)

    x_inter = a_t * state.x + b_t * score(state.y)
    y_inter = a_t * state.y + b_t * score(x_inter)
    x_prev = p * x_inter + (1 - p) * y_inter
    y_prev = p * y_inter + (1 - p) * x_prev
    return EdictState(x_prev, y_prev, state.step_index - 1)


@torch.no_grad()
def edict_invert_step(
    state: EdictState,
    denoiser: NoisePredictor,
    cond_pos: ConditioningSequence,
    cond_neg: ConditioningSequence,
    cfg: EdictConfig,
    schedule: NoiseSchedule,
) -> EdictState:
    """One inversion step k -> k+1, the exact inverse of ``edict_denoise_step``.

    The second score is taken on the updated y stream, which is what the denoise step
    evaluates first.
    """
    if state.step_index >= schedule.num_inference_steps:
        raise ScheduleError("Cannot invert past the last inference step")
    t = schedule.timestep(state.step_index + 1)
    a_t, b_t = edict_coeffs(t, schedule)
    p = cfg.p

    def score(z: LatentImage) -> LatentImage:
        return guided_score(denoiser, z, t, cond_pos, cond_neg, cfg.guidance)

    y_inter = (state.y - (1 - p) * state.x) / p
    x_inter = (state.x - (1 - p) * y_inter) / p
    y_next = (y_inter - b_t * score(x_inter)) / a_t
    x_next = (x_inter - b_t * score(y_next)) / a_t
    return EdictState(x_next, y_next, state.step_index + 1)


def invert(
    x0: LatentImage,
    denoiser: NoisePredictor,
    cond_pos: ConditioningSequence,
    cond_neg: ConditioningSequence,
    cfg: EdictConfig,
    schedule: NoiseSchedule,
) -> EdictState:
    """Start both streams at ``x0`` and take ``tau`` inversion steps."""
    if cfg.tau > schedule.num_inference_steps:
        raise ValidationError(
            f"tau={cfg.tau} exceeds {schedule.num_inference_steps} inference steps"
        )
    state = EdictState.from_image(x0)
    for _ in range(cfg.tau):
        state = edict_invert_step(state, denoiser, cond_pos, cond_neg, cfg, schedule)
    return state


def denoise_state(
    state: EdictState,
    denoiser: NoisePredictor,
    cond_pos: ConditioningSequence,
    cond_neg: ConditioningSequence,
    cfg: EdictConfig,
    schedule: NoiseSchedule,
) -> EdictState:
    while state.step_index > 0:
        state = edict_denoise_step(state, denoiser, cond_pos, cond_neg, cfg, schedule)
    return state


def denoise(
    state: EdictState,
    denoiser: NoisePredictor,
    cond_pos: ConditioningSequence,
    cond_neg: ConditioningSequence,
    cfg: EdictConfig,
    schedule: NoiseSchedule,
) -> LatentImage:
    """Denoise back to step 0 and emit the x stream clamped to [-1, 1]."""
    final = denoise_state(state, denoiser, cond_pos, cond_neg, cfg, schedule)
    overshoot = float(final.x.abs().max())
    if not torch.isfinite(final.x).all():
        _LOGGER.warning("Non-finite pixels in denoised output")
    _LOGGER.debug("Pre-clamp max |pixel| %.4f", overshoot)
    return final.x.clamp(-1.0, 1.0)
