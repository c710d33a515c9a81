"""Guidance score algebra."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field
from enum import StrEnum
from typing import TYPE_CHECKING

import torch

from .exceptions import ConditioningError, ValidationError

if TYPE_CHECKING:
    from .schedule import ConditioningSequence, LatentImage, NoisePredictor, Timestep


class GuidanceMode(StrEnum):
    CFG = "cfg"
    NEGATIVE = "negative"


def _drift_combine(positive: torch.Tensor, negative: torch.Tensor, w: float) -> torch.Tensor:
    if positive.shape != negative.shape:
        raise ValidationError(f"Shape mismatch {tuple(positive.shape)} != {tuple(negative.shape)}")
    return (1.0 + w) * positive - w * negative


def cfg_combine(eps_cond: LatentImage, eps_uncond: LatentImage, w: float) -> LatentImage:
    """(1 + w)·ε(C) − w·ε(∅)."""
    return _drift_combine(eps_cond, eps_uncond, w)


def negative_combine(eps_target: LatentImage, eps_source: LatentImage, w: float) -> LatentImage:
    """(1 + w)·ε(C_target) − w·ε(C_source): positive drift toward the target, negative
    drift away from the source."""
    return _drift_combine(eps_target, eps_source, w)


_COMBINERS: dict[GuidanceMode, Callable[[torch.Tensor, torch.Tensor, float], torch.Tensor]] = {
    GuidanceMode.CFG: cfg_combine,
    GuidanceMode.NEGATIVE: negative_combine,
}


@dataclass(frozen=True)
class GuidanceConfig:
    mode: GuidanceMode
    w: float
    uncond: torch.Tensor | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.w < 0:
            raise ValidationError(f"Guidance scale must be non-negative, got {self.w}")
        if self.mode == GuidanceMode.CFG and self.uncond is None:
            raise ConditioningError("CFG guidance needs the empty conditioning")


def guided_score(
    denoiser: NoisePredictor,
    x_t: LatentImage,
    t: Timestep,
    cond_pos: ConditioningSequence,
    cond_neg: ConditioningSequence,
    cfg: GuidanceConfig,
) -> LatentImage:
    """Guided noise estimate from exactly two denoiser evaluations.

    In ``cfg`` mode ``cond_neg`` is ignored and the empty conditioning is used instead.
    """
    second = cfg.uncond if cfg.mode == GuidanceMode.CFG else cond_neg
    eps_pos = denoiser(x_t, t, cond_pos)
    eps_second = denoiser(x_t, t, second)
    return _COMBINERS[cfg.mode](eps_pos, eps_second, cfg.w)
