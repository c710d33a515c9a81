"""Conditional noise prediction network ε_θ(x_t, t, C) and its training loop."""

from __future__ import annotations

import logging
import math
import threading
from collections.abc import Callable
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import torch
import torch.nn.functional as F
from torch import nn

from .const import CAPTION_WORD_DROPOUT, CONDITIONING_DROPOUT
from .container import read_container, write_container
from .exceptions import ConditioningError, DivergenceError, ValidationError
from .schedule import (
    ConditioningSequence,
    LatentImage,
    NoisePredictor,
    NoiseSchedule,
    Timestep,
    training_loss,
)

if TYPE_CHECKING:
    from .dataset import LabeledDataset
    from .embeddings import EmbeddingTable

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int
    batch_size: int
    learning_rate: float
    weight_decay: float = 0.0
    seed: int = 0
    max_grad_norm: float | None = 1.0
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ValidationError("Iteration, batch and logging counts must be positive")
        if self.learning_rate <= 0:
            raise ValidationError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 1
    image_size: int = 32
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 2)
    cond_dim: int = 32
    time_dim: int = 64
    num_heads: int = 4
    groups: int = 8
    max_cond_len: int = 16


class SinusoidalEmbedding(nn.Module):
    def __init__(self, dim: int) -> None:
        super().__init__()
        self.dim = dim

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        half = self.dim // 2
        frequencies = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
        )
        angles = t[:, None] * frequencies[None, :]
        return torch.cat([angles.sin(), angles.cos()], dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, time_dim: int, groups: int) -> None:
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time = nn.Linear(time_dim, out_channels)
        self.norm2 = nn.GroupNorm(groups, out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = (
            nn.Conv2d(in_channels, out_channels, 1)
            if in_channels != out_channels
            else nn.Identity()
        )

    def forward(self, x: torch.Tensor, t_emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time(t_emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Pixels attend over the conditioning sequence."""

    def __init__(self, channels: int, cond_dim: int, num_heads: int, groups: int) -> None:
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.attention = nn.MultiheadAttention(
            channels, num_heads, kdim=cond_dim, vdim=cond_dim, batch_first=True
        )

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        batch, channels, height, width = x.shape
        query = self.norm(x).flatten(2).transpose(1, 2)
        attended, _ = self.attention(query, cond, cond, need_weights=False)
        return x + attended.transpose(1, 2).reshape(batch, channels, height, width)


class Denoiser(nn.Module):
    """U-Net with sinusoidal time embedding and cross-attention at every resolution."""

    def __init__(self, config: DenoiserConfig) -> None:
        super().__init__()
        self.config = config
        chs = [config.base_channels * mult for mult in config.channel_mults]

        self.time_mlp = nn.Sequential(
            SinusoidalEmbedding(config.time_dim),
            nn.Linear(config.time_dim, config.time_dim * 2),
            nn.SiLU(),
            nn.Linear(config.time_dim * 2, config.time_dim),
        )
        self.in_conv = nn.Conv2d(config.channels, chs[0], 3, padding=1)

        self.downs = nn.ModuleList()
        for level, ch in enumerate(chs):
            last = level == len(chs) - 1
            self.downs.append(
                nn.ModuleDict(
                    {
                        "res": ResidualBlock(ch, ch, config.time_dim, config.groups),
                        "attn": CrossAttention(
                            ch, config.cond_dim, config.num_heads, config.groups
                        ),
                        "down": nn.Identity()
                        if last
                        else nn.Conv2d(ch, chs[level + 1], 4, stride=2, padding=1),
                    }
                )
            )

        self.mid1 = ResidualBlock(chs[-1], chs[-1], config.time_dim, config.groups)
        self.mid_attn = CrossAttention(chs[-1], config.cond_dim, config.num_heads, config.groups)
        self.mid2 = ResidualBlock(chs[-1], chs[-1], config.time_dim, config.groups)

        self.ups = nn.ModuleList()
        current = chs[-1]
        for level in reversed(range(len(chs))):
            ch = chs[level]
            last = level == len(chs) - 1
            self.ups.append(
                nn.ModuleDict(
                    {
                        "up": nn.Identity()
                        if last
                        else nn.ConvTranspose2d(current, ch, 4, stride=2, padding=1),
                        "res": ResidualBlock(ch * 2, ch, config.time_dim, config.groups),
                        "attn": CrossAttention(
                            ch, config.cond_dim, config.num_heads, config.groups
                        ),
                    }
                )
            )
            current = ch

        self.out_norm = nn.GroupNorm(config.groups, chs[0])
        self.out_conv = nn.Conv2d(chs[0], config.channels, 3, padding=1)

    def forward(self, x_t: LatentImage, t: Timestep, cond: ConditioningSequence) -> LatentImage:
        config = self.config
        unbatched = x_t.ndim == 3
        x = x_t.unsqueeze(0) if unbatched else x_t
        expected = (config.channels, config.image_size, config.image_size)
        if tuple(x.shape[1:]) != expected:
            raise ConditioningError(
                f"Expected images of shape {expected}, got {tuple(x.shape[1:])}"
            )

        if cond.ndim == 2:
            cond = cond.unsqueeze(0).expand(x.shape[0], -1, -1)
        if cond.shape[0] != x.shape[0] or cond.shape[-1] != config.cond_dim:
            raise ConditioningError(f"Conditioning shape {tuple(cond.shape)} does not match input")
        if cond.shape[1] > config.max_cond_len:
            raise ConditioningError(
                f"Conditioning length {cond.shape[1]} exceeds {config.max_cond_len}"
            )
        cond = cond.to(x.dtype)

        t = torch.as_tensor(t, device=x.device).to(x.dtype)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        t_emb = self.time_mlp(t)

        h = self.in_conv(x)
        skips = []
        for block in self.downs:
            h = block["attn"](block["res"](h, t_emb), cond)
            skips.append(h)
            h = block["down"](h)

        h = self.mid1(h, t_emb)
        h = self.mid_attn(h, cond)
        h = self.mid2(h, t_emb)

        for block in self.ups:
            h = block["up"](h)
            h = block["res"](torch.cat([h, skips.pop()], dim=1), t_emb)
            h = block["attn"](h, cond)

        out = self.out_conv(F.silu(self.out_norm(h)))
        return out.squeeze(0) if unbatched else out


def predict_noise(
    denoiser: NoisePredictor, x_t: LatentImage, t: Timestep, cond: ConditioningSequence
) -> LatentImage:
    """Predicted noise residual, same shape as ``x_t``."""
    return denoiser(x_t, t, cond)


class CallCounter:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._value = 0

    def increment(self, amount: int = 1) -> None:
        with self._lock:
            self._value += amount

    @property
    def value(self) -> int:
        with self._lock:
            return self._value


class CountingDenoiser:
    """Counts every evaluation of the wrapped predictor."""

    def __init__(self, denoiser: NoisePredictor, counter: CallCounter | None = None) -> None:
        self.denoiser = denoiser
        self.counter = counter or CallCounter()

    @property
    def calls(self) -> int:
        return self.counter.value

    def __call__(self, x_t: LatentImage, t: Timestep, cond: ConditioningSequence) -> LatentImage:
        self.counter.increment()
        return self.denoiser(x_t, t, cond)


def build_denoiser(config: DenoiserConfig, seed: int) -> Denoiser:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return Denoiser(config)


def parameter_count(module: nn.Module) -> int:
    return sum(parameter.numel() for parameter in module.parameters())


def _caption_batch(
    captions: torch.Tensor,
    word_positions: torch.Tensor,
    null_id: int,
    generator: torch.Generator,
) -> torch.Tensor:
    ids = captions.clone()
    word_drop = torch.rand(ids.shape, generator=generator) < CAPTION_WORD_DROPOUT
    ids[word_drop & word_positions] = null_id
    caption_drop = torch.rand(ids.shape[0], generator=generator) < CONDITIONING_DROPOUT
    ids[caption_drop] = null_id
    return ids


def train_denoiser(
    dataset: LabeledDataset,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    embeddings: EmbeddingTable,
    config: DenoiserConfig,
    on_loss: Callable[[int, float], None] | None = None,
) -> Denoiser:
    """Train ε_θ on captioned images with conditioning dropout.

    A dropped caption is replaced by a sequence of null tokens, which attends identically
    to the single-token empty conditioning. ``on_loss`` receives every iteration's loss.
    """
    if not len(dataset):
        raise ValidationError("Cannot train a denoiser on an empty dataset")
    if embeddings.cond_dim != config.cond_dim:
        raise ConditioningError("Embedding dimension does not match the denoiser")

    denoiser = build_denoiser(config, cfg.seed)
    denoiser.train()
    optimizer = torch.optim.AdamW(
        denoiser.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    generator = torch.Generator().manual_seed(cfg.seed)

    images = dataset.stacked()
    captions = torch.tensor(
        [embeddings.caption_ids(attributes.bits) for attributes in dataset.attributes]
    )
    # Attribute words sit between "A picture with a" and "<end>".
    word_positions = torch.zeros(captions.shape[1], dtype=torch.bool)
    word_positions[4:-1] = True
    table = embeddings.weights.detach()

    _LOGGER.info(
        "Training denoiser with %s parameters on %s images",
        parameter_count(denoiser),
        len(dataset),
    )
    for iteration in range(cfg.iterations):
        index = torch.randint(len(images), (cfg.batch_size,), generator=generator)
        x0 = images[index]
        t = torch.randint(1, schedule.t_train + 1, (cfg.batch_size,), generator=generator)
        eps = torch.randn(x0.shape, generator=generator)
        ids = _caption_batch(captions[index], word_positions, embeddings.null_id, generator)

        loss = training_loss(x0, eps, t, table[ids], denoiser, schedule, reduction="mean")
        if not torch.isfinite(loss):
            _LOGGER.error("Denoiser loss diverged at iteration %s: %s", iteration, loss.item())
            raise DivergenceError(f"Non-finite denoiser loss at iteration {iteration}")

        optimizer.zero_grad()
        loss.backward()
        if cfg.max_grad_norm is not None:
            nn.utils.clip_grad_norm_(denoiser.parameters(), cfg.max_grad_norm)
        optimizer.step()
        if on_loss is not None:
            on_loss(iteration, loss.item())

        if iteration % cfg.log_every == 0:
            _LOGGER.info("Denoiser iteration %s loss %.4f", iteration, loss.item())

    return denoiser.eval().requires_grad_(False)


def flops_per_call(denoiser: Denoiser, cond_len: int) -> int:
    """Floating point operations of one single-image forward pass (2 per multiply-add)."""
    config = denoiser.config
    total = 0

    def conv_hook(module: nn.Conv2d | nn.ConvTranspose2d, inputs, output):
        nonlocal total
        kernel = module.kernel_size[0] * module.kernel_size[1]
        if isinstance(module, nn.ConvTranspose2d):
            total += 2 * inputs[0].numel() * module.out_channels * kernel // module.groups
        else:
            total += 2 * output.numel() * module.in_channels * kernel // module.groups

    def linear_hook(module: nn.Linear, inputs, output):
        nonlocal total
        rows = output.numel() // module.out_features
        total += 2 * rows * module.in_features * module.out_features

    def attention_hook(module: nn.MultiheadAttention, inputs, output):
        nonlocal total
        query, key = inputs[0], inputs[1]
        embed, kdim = module.embed_dim, module.kdim
        queries, keys = query.shape[0] * query.shape[1], key.shape[0] * key.shape[1]
        projections = queries * embed * embed + 2 * keys * kdim * embed + queries * embed * embed
        scores = 2 * queries * key.shape[1] * embed
        total += 2 * projections + 2 * scores

    hooks = []
    for module in denoiser.modules():
        if isinstance(module, nn.Conv2d | nn.ConvTranspose2d):
            hooks.append(module.register_forward_hook(conv_hook))
        elif isinstance(module, nn.Linear) and not isinstance(
            module, nn.modules.linear.NonDynamicallyQuantizableLinear
        ):
            hooks.append(module.register_forward_hook(linear_hook))
        elif isinstance(module, nn.MultiheadAttention):
            hooks.append(module.register_forward_hook(attention_hook))

    try:
        parameter = next(denoiser.parameters())
        x = torch.zeros(
            1, config.channels, config.image_size, config.image_size, dtype=parameter.dtype
        )
        cond = torch.zeros(1, cond_len, config.cond_dim, dtype=parameter.dtype)
        with torch.no_grad():
            denoiser(x, 1, cond)
    finally:
        for hook in hooks:
            hook.remove()
    return total


def save_denoiser(path: Path, denoiser: Denoiser, meta: dict | None = None) -> None:
    write_container(
        path,
        "denoiser",
        {"config": asdict(denoiser.config), **(meta or {})},
        denoiser.state_dict(),
    )


def load_denoiser(path: Path) -> Denoiser:
    container = read_container(path, "denoiser", "train")
    raw = container.meta["config"]
    config = DenoiserConfig(**{**raw, "channel_mults": tuple(raw["channel_mults"])})
    denoiser = Denoiser(config)
    denoiser.load_state_dict(container.tensors)
    return denoiser.eval().requires_grad_(False)
