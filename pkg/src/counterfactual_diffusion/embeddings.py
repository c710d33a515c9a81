"""Token embedding tables, prompt templates and textual-inversion distillation.

Fixed tokens (template words, caption vocabulary, ``<null>``, ``<end>``) never change
after the table is created. Learnable tokens are the context tokens ``<context_k>`` and
the class tokens ``<class_i_k>``; distillation only ever writes those rows.
"""

from __future__ import annotations

import hashlib
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np
import torch

from .const import ATTRIBUTE_WORDS, END_TOKEN, NULL_TOKEN, TEMPLATE_WORDS
from .container import read_container, write_container
from .exceptions import ConditioningError, DivergenceError, EmptySubsetError, ValidationError
from .schedule import (
    ConditioningSequence,
    NoisePredictor,
    NoiseSchedule,
    forward_noise,
    training_loss,
)

if TYPE_CHECKING:
    from .dataset import LabeledDataset
    from .denoiser import TrainConfig
    from .pipeline import BlackBoxClassifier

_LOGGER = logging.getLogger(__name__)

FIXED_VOCABULARY: tuple[str, ...] = (
    NULL_TOKEN,
    END_TOKEN,
    *TEMPLATE_WORDS,
    *(word for words in ATTRIBUTE_WORDS for word in words),
)


@dataclass(frozen=True)
class DistillConfig:
    context_tokens: int = 3
    class_tokens: int = 3
    use_context: bool = True

    def __post_init__(self):
        if self.context_tokens < 1 or self.class_tokens < 1:
            raise ValidationError("Prompts need at least one learnable token")

    @property
    def active_context_tokens(self) -> int:
        return self.context_tokens if self.use_context else 0


def context_token(index: int) -> str:
    return f"<context_{index}>"


def class_token(class_id: int, index: int) -> str:
    return f"<class_{class_id}_{index}>"


class PromptKind(StrEnum):
    NULL = "null"
    CONTEXT = "context"
    CLASS = "class"


@dataclass(frozen=True)
class PromptTemplate:
    kind: PromptKind
    context_token_ids: tuple[int, ...] = ()
    class_token_ids: tuple[int, ...] = ()

    def __post_init__(self):
        if self.kind != PromptKind.CLASS and self.class_token_ids:
            raise ConditioningError(f"{self.kind} prompts take no class tokens")


@dataclass
class EmbeddingTable:
    tokens: dict[str, int]
    weights: torch.Tensor
    fixed: frozenset[str]
    num_classes: int = 0
    context_tokens: int = 0
    class_tokens: int = 0
    trained: dict[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        if self.weights.ndim != 2 or self.weights.shape[0] != len(self.tokens):
            raise ConditioningError("Embedding rows must match the token map")
        if not self.fixed <= self.tokens.keys():
            raise ConditioningError("Fixed tokens missing from the token map")

    @property
    def cond_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def learnable(self) -> list[str]:
        return [token for token in self.tokens if token not in self.fixed]

    def id(self, token: str) -> int:
        try:
            return self.tokens[token]
        except KeyError:
            raise ConditioningError(f"Unknown token {token}") from None

    def ids(self, tokens: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.id(token) for token in tokens)

    @property
    def null_id(self) -> int:
        return self.id(NULL_TOKEN)

    def embed(self, ids: Sequence[int] | torch.Tensor) -> ConditioningSequence:
        index = torch.as_tensor(ids, dtype=torch.long)
        if bool(torch.any((index < 0) | (index >= len(self.tokens)))):
            raise ConditioningError(f"Unknown token id in {index.tolist()}")
        return self.weights[index]

    def fixed_digest(self) -> str:
        """Hash over every fixed row, unchanged by distillation."""
        digest = hashlib.sha256()
        for token in sorted(self.fixed):
            digest.update(token.encode())
            digest.update(self.weights[self.tokens[token]].detach().numpy().tobytes())
        return digest.hexdigest()

    def clone(self) -> EmbeddingTable:
        return EmbeddingTable(
            tokens=dict(self.tokens),
            weights=self.weights.detach().clone(),
            fixed=self.fixed,
            num_classes=self.num_classes,
            context_tokens=self.context_tokens,
            class_tokens=self.class_tokens,
            trained=dict(self.trained),
        )

    def context_template(self) -> PromptTemplate:
        ids = self.ids([context_token(k) for k in range(self.context_tokens)])
        return PromptTemplate(PromptKind.CONTEXT, context_token_ids=ids)

    def class_template(self, class_id: int) -> PromptTemplate:
        if not 0 <= class_id < self.num_classes:
            raise ConditioningError(f"No class tokens for class {class_id}")
        context = self.ids([context_token(k) for k in range(self.context_tokens)])
        ids = self.ids([class_token(class_id, k) for k in range(self.class_tokens)])
        return PromptTemplate(PromptKind.CLASS, context_token_ids=context, class_token_ids=ids)

    def null_template(self) -> PromptTemplate:
        return PromptTemplate(PromptKind.NULL)

    def caption_ids(self, attributes: Sequence[int]) -> tuple[int, ...]:
        """Caption "A picture with a <word per attribute> <end>"."""
        words = [ATTRIBUTE_WORDS[index][bit] for index, bit in enumerate(attributes)]
        return self.ids(["A", "picture", "with", "a", *words, END_TOKEN])


def create_vocabulary(cond_dim: int, seed: int) -> EmbeddingTable:
    """Table holding only the fixed tokens, seeded standard normal rows."""
    generator = torch.Generator().manual_seed(seed)
    return EmbeddingTable(
        tokens={name: index for index, name in enumerate(FIXED_VOCABULARY)},
        weights=torch.randn(len(FIXED_VOCABULARY), cond_dim, generator=generator),
        fixed=frozenset(FIXED_VOCABULARY),
    )


def add_learnable_tokens(
    vocabulary: EmbeddingTable,
    num_classes: int,
    context_tokens: int,
    class_tokens: int,
    seed: int,
) -> EmbeddingTable:
    """Append context and class rows drawn standard normal and scaled by the fixed-row RMS."""
    if vocabulary.learnable:
        raise ConditioningError("Vocabulary already holds learnable tokens")
    generator = torch.Generator().manual_seed(seed)
    names = [
        *vocabulary.tokens,
        *(context_token(k) for k in range(context_tokens)),
        *(class_token(i, k) for i in range(num_classes) for k in range(class_tokens)),
    ]
    fixed_rows = vocabulary.weights.detach()
    rms = fixed_rows.pow(2).mean().sqrt()
    count = len(names) - len(fixed_rows)
    learnable_rows = torch.randn(count, vocabulary.cond_dim, generator=generator)
    return EmbeddingTable(
        tokens={name: index for index, name in enumerate(names)},
        weights=torch.cat([fixed_rows, rms * learnable_rows]),
        fixed=vocabulary.fixed,
        num_classes=num_classes,
        context_tokens=context_tokens,
        class_tokens=class_tokens,
    )


def create_table(
    cond_dim: int,
    num_classes: int,
    context_tokens: int,
    class_tokens: int,
    seed: int,
) -> EmbeddingTable:
    return add_learnable_tokens(
        create_vocabulary(cond_dim, seed), num_classes, context_tokens, class_tokens, seed + 1
    )


def render_ids(template: PromptTemplate, table: EmbeddingTable) -> tuple[int, ...]:
    match template.kind:
        case PromptKind.NULL:
            return (table.null_id,)
        case PromptKind.CONTEXT:
            return (table.id("A"), *template.context_token_ids, table.id("picture"))
        case PromptKind.CLASS:
            return (
                table.id("A"),
                *template.context_token_ids,
                *table.ids(["image", "with", "a"]),
                *template.class_token_ids,
                table.id(END_TOKEN),
            )


def render_prompt(template: PromptTemplate, table: EmbeddingTable) -> ConditioningSequence:
    """Ordered embedding sequence for a template."""
    return table.embed(render_ids(template, table))


def _optimize_tokens(
    images: torch.Tensor,
    template: PromptTemplate,
    tokens: Sequence[str],
    denoiser: NoisePredictor,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    table: EmbeddingTable,
) -> EmbeddingTable:
    result = table.clone()
    if cfg.iterations == 0:
        return result

    ids = torch.tensor(render_ids(template, table), dtype=torch.long)
    rows = torch.tensor(table.ids(tokens), dtype=torch.long)
    learned = torch.nn.Parameter(table.weights[rows].detach().clone())
    frozen = table.weights.detach()
    optimizer = torch.optim.SGD([learned], lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    generator = torch.Generator().manual_seed(cfg.seed)

    for iteration in range(cfg.iterations):
        index = torch.randint(len(images), (cfg.batch_size,), generator=generator)
        x0 = images[index]
        t = torch.randint(1, schedule.t_train + 1, (cfg.batch_size,), generator=generator)
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
        weights = frozen.index_copy(0, rows, learned)
        cond = weights[ids].unsqueeze(0).expand(cfg.batch_size, -1, -1)

        loss = training_loss(x0, eps, t, cond, denoiser, schedule, reduction="sample_mean")
        if not torch.isfinite(loss):
            _LOGGER.error("Embedding loss diverged at iteration %s: %s", iteration, loss.item())
            raise DivergenceError(f"Non-finite embedding loss at iteration {iteration}")

        optimizer.zero_grad()
        loss.backward()
        if cfg.max_grad_norm is not None:
            torch.nn.utils.clip_grad_norm_([learned], cfg.max_grad_norm)
        optimizer.step()

        if iteration % cfg.log_every == 0:
            _LOGGER.info("Tokens %s iteration %s loss %.4f", tokens[0], iteration, loss.item())

    result.weights = frozen.index_copy(0, rows, learned.detach())
    return result


def _freeze(denoiser: NoisePredictor) -> None:
    if isinstance(denoiser, torch.nn.Module):
        denoiser.eval()
        denoiser.requires_grad_(False)


def train_context_embeddings(
    dataset: LabeledDataset,
    denoiser: NoisePredictor,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    table: EmbeddingTable,
) -> EmbeddingTable:
    """Learn the context tokens on the full unlabeled training set under "A <context> picture"."""
    if not len(dataset):
        raise ValidationError("Cannot distill context tokens from an empty dataset")
    _freeze(denoiser)
    tokens = [context_token(k) for k in range(table.context_tokens)]
    if not tokens:
        _LOGGER.info("No context tokens configured, skipping context distillation")
        return table.clone()
    _LOGGER.info("Distilling %s context tokens on %s images", len(tokens), len(dataset))
    result = _optimize_tokens(
        dataset.stacked(), table.context_template(), tokens, denoiser, schedule, cfg, table
    )
    result.trained["context"] = True
    return result


def filter_by_prediction(
    dataset: LabeledDataset, classifier: BlackBoxClassifier, class_id: int
) -> list[int]:
    return [
        index
        for index, image in enumerate(dataset.images)
        if classifier.predict(image).label == class_id
    ]


def train_class_embeddings(
    dataset: LabeledDataset,
    classifier: BlackBoxClassifier,
    class_id: int,
    denoiser: NoisePredictor,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    table: EmbeddingTable,
) -> EmbeddingTable:
    """Learn the tokens of one class on the images the classifier predicts as that class,
    under "A <context> image with a <class> <end>". Context tokens stay frozen."""
    _freeze(denoiser)
    subset = filter_by_prediction(dataset, classifier, class_id)
    if not subset:
        raise EmptySubsetError(class_id)
    _LOGGER.info(
        "Distilling class %s tokens on %s of %s images", class_id, len(subset), len(dataset)
    )
    tokens = [class_token(class_id, k) for k in range(table.class_tokens)]
    images = dataset.stacked()[torch.tensor(subset)]
    result = _optimize_tokens(
        images, table.class_template(class_id), tokens, denoiser, schedule, cfg, table
    )
    result.trained[f"class_{class_id}"] = True
    return result


def merge_class_tables(base: EmbeddingTable, tables: Sequence[EmbeddingTable]) -> EmbeddingTable:
    """Combine tables distilled for different classes in parallel from the same base."""
    result = base.clone()
    for table in tables:
        for name, trained in table.trained.items():
            if not trained or not name.startswith("class_"):
                continue
            class_id = int(name.removeprefix("class_"))
            rows = list(table.ids([class_token(class_id, k) for k in range(table.class_tokens)]))
            result.weights[rows] = table.weights[rows]
            result.trained[name] = True
    return result


def save_table(path: Path, table: EmbeddingTable) -> None:
    write_container(
        path,
        "embeddings",
        {
            "tokens": table.tokens,
            "fixed": sorted(table.fixed),
            "num_classes": table.num_classes,
            "context_tokens": table.context_tokens,
            "class_tokens": table.class_tokens,
            "trained": table.trained,
        },
        {"weights": table.weights},
    )


def load_table(path: Path, phase: str = "distill") -> EmbeddingTable:
    container = read_container(path, "embeddings", phase)
    meta = container.meta
    return EmbeddingTable(
        tokens={name: int(index) for name, index in meta["tokens"].items()},
        weights=container.tensors["weights"],
        fixed=frozenset(meta["fixed"]),
        num_classes=meta["num_classes"],
        context_tokens=meta["context_tokens"],
        class_tokens=meta["class_tokens"],
        trained=dict(meta["trained"]),
    )


def prompt_loss(
    images: torch.Tensor,
    cond: ConditioningSequence,
    denoiser: NoisePredictor,
    schedule: NoiseSchedule,
    seed: int,
) -> np.ndarray:
    """Per-image noise-prediction loss under one prompt with seeded (t, ε)."""
    generator = torch.Generator().manual_seed(seed)
    t = torch.randint(1, schedule.t_train + 1, (len(images),), generator=generator)
    eps = torch.randn(images.shape, generator=generator, dtype=images.dtype)
    with torch.no_grad():
        batch_cond = cond.unsqueeze(0).expand(len(images), -1, -1)
        x_t = forward_noise(images, t, eps, schedule)
        residual = (eps - denoiser(x_t, t, batch_cond)) ** 2
    return residual.flatten(1).sum(dim=1).numpy()


def distill(
    dataset: LabeledDataset,
    classifier: BlackBoxClassifier,
    denoiser: NoisePredictor,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    distill_cfg: DistillConfig,
    vocabulary: EmbeddingTable,
    num_classes: int = 2,
) -> EmbeddingTable:
    """Context tokens first on the unlabeled set, then each class on its predicted subset.

    ``vocabulary`` is the fixed-token table the denoiser was trained with.
    """
    table = add_learnable_tokens(
        vocabulary,
        num_classes,
        distill_cfg.active_context_tokens,
        distill_cfg.class_tokens,
        cfg.seed,
    )
    digest = table.fixed_digest()
    table = train_context_embeddings(dataset, denoiser, schedule, cfg, table)
    tables = [
        train_class_embeddings(dataset, classifier, class_id, denoiser, schedule, cfg, table)
        for class_id in range(num_classes)
    ]
    table = merge_class_tables(table, tables)
    if table.fixed_digest() != digest:
        raise ConditioningError("Fixed token embeddings changed during distillation")
    return table
