"""End-to-end runs on the default synthetic benchmark; minutes to hours on CPU."""

from dataclasses import dataclass
from functools import partial

import anyio
import numpy as np
import pytest
import torch

from counterfactual_diffusion.config import RunConfig
from counterfactual_diffusion.dataset import LabeledDataset, Split, generate_splits
from counterfactual_diffusion.denoiser import Denoiser, build_denoiser, train_denoiser
from counterfactual_diffusion.edict import EdictConfig, denoise, invert
from counterfactual_diffusion.embeddings import (
    DistillConfig,
    EmbeddingTable,
    context_token,
    create_vocabulary,
    distill,
    filter_by_prediction,
    prompt_loss,
    render_prompt,
)
from counterfactual_diffusion.guidance import GuidanceConfig, GuidanceMode
from counterfactual_diffusion.metrics import count_trend_inversions
from counterfactual_diffusion.models import TorchClassifier, train_classifier
from counterfactual_diffusion.pipeline import success_grid
from counterfactual_diffusion.schedule import NoiseSchedule, ddpm_sample

pytestmark = pytest.mark.slow

SWEEP_TAUS = (15, 20, 25)
SWEEP_WS = (2.0, 4.0, 6.0)


@dataclass
class Trained:
    config: RunConfig
    splits: dict[Split, LabeledDataset]
    schedule: NoiseSchedule
    denoiser: Denoiser
    classifier: TorchClassifier
    tables: dict[DistillConfig, EmbeddingTable]
    denoiser_losses: list[float]


@pytest.fixture(scope="module")
def trained() -> Trained:
    config = RunConfig()
    splits = generate_splits(config.data)
    schedule = config.schedule.build()
    vocabulary = create_vocabulary(config.denoiser.cond_dim, config.seed)
    train_set = splits[Split.TRAIN]
    losses = []
    denoiser = train_denoiser(
        train_set,
        schedule,
        config.denoiser_train,
        vocabulary,
        config.denoiser,
        on_loss=lambda _, loss: losses.append(loss),
    )
    classifier = train_classifier(train_set, config.classifier_train, splits[Split.VAL])
    tables = {
        distill_cfg: distill(
            train_set,
            classifier,
            denoiser,
            schedule,
            config.distill_train,
            distill_cfg,
            vocabulary,
        )
        for distill_cfg in (
            config.distill,
            DistillConfig(use_context=False),
            DistillConfig(context_tokens=1, class_tokens=1),
        )
    }
    return Trained(config, splits, schedule, denoiser, classifier, tables, losses)


@pytest.mark.parametrize("w", [0.0, 3.0, 6.0])
@pytest.mark.parametrize("tau", [10, 25])
@pytest.mark.parametrize("dtype,tolerance", [(torch.float32, 1e-3), (torch.float64, 1e-6)])
def test_round_trip_at_depth(tau, w, dtype, tolerance):
    config = RunConfig()
    schedule = config.schedule.build()
    denoiser = build_denoiser(config.denoiser, seed=0).eval().requires_grad_(False).to(dtype)
    generator = torch.Generator().manual_seed(tau)
    x0 = (torch.rand(32, 1, 32, 32, generator=generator) * 2 - 1).to(dtype)
    source = torch.randn(7, config.denoiser.cond_dim, generator=generator).to(dtype)
    target = torch.randn(7, config.denoiser.cond_dim, generator=generator).to(dtype)
    cfg = EdictConfig(p=0.93, tau=tau, guidance=GuidanceConfig(GuidanceMode.NEGATIVE, w))

    state = invert(x0, denoiser, source, target, cfg, schedule)
    output = denoise(state, denoiser, source, target, cfg, schedule)

    assert state.step_index == tau
    assert float((output - x0).abs().max()) <= tolerance


def test_distilled_class_prompts(trained):
    table = trained.tables[trained.config.distill]
    held_out = trained.splits[Split.VAL]
    for class_id in range(2):
        indices = filter_by_prediction(held_out, trained.classifier, class_id)
        assert len(indices) >= 64
        images = held_out.subset(indices).stacked()
        own = render_prompt(table.class_template(class_id), table)
        other = render_prompt(table.class_template(1 - class_id), table)
        gap = prompt_loss(images, other, trained.denoiser, trained.schedule, seed=class_id)
        gap = gap - prompt_loss(images, own, trained.denoiser, trained.schedule, seed=class_id)
        assert float(np.mean(gap)) > 0


def test_denoiser_loss_improves_early(trained):
    losses = np.asarray(trained.denoiser_losses)
    assert len(losses) == trained.config.denoiser_train.iterations
    early = losses[: len(losses) // 10]
    window = max(len(early) // 10, 1)
    smoothed = np.convolve(early, np.ones(window) / window, mode="valid")
    assert smoothed[-1] < smoothed[0]


def test_ddpm_sample_matches_training_data(trained):
    images = trained.splits[Split.TRAIN].stacked()
    table = trained.tables[trained.config.distill]
    samples = ddpm_sample(
        trained.denoiser,
        render_prompt(table.null_template(), table),
        trained.schedule,
        (256, *images.shape[1:]),
        torch.Generator().manual_seed(trained.config.seed),
    )
    std = float(images.std())
    assert abs(float(samples.mean()) - float(images.mean())) <= 0.2 * std
    assert float(samples.std()) == pytest.approx(std, rel=0.2)


def _random_context(table: EmbeddingTable, seed: int) -> EmbeddingTable:
    baseline = table.clone()
    generator = torch.Generator().manual_seed(seed)
    for k in range(table.context_tokens):
        row = table.id(context_token(k))
        baseline.weights[row] = torch.randn(table.cond_dim, generator=generator)
    return baseline


def test_distilled_context_prompt(trained):
    table = trained.tables[trained.config.distill]
    held_out = trained.splits[Split.VAL]
    assert len(held_out) >= 64
    images = held_out.stacked()
    template = table.context_template()
    learned = render_prompt(template, table)
    random = render_prompt(template, _random_context(table, trained.config.seed))
    gap = prompt_loss(images, random, trained.denoiser, trained.schedule, seed=0)
    gap = gap - prompt_loss(images, learned, trained.denoiser, trained.schedule, seed=0)
    assert float(np.mean(gap)) > 0


def _grid(trained, table, taus, ws, mode):
    return anyio.run(
        partial(
            success_grid,
            trained.splits[Split.TEST].images,
            trained.classifier,
            table,
            trained.denoiser,
            trained.schedule,
            taus,
            ws,
            mode=mode,
            workers=4,
        )
    )


def test_success_grows_with_depth_and_scale(trained):
    table = trained.tables[trained.config.distill]
    grid = _grid(trained, table, SWEEP_TAUS, SWEEP_WS, GuidanceMode.NEGATIVE)
    assert count_trend_inversions(grid) <= 2
    assert grid[-1, -1] >= 0.8


def test_negative_guidance_beats_cfg(trained):
    table = trained.tables[trained.config.distill]
    centre = ([SWEEP_TAUS[1]], [SWEEP_WS[1]])
    negative = _grid(trained, table, *centre, GuidanceMode.NEGATIVE)[0, 0]
    cfg = _grid(trained, table, *centre, GuidanceMode.CFG)[0, 0]
    assert negative >= cfg


@pytest.mark.parametrize(
    "distill_cfg",
    [DistillConfig(use_context=False), DistillConfig(context_tokens=1, class_tokens=1)],
)
def test_ablations_run(trained, distill_cfg):
    table = trained.tables[distill_cfg]
    grid = _grid(trained, table, [SWEEP_TAUS[1]], [SWEEP_WS[1]], GuidanceMode.NEGATIVE)
    assert 0.0 <= grid[0, 0] <= 1.0
