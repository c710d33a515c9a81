from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import pytest
import torch
from conftest import TINY_CONFIG, TINY_SIZE

from counterfactual_diffusion.dataset import AttributeVector, LabeledDataset, Split
from counterfactual_diffusion.denoiser import (
    CallCounter,
    CountingDenoiser,
    DenoiserConfig,
    TrainConfig,
    build_denoiser,
    flops_per_call,
    load_denoiser,
    parameter_count,
    predict_noise,
    save_denoiser,
    train_denoiser,
)
from counterfactual_diffusion.embeddings import create_vocabulary, prompt_loss, render_ids
from counterfactual_diffusion.exceptions import ConditioningError, ValidationError
from counterfactual_diffusion.schedule import training_loss


def test_tiny_denoiser_budget(tiny_denoiser):
    assert parameter_count(tiny_denoiser) <= 10_000


def test_default_denoiser_budget():
    assert parameter_count(build_denoiser(DenoiserConfig(), seed=0)) <= 2_000_000


def test_predict_noise_shape_and_determinism(tiny_denoiser, table):
    x_t = torch.randn(3, 1, TINY_SIZE, TINY_SIZE, generator=torch.Generator().manual_seed(0))
    cond = table.embed(render_ids(table.class_template(1), table))

    first = predict_noise(tiny_denoiser, x_t, 101, cond)
    second = predict_noise(tiny_denoiser, x_t, 101, cond)

    assert first.shape == x_t.shape
    assert torch.equal(first, second)
    assert predict_noise(tiny_denoiser, x_t[0], 101, cond).shape == x_t[0].shape


@pytest.mark.parametrize(
    "shape,cond_shape",
    [
        ((1, 1, TINY_SIZE + 2, TINY_SIZE), (5, TINY_CONFIG.cond_dim)),
        ((1, 2, TINY_SIZE, TINY_SIZE), (5, TINY_CONFIG.cond_dim)),
        ((1, 1, TINY_SIZE, TINY_SIZE), (5, TINY_CONFIG.cond_dim + 1)),
        ((1, 1, TINY_SIZE, TINY_SIZE), (TINY_CONFIG.max_cond_len + 1, TINY_CONFIG.cond_dim)),
        ((2, 1, TINY_SIZE, TINY_SIZE), (3, 5, TINY_CONFIG.cond_dim)),
    ],
)
def test_predict_noise_mismatch(tiny_denoiser, shape, cond_shape):
    with pytest.raises(ConditioningError):
        predict_noise(tiny_denoiser, torch.zeros(shape), 1, torch.zeros(cond_shape))


def test_embedding_gradient_matches_finite_differences(tiny_denoiser, table, schedule):
    denoiser = tiny_denoiser.double()
    generator = torch.Generator().manual_seed(0)
    x0 = torch.rand(2, 1, TINY_SIZE, TINY_SIZE, dtype=torch.float64, generator=generator) * 2 - 1
    eps = torch.randn(2, 1, TINY_SIZE, TINY_SIZE, dtype=torch.float64, generator=generator)
    t = torch.tensor([101, 501])
    ids = torch.tensor(render_ids(table.class_template(0), table))
    row = table.id("<class_0_0>")
    weights = table.weights.double()

    def loss(embedding: torch.Tensor) -> torch.Tensor:
        cond = weights.index_copy(0, torch.tensor([row]), embedding[None])[ids]
        return training_loss(x0, eps, t, cond.expand(2, -1, -1), denoiser, schedule)

    embedding = weights[row].clone().requires_grad_(True)
    assert torch.autograd.gradcheck(loss, (embedding,), eps=1e-6, atol=1e-6, rtol=1e-3)


def test_counting_denoiser_threads(tiny_denoiser):
    counting = CountingDenoiser(tiny_denoiser)
    x_t = torch.zeros(1, TINY_SIZE, TINY_SIZE)
    cond = torch.zeros(3, TINY_CONFIG.cond_dim)

    with ThreadPoolExecutor(4) as pool:
        list(pool.map(lambda _: counting(x_t, 1, cond), range(20)))

    assert counting.calls == 20


def test_call_counter_shared():
    counter = CallCounter()
    first = CountingDenoiser(lambda x, t, c: x, counter)
    second = CountingDenoiser(lambda x, t, c: x, counter)
    first(torch.zeros(1), 1, None)
    second(torch.zeros(1), 1, None)
    assert counter.value == 2


def test_flops_per_call(tiny_denoiser):
    short = flops_per_call(tiny_denoiser, 1)
    long = flops_per_call(tiny_denoiser, 7)
    assert short > 0
    assert long > short
    assert flops_per_call(tiny_denoiser, 7) == long


def _captioned_dataset(count: int = 8) -> LabeledDataset:
    generator = torch.Generator().manual_seed(0)
    images = list(torch.rand(count, 1, TINY_SIZE, TINY_SIZE, generator=generator) * 2 - 1)
    attributes = [AttributeVector((i % 2, (i // 2) % 2, 0, 1)) for i in range(count)]
    return LabeledDataset(
        images=images,
        labels=[vector[0] for vector in attributes],
        attributes=attributes,
        identities=[0] * count,
        split=Split.TRAIN,
    )


def test_train_denoiser_deterministic(schedule):
    dataset = _captioned_dataset()
    vocabulary = create_vocabulary(TINY_CONFIG.cond_dim, seed=0)
    cfg = TrainConfig(iterations=3, batch_size=4, learning_rate=1e-3, seed=5)

    first = train_denoiser(dataset, schedule, cfg, vocabulary, TINY_CONFIG)
    second = train_denoiser(dataset, schedule, cfg, vocabulary, TINY_CONFIG)

    for a, b in zip(first.parameters(), second.parameters(), strict=True):
        assert torch.equal(a, b)
    assert not any(parameter.requires_grad for parameter in first.parameters())


def _held_out_loss(denoiser, images, vocabulary, schedule) -> float:
    cond = vocabulary.embed([vocabulary.null_id])
    return float(prompt_loss(images, cond, denoiser, schedule, seed=0).mean())


def test_train_denoiser_lowers_held_out_loss(schedule):
    dataset = _captioned_dataset(32)
    generator = torch.Generator().manual_seed(1)
    held_out = torch.rand(32, 1, TINY_SIZE, TINY_SIZE, generator=generator) * 2 - 1
    vocabulary = create_vocabulary(TINY_CONFIG.cond_dim, seed=0)
    cfg = TrainConfig(iterations=300, batch_size=16, learning_rate=5e-3, seed=5)
    history = []

    trained = train_denoiser(
        dataset, schedule, cfg, vocabulary, TINY_CONFIG, on_loss=lambda _, loss: history.append(loss)
    )
    # Same seed, so this is the full run after its first 10% of iterations.
    early = train_denoiser(
        dataset, schedule, replace(cfg, iterations=cfg.iterations // 10), vocabulary, TINY_CONFIG
    )
    untrained = build_denoiser(TINY_CONFIG, cfg.seed).eval()

    baseline = _held_out_loss(untrained, held_out, vocabulary, schedule)
    assert _held_out_loss(early, held_out, vocabulary, schedule) < baseline
    assert _held_out_loss(trained, held_out, vocabulary, schedule) < baseline
    assert len(history) == cfg.iterations


def test_train_denoiser_empty(schedule):
    empty = _captioned_dataset().subset([])
    vocabulary = create_vocabulary(TINY_CONFIG.cond_dim, seed=0)
    cfg = TrainConfig(iterations=1, batch_size=4, learning_rate=1e-3)
    with pytest.raises(ValidationError):
        train_denoiser(empty, schedule, cfg, vocabulary, TINY_CONFIG)


def test_train_denoiser_cond_dim_mismatch(schedule):
    vocabulary = create_vocabulary(TINY_CONFIG.cond_dim + 1, seed=0)
    cfg = TrainConfig(iterations=1, batch_size=4, learning_rate=1e-3)
    with pytest.raises(ConditioningError):
        train_denoiser(_captioned_dataset(), schedule, cfg, vocabulary, TINY_CONFIG)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"iterations": -1, "batch_size": 1, "learning_rate": 0.1},
        {"iterations": 1, "batch_size": 0, "learning_rate": 0.1},
        {"iterations": 1, "batch_size": 1, "learning_rate": 0.0},
    ],
)
def test_train_config_invalid(kwargs):
    with pytest.raises(ValidationError):
        TrainConfig(**kwargs)


def test_denoiser_checkpoint(tmp_path, tiny_denoiser):
    path = tmp_path / "denoiser.ckpt"
    save_denoiser(path, tiny_denoiser)
    loaded = load_denoiser(path)

    assert loaded.config == tiny_denoiser.config
    x_t = torch.randn(1, 1, TINY_SIZE, TINY_SIZE, generator=torch.Generator().manual_seed(0))
    cond = torch.zeros(4, TINY_CONFIG.cond_dim)
    assert torch.equal(loaded(x_t, 11, cond), tiny_denoiser(x_t, 11, cond))
