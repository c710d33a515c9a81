import pytest
import torch

from counterfactual_diffusion.dataset import AttributeVector, LabeledDataset, Split
from counterfactual_diffusion.denoiser import Denoiser, DenoiserConfig, build_denoiser
from counterfactual_diffusion.embeddings import EmbeddingTable, create_table
from counterfactual_diffusion.models import Prediction
from counterfactual_diffusion.schedule import NoiseSchedule, build_schedule

TINY_SIZE = 8
TINY_CONFIG = DenoiserConfig(
    channels=1,
    image_size=TINY_SIZE,
    base_channels=4,
    channel_mults=(1, 2),
    cond_dim=8,
    time_dim=8,
    num_heads=1,
    groups=2,
    max_cond_len=16,
)


class MeanClassifier:
    """Two-class stub scoring the mean pixel; counts its queries."""

    def __init__(self, scale: float = 8.0, offset: float = 0.0) -> None:
        self.scale = scale
        self.offset = offset
        self.queries = 0

    def predict(self, image: torch.Tensor) -> Prediction:
        self.queries += 1
        p1 = float(torch.sigmoid(self.scale * (image.double().mean() - self.offset)))
        probabilities = (1.0 - p1, p1)
        return Prediction(label=int(p1 > 0.5), probabilities=probabilities)


class ScriptedClassifier:
    """Answers with ``labels`` in order, repeating the last one."""

    def __init__(self, *labels: int) -> None:
        self.labels = labels
        self.queries = 0

    def predict(self, image: torch.Tensor) -> Prediction:
        label = self.labels[min(self.queries, len(self.labels) - 1)]
        self.queries += 1
        probabilities = tuple(1.0 if index == label else 0.0 for index in range(2))
        return Prediction(label=label, probabilities=probabilities)


def zero_denoiser(x_t: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
    return torch.zeros_like(x_t)


@pytest.fixture
def tiny_denoiser() -> Denoiser:
    return build_denoiser(TINY_CONFIG, seed=0).eval().requires_grad_(False)


@pytest.fixture
def schedule() -> NoiseSchedule:
    return build_schedule(1000, 1e-4, 0.02, 10)


@pytest.fixture
def full_schedule() -> NoiseSchedule:
    return build_schedule(1000, 1e-4, 0.02, 50)


@pytest.fixture
def table() -> EmbeddingTable:
    return create_table(TINY_CONFIG.cond_dim, 2, 1, 1, seed=0)


@pytest.fixture
def tiny_images() -> torch.Tensor:
    generator = torch.Generator().manual_seed(0)
    return torch.rand(6, 1, TINY_SIZE, TINY_SIZE, generator=generator) * 2 - 1


@pytest.fixture
def tiny_dataset(tiny_images: torch.Tensor) -> LabeledDataset:
    count = len(tiny_images)
    return LabeledDataset(
        images=list(tiny_images),
        labels=[index % 2 for index in range(count)],
        attributes=[AttributeVector((index % 2, 0, 1, 0)) for index in range(count)],
        identities=[index % 3 for index in range(count)],
        split=Split.TEST,
    )
