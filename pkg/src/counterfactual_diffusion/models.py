"""Small convolutional networks around the synthetic dataset.

* the target classifier, only ever exposed through ``predict``
* the attribute oracle, whose penultimate layer is also the FID feature encoder
* the identity embedder used for face-similarity metrics
* a contrastively self-supervised encoder for the S³ metric
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .const import CLASSIFIER_ACCURACY_THRESHOLD, ORACLE_ACCURACY_THRESHOLD
from .container import read_container, write_container
from .dataset import AttributeVector, LabeledDataset
from .denoiser import TrainConfig
from .exceptions import DivergenceError, ValidationError

_LOGGER = logging.getLogger(__name__)

ORACLE_NOISE = 0.05


@dataclass(frozen=True)
class BackboneConfig:
    channels: int = 1
    image_size: int = 32
    width: int = 16
    feature_dim: int = 64
    groups: int = 8
    outputs: int = 2


class ConvNet(nn.Module):
    def __init__(self, config: BackboneConfig) -> None:
        super().__init__()
        self.config = config
        width = config.width
        self.body = nn.Sequential(
            nn.Conv2d(config.channels, width, 3, padding=1),
            nn.GroupNorm(config.groups, width),
            nn.SiLU(),
            nn.Conv2d(width, width * 2, 3, stride=2, padding=1),
            nn.GroupNorm(config.groups, width * 2),
            nn.SiLU(),
            nn.Conv2d(width * 2, width * 2, 3, stride=2, padding=1),
            nn.GroupNorm(config.groups, width * 2),
            nn.SiLU(),
            nn.Flatten(),
            nn.Linear(width * 2 * (config.image_size // 4) ** 2, config.feature_dim),
            nn.SiLU(),
        )
        self.head = nn.Linear(config.feature_dim, config.outputs)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.body(x))


def build_net(config: BackboneConfig, seed: int) -> ConvNet:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return ConvNet(config)


def _fit(
    model: nn.Module,
    batch_loss: Callable[[torch.Tensor, torch.Generator], torch.Tensor],
    size: int,
    cfg: TrainConfig,
    name: str,
) -> None:
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    generator = torch.Generator().manual_seed(cfg.seed)
    model.train()
    for iteration in range(cfg.iterations):
        index = torch.randint(size, (cfg.batch_size,), generator=generator)
        loss = batch_loss(index, generator)
        if not torch.isfinite(loss):
            _LOGGER.error("%s loss diverged at iteration %s", name, iteration)
            raise DivergenceError(f"Non-finite {name} loss at iteration {iteration}")
        optimizer.zero_grad()
        loss.backward()
        if cfg.max_grad_norm is not None:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
        optimizer.step()
        if iteration % cfg.log_every == 0:
            _LOGGER.info("%s iteration %s loss %.4f", name, iteration, loss.item())
    model.eval().requires_grad_(False)


def _check_nonempty(dataset: LabeledDataset, name: str) -> None:
    if not len(dataset):
        raise ValidationError(f"Cannot train the {name} on an empty dataset")


@dataclass(frozen=True)
class Prediction:
    label: int
    probabilities: tuple[float, ...]

    def __post_init__(self):
        if min(self.probabilities) < 0 or abs(sum(self.probabilities) - 1.0) > 1e-5:
            raise ValidationError(f"Not a probability vector: {self.probabilities}")
        if self.label != int(np.argmax(self.probabilities)):
            raise ValidationError(f"Label {self.label} is not the argmax of {self.probabilities}")


@dataclass(frozen=True)
class AccuracyCheck:
    """Held-out accuracy against the threshold the benchmark expects."""

    accuracy: float
    threshold: float
    split: str

    @property
    def passed(self) -> bool:
        return self.accuracy >= self.threshold

    @property
    def warning(self) -> str | None:
        if self.passed:
            return None
        return (
            f"Classifier accuracy {self.accuracy:.4f} on {self.split} split "
            f"is below {self.threshold}"
        )


class TorchClassifier:
    """In-process classifier exposing only ``predict``."""

    def __init__(self, model: ConvNet, validation: AccuracyCheck | None = None) -> None:
        self._model = model.eval().requires_grad_(False)
        self.validation = validation

    def predict(self, image: torch.Tensor) -> Prediction:
        with torch.no_grad():
            logits = self._model(image.to(torch.float32).unsqueeze(0))[0]
            probabilities = torch.softmax(logits, dim=0).numpy()
        return Prediction(
            label=int(np.argmax(probabilities)),
            probabilities=tuple(float(value) for value in probabilities),
        )


def accuracy(classifier: TorchClassifier, dataset: LabeledDataset) -> float:
    if not len(dataset):
        return 0.0
    hits = sum(classifier.predict(image).label == label for image, label in dataset)
    return hits / len(dataset)


def train_classifier(
    dataset: LabeledDataset,
    cfg: TrainConfig,
    validation: LabeledDataset | None = None,
    width: int = 16,
    threshold: float = CLASSIFIER_ACCURACY_THRESHOLD,
) -> TorchClassifier:
    """Binary classifier on the class attribute.

    Falling short of ``threshold`` on ``validation`` is recorded on the classifier and
    logged as a warning; training still succeeds.
    """
    _check_nonempty(dataset, "classifier")
    images = dataset.stacked()
    labels = torch.tensor(dataset.labels)
    config = BackboneConfig(
        channels=images.shape[1], image_size=images.shape[-1], width=width, outputs=2
    )
    model = build_net(config, cfg.seed)

    def batch_loss(index: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        return F.cross_entropy(model(images[index]), labels[index])

    _fit(model, batch_loss, len(images), cfg, "classifier")
    classifier = TorchClassifier(model)
    if validation is not None:
        check = AccuracyCheck(accuracy(classifier, validation), threshold, str(validation.split))
        classifier.validation = check
        log = _LOGGER.info if check.passed else _LOGGER.warning
        log("Classifier accuracy %.4f on %s split", check.accuracy, check.split)
    return classifier


class TrainedOracle:
    """Per-attribute oracle for generated images; its features feed FID."""

    def __init__(self, model: ConvNet) -> None:
        self.model = model.eval().requires_grad_(False)

    def attributes(self, image: torch.Tensor) -> AttributeVector:
        with torch.no_grad():
            logits = self.model(image.to(torch.float32).unsqueeze(0))[0]
        return AttributeVector(tuple(int(value > 0) for value in logits))

    def features(self, images: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            return self.model.features(images.to(torch.float32)).to(torch.float64).numpy()


def oracle_accuracy(oracle: TrainedOracle, dataset: LabeledDataset) -> float:
    """Fraction of (image, attribute) decisions that match the generating vector."""
    if not len(dataset):
        return 0.0
    hits = sum(
        sum(a == b for a, b in zip(oracle.attributes(image).bits, vector.bits, strict=True))
        for image, vector in zip(dataset.images, dataset.attributes, strict=True)
    )
    return hits / (len(dataset) * len(dataset.attributes[0]))


def train_oracle(
    dataset: LabeledDataset,
    cfg: TrainConfig,
    validation: LabeledDataset | None = None,
    width: int = 16,
) -> TrainedOracle:
    """Multi-label attribute network trained on noise-augmented renders."""
    _check_nonempty(dataset, "oracle")
    images = dataset.stacked()
    targets = torch.tensor([vector.bits for vector in dataset.attributes], dtype=torch.float32)
    config = BackboneConfig(
        channels=images.shape[1],
        image_size=images.shape[-1],
        width=width,
        outputs=targets.shape[1],
    )
    model = build_net(config, cfg.seed)

    def batch_loss(index: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        x = images[index]
        x = x + ORACLE_NOISE * torch.randn(x.shape, generator=generator)
        return F.binary_cross_entropy_with_logits(model(x), targets[index])

    _fit(model, batch_loss, len(images), cfg, "oracle")
    oracle = TrainedOracle(model)
    if validation is not None:
        score = oracle_accuracy(oracle, validation)
        log = _LOGGER.warning if score < ORACLE_ACCURACY_THRESHOLD else _LOGGER.info
        log("Oracle accuracy %.4f on %s split", score, validation.split)
    return oracle


class Embedder:
    """Penultimate-layer embeddings of a trained network."""

    def __init__(self, model: ConvNet) -> None:
        self.model = model.eval().requires_grad_(False)

    def embed(self, images: torch.Tensor) -> np.ndarray:
        with torch.no_grad():
            return self.model.features(images.to(torch.float32)).to(torch.float64).numpy()


def train_identity_embedder(dataset: LabeledDataset, cfg: TrainConfig, width: int = 16) -> Embedder:
    """Identity classification over background textures; embeddings stay identity-specific
    while facial attributes change."""
    _check_nonempty(dataset, "identity embedder")
    images = dataset.stacked()
    identities = torch.tensor(dataset.identities)
    config = BackboneConfig(
        channels=images.shape[1],
        image_size=images.shape[-1],
        width=width,
        outputs=int(identities.max()) + 1,
    )
    model = build_net(config, cfg.seed)

    def batch_loss(index: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        x = images[index]
        x = x + ORACLE_NOISE * torch.randn(x.shape, generator=generator)
        return F.cross_entropy(model(x), identities[index])

    _fit(model, batch_loss, len(images), cfg, "identity")
    return Embedder(model)


def _augment(x: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    shifts = torch.randint(-2, 3, (2,), generator=generator)
    x = torch.roll(x, shifts=(int(shifts[0]), int(shifts[1])), dims=(2, 3))
    offset = 0.1 * torch.randn(x.shape[0], 1, 1, 1, generator=generator)
    return (x + offset + ORACLE_NOISE * torch.randn(x.shape, generator=generator)).clamp(-1, 1)


def train_ssl_encoder(
    dataset: LabeledDataset,
    cfg: TrainConfig,
    width: int = 16,
    temperature: float = 0.2,
) -> Embedder:
    """Contrastive (NT-Xent) encoder on two augmented views per image, no labels."""
    _check_nonempty(dataset, "self-supervised encoder")
    images = dataset.stacked()
    config = BackboneConfig(
        channels=images.shape[1], image_size=images.shape[-1], width=width, outputs=32
    )
    model = build_net(config, cfg.seed)

    def batch_loss(index: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
        x = images[index]
        z = F.normalize(model(torch.cat([_augment(x, generator), _augment(x, generator)])), dim=1)
        similarity = z @ z.T / temperature
        similarity.fill_diagonal_(float("-inf"))
        n = len(index)
        targets = torch.cat([torch.arange(n, 2 * n), torch.arange(n)])
        return F.cross_entropy(similarity, targets)

    _fit(model, batch_loss, len(images), cfg, "ssl")
    return Embedder(model)


def save_network(path: Path, kind: str, model: ConvNet, meta: dict | None = None) -> None:
    meta = {"config": asdict(model.config), **(meta or {})}
    write_container(path, kind, meta, model.state_dict())


def load_network(path: Path, kind: str) -> tuple[ConvNet, dict]:
    container = read_container(path, kind, "train")
    model = ConvNet(BackboneConfig(**container.meta["config"]))
    model.load_state_dict(container.tensors)
    return model.eval().requires_grad_(False), container.meta


def save_classifier(path: Path, classifier: TorchClassifier, meta: dict | None = None) -> None:
    if classifier.validation is not None:
        meta = {"validation": asdict(classifier.validation), **(meta or {})}
    save_network(path, "classifier", classifier._model, meta)


def load_classifier(path: Path) -> TorchClassifier:
    model, meta = load_network(path, "classifier")
    validation = meta.get("validation")
    return TorchClassifier(model, AccuracyCheck(**validation) if validation else None)


def classifier_warnings(path: Path) -> list[str]:
    """Warnings recorded with a classifier checkpoint, for the benchmark manifest."""
    validation = load_classifier(path).validation
    if validation is None or validation.passed:
        return []
    return [validation.warning]


def save_oracle(path: Path, oracle: TrainedOracle, meta: dict | None = None) -> None:
    save_network(path, "oracle", oracle.model, meta)


def load_oracle(path: Path) -> TrainedOracle:
    model, _ = load_network(path, "oracle")
    return TrainedOracle(model)


def save_embedder(path: Path, kind: str, embedder: Embedder) -> None:
    save_network(path, kind, embedder.model)


def load_embedder(path: Path, kind: str) -> Embedder:
    model, _ = load_network(path, kind)
    return Embedder(model)
