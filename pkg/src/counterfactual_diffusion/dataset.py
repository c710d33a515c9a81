"""Synthetic face-like images with exactly controllable binary attributes.

Attributes, in index order:

0. smile: mouth curved up (1) or down (0), the default class attribute
1. blush: bright cheek marks, correlated with attribute 0
2. light background (1) or dark (0)
3. border frame
4. hat band
5. corner ornament

Each image also carries an identity: one of ``identities`` background textures, used as the
identity analog for face-similarity metrics.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Iterator, Sequence
from dataclasses import asdict, dataclass, field
from enum import StrEnum
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .exceptions import MissingArtifactError, ValidationError

_LOGGER = logging.getLogger(__name__)

RENDER_SIZE = 32
MAX_ATTRIBUTES = 6

BACKGROUND_DARK = -0.6
BACKGROUND_LIGHT = -0.1
SKIN = 0.3
INK = -0.8
BRIGHT = 0.9

_CENTER = 15.5
_FACE_RADIUS = 11.0
_MOUTH_COLUMNS = range(11, 21)


class Split(StrEnum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass(frozen=True)
class RendererParams:
    attribute_probs: tuple[float, ...] = (0.5, 0.5, 0.5, 0.4, 0.3, 0.4)
    confounder: int = 1
    correlation: float = 0.6
    noise: float = 0.02
    texture_amplitude: float = 0.08
    identities: int = 8


@dataclass(frozen=True)
class SyntheticSpec:
    image_size: tuple[int, int, int] = (1, RENDER_SIZE, RENDER_SIZE)
    num_attributes: int = MAX_ATTRIBUTES
    class_attribute: int = 0
    samples_per_split: dict[str, int] = field(
        default_factory=lambda: {"train": 4000, "val": 500, "test": 200}
    )
    seed: int = 0
    renderer_params: RendererParams = field(default_factory=RendererParams)

    def __post_init__(self):
        channels, height, width = self.image_size
        if channels not in (1, 3) or height != RENDER_SIZE or width != RENDER_SIZE:
            raise ValidationError(
                f"Renderer draws 1 or 3 channel {RENDER_SIZE}x{RENDER_SIZE} images"
            )
        if not 4 <= self.num_attributes <= MAX_ATTRIBUTES:
            raise ValidationError(f"num_attributes must lie in 4..{MAX_ATTRIBUTES}")
        if not 0 <= self.class_attribute < self.num_attributes:
            raise ValidationError("class_attribute must index an attribute")
        params = self.renderer_params
        if len(params.attribute_probs) < self.num_attributes:
            raise ValidationError("attribute_probs must cover every attribute")
        confounder = params.confounder
        if confounder == self.class_attribute or not 0 <= confounder < self.num_attributes:
            raise ValidationError("confounder must be a different attribute")
        if set(self.samples_per_split) - set(Split):
            raise ValidationError(f"Unknown splits in {sorted(self.samples_per_split)}")


@dataclass(frozen=True)
class AttributeVector:
    bits: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.bits)

    def __getitem__(self, index: int) -> int:
        return self.bits[index]

    def flip(self, index: int) -> AttributeVector:
        bits = list(self.bits)
        bits[index] = 1 - bits[index]
        return AttributeVector(tuple(bits))


@dataclass
class LabeledDataset:
    images: list[torch.Tensor]
    labels: list[int]
    attributes: list[AttributeVector]
    identities: list[int]
    split: Split

    def __post_init__(self):
        if not len(self.images) == len(self.labels) == len(self.attributes) == len(self.identities):
            raise ValidationError("Dataset lists must have equal length")

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self) -> Iterator[tuple[torch.Tensor, int]]:
        return zip(self.images, self.labels, strict=True)

    def stacked(self) -> torch.Tensor:
        return torch.stack(self.images)

    def subset(self, indices: Sequence[int]) -> LabeledDataset:
        return LabeledDataset(
            images=[self.images[i] for i in indices],
            labels=[self.labels[i] for i in indices],
            attributes=[self.attributes[i] for i in indices],
            identities=[self.identities[i] for i in indices],
            split=self.split,
        )


def _texture(identity: int, amplitude: float) -> np.ndarray:
    fx, fy = 1 + identity % 3, identity // 3
    rows, cols = np.mgrid[0:RENDER_SIZE, 0:RENDER_SIZE]
    return amplitude * np.sin(2 * np.pi * (fx * cols + fy * rows) / 16.0)


def _face_mask() -> np.ndarray:
    rows, cols = np.mgrid[0:RENDER_SIZE, 0:RENDER_SIZE]
    return (rows - _CENTER) ** 2 + (cols - _CENTER) ** 2 <= _FACE_RADIUS**2


def _mouth_rows(smile: int) -> list[tuple[int, int]]:
    pixels = []
    for col in _MOUTH_COLUMNS:
        curve = round(2 * ((col - _CENTER) / 4.5) ** 2)
        pixels.append((22 - curve if smile else 20 + curve, col))
    return pixels


def _diamond() -> list[tuple[int, int]]:
    return [
        (27 + dy, 27 + dx)
        for dy in range(-2, 3)
        for dx in range(-2, 3)
        if abs(dy) + abs(dx) <= 2
    ]


def render_clean(attributes: AttributeVector, identity: int, spec: SyntheticSpec) -> np.ndarray:
    """Noise-free (H, W) render in [-1, 1]."""
    bits = list(attributes.bits) + [0] * (MAX_ATTRIBUTES - len(attributes))
    params = spec.renderer_params
    face = _face_mask()

    shade = BACKGROUND_LIGHT if bits[2] else BACKGROUND_DARK
    canvas = np.full((RENDER_SIZE, RENDER_SIZE), shade)
    canvas = canvas + _texture(identity, params.texture_amplitude)
    canvas[face] = SKIN

    canvas[11:13, 11:13] = INK
    canvas[11:13, 19:21] = INK
    for row, col in _mouth_rows(bits[0]):
        canvas[row, col] = INK
    if bits[1]:
        canvas[17:19, 7:9] = BRIGHT
        canvas[17:19, 23:25] = BRIGHT
    if bits[3]:
        canvas[[0, -1], :] = BRIGHT
        canvas[:, [0, -1]] = BRIGHT
    if bits[4]:
        canvas[2:6, 10:22] = BRIGHT
    if bits[5]:
        for row, col in _diamond():
            canvas[row, col] = BRIGHT
    return canvas


def render_image(
    attributes: AttributeVector,
    identity: int,
    spec: SyntheticSpec,
    rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """(C, H, W) float32 image; pixel noise is added when ``rng`` is given."""
    canvas = render_clean(attributes, identity, spec)
    if rng is not None and spec.renderer_params.noise > 0:
        canvas = canvas + rng.normal(0.0, spec.renderer_params.noise, canvas.shape)
    canvas = np.clip(canvas, -1.0, 1.0)
    channels = spec.image_size[0]
    return torch.from_numpy(np.repeat(canvas[None], channels, axis=0).astype(np.float32))


def sample_attributes(spec: SyntheticSpec, rng: np.random.Generator) -> AttributeVector:
    """Independent Bernoulli attributes, except the confounder copies the class attribute
    with probability ``correlation`` (exact correlation when both marginals match)."""
    params = spec.renderer_params
    probs = np.asarray(params.attribute_probs[: spec.num_attributes])
    bits = (rng.random(spec.num_attributes) < probs).astype(int)
    if rng.random() < params.correlation:
        bits[params.confounder] = bits[spec.class_attribute]
    return AttributeVector(tuple(int(bit) for bit in bits))


def generate_dataset(spec: SyntheticSpec, split: Split = Split.TRAIN) -> LabeledDataset:
    """Deterministic per (seed, split); every split draws from its own random stream."""
    split = Split(split)
    rng = np.random.default_rng([spec.seed, list(Split).index(split)])
    images, labels, attributes, identities = [], [], [], []
    for _ in range(spec.samples_per_split.get(split, 0)):
        vector = sample_attributes(spec, rng)
        identity = int(rng.integers(spec.renderer_params.identities))
        images.append(render_image(vector, identity, spec, rng))
        labels.append(vector[spec.class_attribute])
        attributes.append(vector)
        identities.append(identity)
    return LabeledDataset(images, labels, attributes, identities, split)


def generate_splits(spec: SyntheticSpec) -> dict[Split, LabeledDataset]:
    return {Split(split): generate_dataset(spec, Split(split)) for split in spec.samples_per_split}


def _region_means(canvas: np.ndarray) -> list[tuple[float, float, float]]:
    """(score, threshold, scale) per attribute; score > threshold decodes as 1."""
    blush = np.concatenate([canvas[17:19, 7:9].ravel(), canvas[17:19, 23:25].ravel()])
    border = np.concatenate([canvas[[0, -1], :].ravel(), canvas[1:-1, [0, -1]].ravel()])
    return [
        (float(canvas[20, 15:17].mean() - canvas[22, 15:17].mean()), 0.0, BRIGHT - INK),
        (float(blush.mean()), (SKIN + BRIGHT) / 2, BRIGHT - SKIN),
        (float(canvas[1:5, 1:5].mean()), (BACKGROUND_DARK + BACKGROUND_LIGHT) / 2, 0.5),
        (float(border.mean()), 0.4, BRIGHT - BACKGROUND_LIGHT),
        (float(canvas[2:4, 12:20].mean()), 0.4, BRIGHT - BACKGROUND_LIGHT),
        (float(canvas[26:29, 26:29].mean()), 0.4, BRIGHT - BACKGROUND_LIGHT),
    ]


def oracle_attributes(x: torch.Tensor, spec: SyntheticSpec) -> AttributeVector:
    """Rule-based decode of every attribute from pixels, exact on clean renders."""
    canvas = x.detach().to(torch.float64).mean(dim=0).numpy()
    regions = _region_means(canvas)[: spec.num_attributes]
    bits = tuple(int(score > threshold) for score, threshold, _ in regions)
    margin = min(abs(score - threshold) / scale for score, threshold, scale in regions)
    if margin < 0.1:
        _LOGGER.warning("Low-confidence attribute decode %s (margin %.3f)", bits, margin)
    return AttributeVector(bits)


class RuleOracle:
    def __init__(self, spec: SyntheticSpec) -> None:
        self.spec = spec

    def attributes(self, image: torch.Tensor) -> AttributeVector:
        return oracle_attributes(image, self.spec)


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """[-1, 1] -> [0, 255] via round((x + 1) * 127.5), channels last."""
    scaled = ((image.detach().float().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    array = scaled.permute(1, 2, 0).numpy()
    return array[:, :, 0] if array.shape[2] == 1 else array


def from_uint8(array: np.ndarray) -> torch.Tensor:
    if array.ndim == 2:
        array = array[:, :, None]
    return torch.from_numpy(array.astype(np.float32) / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def save_png(path: Path, image: torch.Tensor) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def load_png(path: Path, channels: int | None = None) -> torch.Tensor:
    with Image.open(path) as img:
        if channels is not None:
            img = img.convert("L" if channels == 1 else "RGB")
        return from_uint8(np.asarray(img))


def save_dataset(root: Path, spec: SyntheticSpec, splits: dict[Split, LabeledDataset]) -> None:
    """Directory of PNGs plus ``manifest.json`` echoing the ``SyntheticSpec``."""
    manifest = {"spec": asdict(spec), "splits": {}}
    for split, dataset in splits.items():
        records = []
        for index, (image, label) in enumerate(dataset):
            name = f"{split}/{index:05d}.png"
            save_png(root / name, image)
            records.append(
                {
                    "file": name,
                    "label": label,
                    "attributes": list(dataset.attributes[index].bits),
                    "identity": dataset.identities[index],
                }
            )
        manifest["splits"][str(split)] = records
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    _LOGGER.info("Wrote dataset to %s", root)


def load_dataset(root: Path, split: Split) -> LabeledDataset:
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise MissingArtifactError(str(manifest_path), "gen-data")
    manifest = json.loads(manifest_path.read_text())
    channels = manifest["spec"]["image_size"][0]
    records = manifest["splits"].get(str(split), [])
    return LabeledDataset(
        images=[load_png(root / record["file"], channels) for record in records],
        labels=[record["label"] for record in records],
        attributes=[AttributeVector(tuple(record["attributes"])) for record in records],
        identities=[record["identity"] for record in records],
        split=Split(split),
    )
