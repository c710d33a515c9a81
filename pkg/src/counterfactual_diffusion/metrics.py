"""Evaluation suite for counterfactual explanations.

Validity (SR), realism (FID, sFID), identity preservation (FS, FVA, S³), sparsity (MNAC),
spurious correlation (CD), classifier-path confidence (COUT) and efficiency accounting.

CD is the mean absolute difference between pairwise Pearson attribute correlations of
the originals and of the counterfactuals. COUT is the trapezoidal area under the target
probability along the straight path from the original to the counterfactual minus the
same area for the source probability.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import TYPE_CHECKING, Any, Protocol

import numpy as np
import torch
from rich.table import Table

from .const import FVA_THRESHOLD
from .dataset import AttributeVector
from .exceptions import ValidationError
from .schedule import LatentImage

if TYPE_CHECKING:
    from .pipeline import BlackBoxClassifier, CounterfactualResult

_LOGGER = logging.getLogger(__name__)

MIN_CD_PAIRS = 30
COUT_STEPS = 11

FeatureEncoder = Callable[[torch.Tensor], np.ndarray]


class AttributeOracle(Protocol):
    def attributes(self, image: LatentImage) -> AttributeVector: ...


@dataclass(frozen=True)
class MetricReport:
    sr: float
    fid: float | None
    sfid: float | None
    fva: float
    fs: float
    s3: float
    mnac: float
    cd: float | None
    cout: float
    mean_denoiser_calls: float
    flops_per_explanation: float
    n_images: int
    n_valid: int
    sr_by_escalation: tuple[float, ...] = ()
    mean_wall_seconds: float = field(default=0.0, compare=False)

    def to_dict(self, include_timing: bool = False) -> dict[str, Any]:
        """Report fields; wall time only with ``include_timing``."""
        data = asdict(self)
        data["sr_by_escalation"] = list(self.sr_by_escalation)
        if not include_timing:
            del data["mean_wall_seconds"]
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MetricReport:
        return cls(**{**data, "sr_by_escalation": tuple(data.get("sr_by_escalation", ()))})


@dataclass(frozen=True)
class ImageMetrics:
    index: int
    source_class: int
    target_class: int
    flipped: bool
    attempts: int
    denoiser_calls: int
    fs: float
    fva: int
    s3: float
    changed_attributes: int
    cout: float


@dataclass
class EvaluationSuite:
    """Frozen networks the metrics are measured with."""

    classifier: BlackBoxClassifier
    oracle: AttributeOracle
    features: FeatureEncoder
    identity: FeatureEncoder
    ssl: FeatureEncoder
    flops_per_call: int = 0
    cout_steps: int = COUT_STEPS
    sfid_seed: int = 0


def success_rate(results: Sequence[CounterfactualResult]) -> float:
    if not results:
        raise ValidationError("Success rate of an empty result list")
    return sum(result.flipped for result in results) / len(results)


def feature_statistics(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    features = np.asarray(features, dtype=np.float64).reshape(len(features), -1)
    if len(features) < 2:
        raise ValidationError("FID needs at least two images per set")
    return features.mean(axis=0), np.atleast_2d(np.cov(features, rowvar=False))


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Square root of the symmetrized matrix with negative eigenvalues clamped to 0."""
    values, vectors = np.linalg.eigh((matrix + matrix.T) / 2)
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def frechet_distance(
    mu_a: np.ndarray, cov_a: np.ndarray, mu_b: np.ndarray, cov_b: np.ndarray
) -> float:
    sqrt_a = _psd_sqrt(cov_a)
    middle = sqrt_a @ cov_b @ sqrt_a
    values = np.linalg.eigvalsh((middle + middle.T) / 2)
    trace_sqrt = np.sqrt(np.clip(values, 0.0, None)).sum()
    distance = ((mu_a - mu_b) ** 2).sum() + np.trace(cov_a) + np.trace(cov_b) - 2 * trace_sqrt
    return max(float(distance), 0.0)


def fid_features(features_a: np.ndarray, features_b: np.ndarray) -> float:
    return frechet_distance(*feature_statistics(features_a), *feature_statistics(features_b))


def fid(set_a: torch.Tensor, set_b: torch.Tensor, encoder: FeatureEncoder) -> float:
    """Fréchet distance between Gaussian fits of encoder features."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise ValidationError("FID needs at least two images per set")
    return fid_features(encoder(set_a), encoder(set_b))


def split_halves(count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.random.default_rng(seed).permutation(count)
    return np.sort(order[: count // 2]), np.sort(order[count // 2 :])


def sfid(
    originals: torch.Tensor,
    counterfactuals: torch.Tensor,
    encoder: FeatureEncoder,
    seed: int = 0,
    valid: np.ndarray | None = None,
) -> float:
    """Mean of the crosswise FIDs between each half of the originals and the
    counterfactuals of the other half."""
    if valid is None:
        valid = np.ones(len(originals), dtype=bool)
    half_a, half_b = split_halves(len(originals), seed)
    features_real = encoder(originals)
    features_fake = encoder(counterfactuals)

    def crosswise(real: np.ndarray, fake: np.ndarray) -> float:
        return fid_features(features_real[real], features_fake[fake[valid[fake]]])

    return (crosswise(half_a, half_b) + crosswise(half_b, half_a)) / 2


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    norms = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
    if np.any(norms == 0):
        raise ValidationError("Cosine similarity of a zero-norm embedding")
    return (a * b).sum(axis=1) / norms


def fs(x: LatentImage, cf: LatentImage, embedder: FeatureEncoder) -> float:
    embeddings = embedder(torch.stack([x, cf]))
    return float(cosine_similarity(embeddings[:1], embeddings[1:])[0])


def fva(x: LatentImage, cf: LatentImage, embedder: FeatureEncoder) -> int:
    return int(fs(x, cf, embedder) > FVA_THRESHOLD)


def s3(x: LatentImage, cf: LatentImage, encoder: FeatureEncoder) -> float:
    """Similarity under a self-supervised encoder."""
    return fs(x, cf, encoder)


def attribute_matrix(images: Sequence[LatentImage], oracle: AttributeOracle) -> np.ndarray:
    return np.array([oracle.attributes(image).bits for image in images], dtype=np.int64)


def mnac(pairs: Sequence[tuple[LatentImage, LatentImage]], oracle: AttributeOracle) -> float:
    if not pairs:
        return 0.0
    before = attribute_matrix([x for x, _ in pairs], oracle)
    after = attribute_matrix([cf for _, cf in pairs], oracle)
    return float((before != after).sum(axis=1).mean())


def _correlations(matrix: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pearson matrix over the varying columns (zero elsewhere) and the constant-column mask."""
    constant = np.ptp(matrix, axis=0) == 0
    varying = np.flatnonzero(~constant)
    rho = np.zeros((matrix.shape[1], matrix.shape[1]))
    if len(varying) > 1:
        rho[np.ix_(varying, varying)] = np.corrcoef(matrix[:, varying], rowvar=False)
    return rho, constant


def correlation_difference(before: np.ndarray, after: np.ndarray) -> float:
    """Mean |ρ_ab(before) − ρ_ab(after)| over ordered attribute pairs a ≠ b."""
    if len(before) < MIN_CD_PAIRS:
        raise ValidationError(f"CD needs at least {MIN_CD_PAIRS} pairs, got {len(before)}")
    rho_before, constant_before = _correlations(before)
    rho_after, constant_after = _correlations(after)
    constant = constant_before | constant_after
    if constant.any():
        _LOGGER.warning("Constant attribute columns %s excluded from CD", np.flatnonzero(constant))
    k = before.shape[1]
    mask = ~np.eye(k, dtype=bool) & ~constant[:, None] & ~constant[None, :]
    return float(np.abs(rho_before - rho_after)[mask].sum() / (k * (k - 1)))


def cd(
    originals: Sequence[LatentImage],
    counterfactuals: Sequence[LatentImage],
    oracle: AttributeOracle,
) -> float:
    return correlation_difference(
        attribute_matrix(originals, oracle), attribute_matrix(counterfactuals, oracle)
    )


def cout(
    x: LatentImage,
    cf: LatentImage,
    target: int,
    classifier: BlackBoxClassifier,
    n_steps: int = COUT_STEPS,
    source: int | None = None,
) -> float:
    """Target minus source probability area along the interpolation path, in [-1, 1]."""
    if n_steps < 2:
        raise ValidationError("COUT needs at least two interpolation steps")
    lambdas = np.linspace(0.0, 1.0, n_steps)
    predictions = [classifier.predict((1 - lam) * x + lam * cf) for lam in lambdas]
    if source is None:
        source = predictions[0].label
    p_target = np.array([prediction.probabilities[target] for prediction in predictions])
    p_source = np.array([prediction.probabilities[source] for prediction in predictions])
    area = np.trapezoid(p_target, lambdas) - np.trapezoid(p_source, lambdas)
    return float(np.clip(area, -1.0, 1.0))


def efficiency(
    results: Sequence[CounterfactualResult], flops_per_call: int = 0
) -> tuple[float, float, float]:
    """Mean denoiser calls, mean wall seconds and FLOPs per explanation."""
    if not results:
        raise ValidationError("Efficiency of an empty result list")
    calls = float(np.mean([result.denoiser_calls for result in results]))
    seconds = float(np.mean([result.wall_seconds for result in results]))
    return calls, seconds, calls * flops_per_call


def sr_by_escalation(results: Sequence[CounterfactualResult], n_tuples: int) -> list[float]:
    """Success rate when stopping after the first k tuples, for k = 1..n_tuples."""
    if not results:
        raise ValidationError("Success rate of an empty result list")
    return [
        sum(result.flipped and len(result.attempts) <= k for result in results) / len(results)
        for k in range(1, n_tuples + 1)
    ]


def count_trend_inversions(grid: Sequence[Sequence[float]], tolerance: float = 0.0) -> int:
    """Decreases larger than ``tolerance`` between neighbours along either grid axis.

    Rows are ordered by increasing tau and columns by increasing w.
    """
    values = np.asarray(grid, dtype=np.float64)
    return int(
        (np.diff(values, axis=0) < -tolerance).sum() + (np.diff(values, axis=1) < -tolerance).sum()
    )


def evaluate_images(
    results: Sequence[CounterfactualResult], suite: EvaluationSuite
) -> list[ImageMetrics]:
    if not results:
        return []
    originals = torch.stack([result.original for result in results])
    explanations = torch.stack([result.explanation for result in results])
    face = cosine_similarity(suite.identity(originals), suite.identity(explanations))
    ssl = cosine_similarity(suite.ssl(originals), suite.ssl(explanations))
    before = attribute_matrix(originals, suite.oracle)
    after = attribute_matrix(explanations, suite.oracle)
    return [
        ImageMetrics(
            index=index,
            source_class=result.source_class,
            target_class=result.target_class,
            flipped=result.flipped,
            attempts=len(result.attempts),
            denoiser_calls=result.denoiser_calls,
            fs=float(face[index]),
            fva=int(face[index] > FVA_THRESHOLD),
            s3=float(ssl[index]),
            changed_attributes=int((before[index] != after[index]).sum()),
            cout=cout(
                result.original,
                result.explanation,
                result.target_class,
                suite.classifier,
                suite.cout_steps,
                result.source_class,
            ),
        )
        for index, result in enumerate(results)
    ]


def evaluate(
    results: Sequence[CounterfactualResult],
    suite: EvaluationSuite,
    reference: torch.Tensor | None = None,
    rows: Sequence[ImageMetrics] | None = None,
) -> MetricReport:
    """Full suite. FID and sFID use flipped counterfactuals only; the proximity metrics
    use every pair. ``reference`` holds the real images FID compares against and defaults
    to the originals."""
    if not results:
        raise ValidationError("Cannot evaluate an empty result list")
    rows = list(rows) if rows is not None else evaluate_images(results, suite)
    originals = torch.stack([result.original for result in results])
    explanations = torch.stack([result.explanation for result in results])
    valid = np.array([result.flipped for result in results])
    if reference is None:
        reference = originals

    fid_value = sfid_value = None
    if valid.sum() >= 2:
        fid_value = fid(reference, explanations[torch.from_numpy(valid)], suite.features)
        try:
            sfid_value = sfid(originals, explanations, suite.features, suite.sfid_seed, valid)
        except ValidationError as exc:
            _LOGGER.warning("sFID skipped: %s", exc)
    else:
        _LOGGER.warning("FID skipped, only %s valid counterfactuals", int(valid.sum()))

    cd_value = None
    if len(results) >= MIN_CD_PAIRS:
        cd_value = cd(originals, explanations, suite.oracle)
    else:
        _LOGGER.warning("CD skipped, %s pairs is below %s", len(results), MIN_CD_PAIRS)

    calls, seconds, flops = efficiency(results, suite.flops_per_call)
    n_tuples = max(len(result.attempts) for result in results)
    return MetricReport(
        sr=success_rate(results),
        fid=fid_value,
        sfid=sfid_value,
        fva=float(np.mean([row.fva for row in rows])),
        fs=float(np.mean([row.fs for row in rows])),
        s3=float(np.mean([row.s3 for row in rows])),
        mnac=float(np.mean([row.changed_attributes for row in rows])),
        cd=cd_value,
        cout=float(np.mean([row.cout for row in rows])),
        mean_denoiser_calls=calls,
        flops_per_explanation=flops,
        n_images=len(results),
        n_valid=int(valid.sum()),
        sr_by_escalation=tuple(sr_by_escalation(results, n_tuples)),
        mean_wall_seconds=seconds,
    )


def report_table(report: MetricReport, title: str = "Counterfactual metrics") -> Table:
    table = Table(title=title)
    table.add_column("Metric")
    table.add_column("Value", justify="right")
    for item in fields(report):
        value = getattr(report, item.name)
        if value is None:
            text = "n/a"
        elif isinstance(value, float):
            text = f"{value:.4f}"
        elif isinstance(value, tuple):
            text = ", ".join(f"{v:.3f}" for v in value)
        else:
            text = str(value)
        table.add_row(item.name, text)
    return table


def write_csv(path: Path, rows: Sequence[ImageMetrics]) -> None:
    with path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=[item.name for item in fields(ImageMetrics)])
        writer.writeheader()
        for row in rows:
            writer.writerow(asdict(row))
