"""Counterfactual generation against a predict-only classifier.

An image is inverted under its predicted (source) class prompt with the target prompt as
negative drift, then denoised with the two prompts swapped. Each (tau, w) tuple of the
escalation schedule is tried in order until the classifier's decision flips.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Any, Protocol

import anyio
import anyio.to_thread
import numpy as np

from .const import EDICT_P, SMILE_ESCALATION
from .dataset import LabeledDataset, save_png
from .denoiser import CountingDenoiser
from .edict import EdictConfig, denoise, invert
from .embeddings import EmbeddingTable, render_prompt
from .exceptions import MissingArtifactError, ValidationError
from .guidance import GuidanceConfig, GuidanceMode
from .metrics import EvaluationSuite, evaluate, evaluate_images, success_rate, write_csv
from .models import Prediction
from .schedule import LatentImage, NoisePredictor, NoiseSchedule

_LOGGER = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
TIMINGS_NAME = "timings.json"
REPORT_NAME = "report.json"
METRICS_CSV_NAME = "metrics.csv"


class BlackBoxClassifier(Protocol):
    def predict(self, image: LatentImage) -> Prediction: ...


class SerializedClassifier:
    """Serializes ``predict`` calls for classifiers that are not safe to share."""

    def __init__(self, classifier: BlackBoxClassifier) -> None:
        self._classifier = classifier
        self._lock = threading.Lock()

    def predict(self, image: LatentImage) -> Prediction:
        with self._lock:
            return self._classifier.predict(image)


@dataclass(frozen=True)
class EscalationSchedule:
    tuples: tuple[tuple[int, float], ...] = SMILE_ESCALATION

    def __post_init__(self):
        if not self.tuples:
            raise ValidationError("Escalation schedule must hold at least one (tau, w) tuple")
        object.__setattr__(self, "tuples", tuple((int(tau), float(w)) for tau, w in self.tuples))
        for tau, w in self.tuples:
            if tau < 1 or w < 0:
                raise ValidationError(f"Invalid escalation tuple ({tau}, {w})")

    def check(self, schedule: NoiseSchedule) -> None:
        for tau, _ in self.tuples:
            if tau > schedule.num_inference_steps:
                raise ValidationError(
                    f"tau={tau} exceeds {schedule.num_inference_steps} inference steps"
                )

    def __len__(self) -> int:
        return len(self.tuples)

    def __iter__(self):
        return iter(self.tuples)


def image_digest(image: LatentImage) -> str:
    data = np.ascontiguousarray(image.detach().numpy(), dtype="<f4").tobytes()
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class AttemptRecord:
    tau: int
    w: float
    flipped: bool
    output_hash: str
    target_probability: float


@dataclass
class CounterfactualResult:
    original: LatentImage
    explanation: LatentImage
    source_class: int
    target_class: int
    flipped: bool
    used_tuple: tuple[int, float] | None
    attempts: list[AttemptRecord]
    classifier_queries: int
    denoiser_calls: int
    wall_seconds: float = field(default=0.0, compare=False)

    def record(self) -> dict[str, Any]:
        """JSON-ready summary without tensors or timings."""
        return {
            "source_class": self.source_class,
            "target_class": self.target_class,
            "flipped": self.flipped,
            "used_tuple": list(self.used_tuple) if self.used_tuple else None,
            "attempts": [asdict(attempt) for attempt in self.attempts],
            "classifier_queries": self.classifier_queries,
            "denoiser_calls": self.denoiser_calls,
        }


def generate_counterfactual(
    x: LatentImage,
    target: int | None,
    classifier: BlackBoxClassifier,
    table: EmbeddingTable,
    denoiser: NoisePredictor,
    schedule: NoiseSchedule,
    esc: EscalationSchedule,
    edict_p: float = EDICT_P,
    mode: GuidanceMode = GuidanceMode.NEGATIVE,
) -> CounterfactualResult:
    """Explain ``x`` towards ``target``; ``None`` targets the next class after the prediction.

    Escalation exhaustion is not an error: the result carries ``flipped=False`` and the last
    attempt's output.
    """
    esc.check(schedule)
    start = time.perf_counter()
    initial = classifier.predict(x)
    queries = 1
    source = initial.label
    if target is None:
        target = (source + 1) % table.num_classes
    if not 0 <= target < table.num_classes:
        raise ValidationError(f"No class tokens for target class {target}")
    if target == source:
        raise ValidationError(f"Image is already predicted as target class {target}")

    cond_source = render_prompt(table.class_template(source), table)
    cond_target = render_prompt(table.class_template(target), table)
    uncond = render_prompt(table.null_template(), table)
    counting = CountingDenoiser(denoiser)

    attempts: list[AttemptRecord] = []
    explanation = x
    used_tuple = None
    for tau, w in esc:
        cfg = EdictConfig(p=edict_p, tau=tau, guidance=GuidanceConfig(mode, w, uncond))
        state = invert(x, counting, cond_source, cond_target, cfg, schedule)
        explanation = denoise(state, counting, cond_target, cond_source, cfg, schedule)
        prediction = classifier.predict(explanation)
        queries += 1
        flipped = prediction.label == target
        attempts.append(
            AttemptRecord(
                tau=tau,
                w=w,
                flipped=flipped,
                output_hash=image_digest(explanation),
                target_probability=prediction.probabilities[target],
            )
        )
        _LOGGER.debug("Attempt (%s, %s) flipped=%s", tau, w, flipped)
        if flipped:
            used_tuple = (tau, w)
            break

    return CounterfactualResult(
        original=x,
        explanation=explanation,
        source_class=source,
        target_class=target,
        flipped=used_tuple is not None,
        used_tuple=used_tuple,
        attempts=attempts,
        classifier_queries=queries,
        denoiser_calls=counting.calls,
        wall_seconds=time.perf_counter() - start,
    )


def file_digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def dump_json(path: Path, data: Any) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


@dataclass
class BenchmarkManifest:
    config: dict[str, Any]
    records: list[dict[str, Any]]
    artifacts: dict[str, str]
    report: dict[str, Any] | None = None
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def write(self, path: Path) -> None:
        dump_json(path, self.to_dict())

    @classmethod
    def read(cls, path: Path) -> BenchmarkManifest:
        if not path.exists():
            raise MissingArtifactError(str(path), "evaluate")
        data = json.loads(path.read_text())
        return cls(**data)

    def verify(self, root: Path) -> None:
        """Every referenced image exists and matches its recorded hash."""
        for record in self.records:
            for key in ("original", "explanation"):
                path = root / record[key]
                if not path.exists() or file_digest(path) != record[f"{key}_sha256"]:
                    raise ValidationError(f"Image {path} is missing or was modified")


def _write_images(out_dir: Path, index: int, result: CounterfactualResult) -> dict[str, str]:
    paths = {
        "original": Path("images") / f"{index:05d}_original.png",
        "explanation": Path("images") / f"{index:05d}_counterfactual.png",
    }
    save_png(out_dir / paths["original"], result.original)
    save_png(out_dir / paths["explanation"], result.explanation)
    entry = {key: path.as_posix() for key, path in paths.items()}
    for key, path in paths.items():
        entry[f"{key}_sha256"] = file_digest(out_dir / path)
    return entry


async def explain_all(
    images: Sequence[LatentImage],
    classifier: BlackBoxClassifier,
    table: EmbeddingTable,
    denoiser: NoisePredictor,
    schedule: NoiseSchedule,
    esc: EscalationSchedule,
    *,
    edict_p: float = EDICT_P,
    mode: GuidanceMode = GuidanceMode.NEGATIVE,
    workers: int = 1,
    thread_safe: bool = False,
    on_result: Callable[[int, CounterfactualResult], None] | None = None,
) -> list[CounterfactualResult]:
    """Explain every image towards the opposite class with at most ``workers`` in flight.

    Results come back in input order whatever order they finish in.
    """
    if workers < 1:
        raise ValidationError("workers must be positive")
    esc.check(schedule)
    if not thread_safe:
        classifier = SerializedClassifier(classifier)
    results: list[CounterfactualResult | None] = [None] * len(images)
    limiter = anyio.CapacityLimiter(workers)

    def explain(index: int) -> None:
        result = generate_counterfactual(
            images[index], None, classifier, table, denoiser, schedule, esc, edict_p, mode
        )
        if on_result is not None:
            on_result(index, result)
        results[index] = result

    async with anyio.create_task_group() as tg:
        for index in range(len(images)):
            tg.start_soon(partial(anyio.to_thread.run_sync, explain, index, limiter=limiter))
    return [result for result in results if result is not None]


async def run_benchmark(
    dataset: LabeledDataset,
    classifier: BlackBoxClassifier,
    table: EmbeddingTable,
    denoiser: NoisePredictor,
    schedule: NoiseSchedule,
    esc: EscalationSchedule,
    out_dir: Path,
    *,
    edict_p: float = EDICT_P,
    mode: GuidanceMode = GuidanceMode.NEGATIVE,
    workers: int = 1,
    thread_safe: bool = False,
    suite: EvaluationSuite | None = None,
    config: dict[str, Any] | None = None,
    artifacts: dict[str, str] | None = None,
    warnings: Sequence[str] = (),
) -> BenchmarkManifest:
    """Explain the dataset, persist images and records, then score the results.

    ``warnings`` (for instance a classifier below its accuracy threshold) are copied into
    the manifest; they never stop the run.

    Each finished image is flushed to ``records/<index>.json``; the manifest is written in
    index order once all images are done. Wall-clock timings go to ``timings.json`` only.
    """
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "records").mkdir(parents=True, exist_ok=True)
    records: dict[int, dict[str, Any]] = {}

    def flush(index: int, result: CounterfactualResult) -> None:
        record = {"index": index, "label": dataset.labels[index], **result.record()}
        record.update(_write_images(out_dir, index, result))
        dump_json(out_dir / "records" / f"{index:05d}.json", record)
        records[index] = record
        _LOGGER.info(
            "Image %s: %s -> %s flipped=%s after %s attempts",
            index,
            result.source_class,
            result.target_class,
            result.flipped,
            len(result.attempts),
        )

    results = await explain_all(
        dataset.images,
        classifier,
        table,
        denoiser,
        schedule,
        esc,
        edict_p=edict_p,
        mode=mode,
        workers=workers,
        thread_safe=thread_safe,
        on_result=flush,
    )
    manifest = BenchmarkManifest(
        config=config or {},
        records=[records[index] for index in sorted(records)],
        artifacts=artifacts or {},
        warnings=list(warnings),
    )
    for warning in manifest.warnings:
        _LOGGER.warning("Benchmark warning: %s", warning)
    seconds = [result.wall_seconds for result in results]
    timings = {
        "per_image_seconds": seconds,
        "mean_wall_seconds": float(np.mean(seconds)) if seconds else 0.0,
    }
    if suite is not None and results:
        rows = evaluate_images(results, suite)
        report = evaluate(results, suite, dataset.stacked(), rows)
        manifest.report = report.to_dict()
        dump_json(out_dir / REPORT_NAME, manifest.report)
        write_csv(out_dir / METRICS_CSV_NAME, rows)
    manifest.write(out_dir / MANIFEST_NAME)
    dump_json(out_dir / TIMINGS_NAME, timings)
    return manifest


async def success_grid(
    images: Sequence[LatentImage],
    classifier: BlackBoxClassifier,
    table: EmbeddingTable,
    denoiser: NoisePredictor,
    schedule: NoiseSchedule,
    taus: Sequence[int],
    ws: Sequence[float],
    **kwargs: Any,
) -> np.ndarray:
    """Success rate of single-tuple runs over ``taus`` (rows) by ``ws`` (columns)."""
    grid = np.zeros((len(taus), len(ws)))
    for row, tau in enumerate(taus):
        for column, w in enumerate(ws):
            esc = EscalationSchedule(((tau, w),))
            results = await explain_all(
                images, classifier, table, denoiser, schedule, esc, **kwargs
            )
            grid[row, column] = success_rate(results) if results else 0.0
            _LOGGER.info("tau=%s w=%s SR=%.3f", tau, w, grid[row, column])
    return grid
