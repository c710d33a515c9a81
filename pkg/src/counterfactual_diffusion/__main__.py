"""Command line surface.

Output layout, relative to the configured directories::

    <data_dir>/manifest.json                      dataset index, labels, attributes
    <data_dir>/<split>/<index>.png                rendered images
    <checkpoint_dir>/vocabulary.ckpt              fixed token embeddings (train)
    <checkpoint_dir>/denoiser.ckpt                conditional noise predictor (train)
    <checkpoint_dir>/classifier.ckpt              target classifier (train)
    <checkpoint_dir>/oracle.ckpt                  attribute oracle, FID features (train)
    <checkpoint_dir>/identity.ckpt                identity embedder (train)
    <checkpoint_dir>/ssl.ckpt                     self-supervised encoder (train)
    <checkpoint_dir>/embeddings-context<N>-class<M>.ckpt   distilled tokens (distill)
    <output_dir>/explain/                         original.png, counterfactual.png, attempts.json
    <output_dir>/benchmark/                       manifest.json, report.json, metrics.csv,
                                                  timings.json, records/, images/, grid.png
    <output_dir>/sweep.json                       tau x w success grid and guidance comparison

Images are 8-bit PNG; pixel values in [-1, 1] map to round((x + 1) * 127.5).
"""

from __future__ import annotations

import functools
import logging
from collections.abc import Callable
from dataclasses import replace
from pathlib import Path

import asyncclick as click
from rich.console import Console
from rich.logging import RichHandler

from .bridge import BridgeClassifier
from .config import RunConfig, config_echo, load_config, save_config
from .dataset import Split, generate_splits, load_dataset, load_png, save_dataset, save_png
from .denoiser import flops_per_call, load_denoiser, save_denoiser, train_denoiser
from .embeddings import (
    DistillConfig,
    EmbeddingTable,
    create_vocabulary,
    distill,
    load_table,
    render_ids,
    save_table,
)
from .exceptions import BaseError, MissingArtifactError
from .guidance import GuidanceMode
from .metrics import EvaluationSuite, MetricReport, count_trend_inversions, report_table
from .models import (
    classifier_warnings,
    load_classifier,
    load_embedder,
    load_oracle,
    save_classifier,
    save_embedder,
    save_oracle,
    train_classifier,
    train_identity_embedder,
    train_oracle,
    train_ssl_encoder,
)
from .pipeline import (
    BlackBoxClassifier,
    dump_json,
    file_digest,
    generate_counterfactual,
    run_benchmark,
    success_grid,
)
from .report import write_report

_LOGGER = logging.getLogger(__name__)

DEFAULT_TAU = 35
DEFAULT_GS = 4.0
SWEEP_TAUS = (15, 20, 25)
SWEEP_WS = (2.0, 4.0, 6.0)

_MODES = {"cfg": GuidanceMode.CFG, "ng": GuidanceMode.NEGATIVE}
MULTI_TOKENS = DistillConfig()


def _handle_errors(func: Callable) -> Callable:
    @functools.wraps(func)
    async def wrapper(*args, **kwargs):
        try:
            return await func(*args, **kwargs)
        except BaseError as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


def _checkpoint(config: RunConfig, name: str, phase: str = "train") -> Path:
    path = config.checkpoint_dir / name
    if not path.exists():
        raise MissingArtifactError(str(path), phase)
    return path


def embeddings_name(config: RunConfig) -> str:
    distill_cfg = config.distill
    return (
        f"embeddings-context{distill_cfg.active_context_tokens}"
        f"-class{distill_cfg.class_tokens}.ckpt"
    )


def _open_classifier(ctx: click.Context, config: RunConfig) -> BlackBoxClassifier:
    path = _checkpoint(config, "classifier.ckpt")
    if config.bridge:
        return ctx.with_resource(BridgeClassifier(path))
    return load_classifier(path)


def _load_table(config: RunConfig) -> EmbeddingTable:
    return load_table(_checkpoint(config, embeddings_name(config), "distill"))


def apply_overrides(
    config: RunConfig,
    seed: int | None = None,
    workers: int | None = None,
    tau: int | None = None,
    gs: float | None = None,
    mode: str | None = None,
    tokens: str | None = None,
    context: str | None = None,
) -> RunConfig:
    """Command line flags on top of the configuration file."""
    if seed is not None:
        config = config.with_seed(seed)
    if workers is not None:
        config = replace(config, workers=workers)
    edict = config.edict
    if tau is not None or gs is not None:
        tuple_ = (tau if tau is not None else DEFAULT_TAU, gs if gs is not None else DEFAULT_GS)
        edict = replace(edict, escalation=(tuple_,))
    if mode is not None:
        edict = replace(edict, mode=_MODES[mode])
    distill_cfg = config.distill
    if tokens == "single":
        distill_cfg = replace(distill_cfg, context_tokens=1, class_tokens=1)
    elif tokens == "multi":
        distill_cfg = replace(
            distill_cfg,
            context_tokens=MULTI_TOKENS.context_tokens,
            class_tokens=MULTI_TOKENS.class_tokens,
        )
    if context is not None:
        distill_cfg = replace(distill_cfg, use_context=context == "on")
    return replace(config, edict=edict, distill=distill_cfg)


@click.group()
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--tau", type=int, default=None, help="Single inversion depth, no escalation.")
@click.option("--gs", type=float, default=None, help="Single guidance scale, no escalation.")
@click.option("--mode", type=click.Choice(list(_MODES)), default=None)
@click.option("--tokens", type=click.Choice(["single", "multi"]), default=None)
@click.option("--context", type=click.Choice(["on", "off"]), default=None)
@click.option("--verbose", is_flag=True)
@click.pass_context
async def cli(
    ctx: click.Context,
    config_path: Path | None,
    seed: int | None,
    workers: int | None,
    tau: int | None,
    gs: float | None,
    mode: str | None,
    tokens: str | None,
    context: str | None,
    verbose: bool,
):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(rich_tracebacks=True)],
    )
    if ctx.invoked_subcommand == "init-config":
        ctx.obj = RunConfig()
        return
    try:
        config = load_config(config_path)
        ctx.obj = apply_overrides(config, seed, workers, tau, gs, mode, tokens, context)
    except BaseError as exc:
        raise click.ClickException(str(exc)) from exc


@cli.command("init-config")
@click.argument("path", type=click.Path(path_type=Path))
@click.pass_obj
@_handle_errors
async def init_config(config: RunConfig, path: Path):
    save_config(path, config)
    click.echo(f"Wrote default configuration to {path}")


@cli.command("gen-data")
@click.pass_obj
@_handle_errors
async def gen_data(config: RunConfig):
    splits = generate_splits(config.data)
    save_dataset(config.data_dir, config.data, splits)
    click.echo(", ".join(f"{split}: {len(dataset)}" for split, dataset in splits.items()))


@cli.command()
@click.pass_obj
@_handle_errors
async def train(config: RunConfig):
    train_set = load_dataset(config.data_dir, Split.TRAIN)
    val_set = load_dataset(config.data_dir, Split.VAL)
    checkpoints = config.checkpoint_dir
    checkpoints.mkdir(parents=True, exist_ok=True)
    schedule = config.schedule.build()

    vocabulary = create_vocabulary(config.denoiser.cond_dim, config.seed)
    save_table(checkpoints / "vocabulary.ckpt", vocabulary)
    denoiser = train_denoiser(
        train_set, schedule, config.denoiser_train, vocabulary, config.denoiser
    )
    save_denoiser(checkpoints / "denoiser.ckpt", denoiser)

    save_classifier(
        checkpoints / "classifier.ckpt",
        train_classifier(train_set, config.classifier_train, val_set),
    )
    save_oracle(
        checkpoints / "oracle.ckpt", train_oracle(train_set, config.oracle_train, val_set)
    )
    save_embedder(
        checkpoints / "identity.ckpt",
        "identity",
        train_identity_embedder(train_set, config.identity_train),
    )
    save_embedder(checkpoints / "ssl.ckpt", "ssl", train_ssl_encoder(train_set, config.ssl_train))
    click.echo(f"Wrote checkpoints to {checkpoints}")


@cli.command("distill")
@click.pass_context
@_handle_errors
async def distill_command(ctx: click.Context):
    config: RunConfig = ctx.obj
    train_set = load_dataset(config.data_dir, Split.TRAIN)
    vocabulary = load_table(_checkpoint(config, "vocabulary.ckpt"), phase="train")
    denoiser = load_denoiser(_checkpoint(config, "denoiser.ckpt"))
    classifier = _open_classifier(ctx, config)
    table = distill(
        train_set,
        classifier,
        denoiser,
        config.schedule.build(),
        config.distill_train,
        config.distill,
        vocabulary,
    )
    path = config.checkpoint_dir / embeddings_name(config)
    save_table(path, table)
    click.echo(f"Wrote {path}")


@cli.command()
@click.argument("image_path", type=click.Path(path_type=Path, exists=True))
@click.argument("target_class", type=int)
@click.pass_context
@_handle_errors
async def explain(ctx: click.Context, image_path: Path, target_class: int):
    config: RunConfig = ctx.obj
    x = load_png(image_path, config.data.image_size[0])
    result = generate_counterfactual(
        x,
        target_class,
        _open_classifier(ctx, config),
        _load_table(config),
        load_denoiser(_checkpoint(config, "denoiser.ckpt")),
        config.schedule.build(),
        config.edict.schedule(),
        config.edict.p,
        config.edict.mode,
    )
    out_dir = config.output_dir / "explain"
    save_png(out_dir / "original.png", result.original)
    save_png(out_dir / "counterfactual.png", result.explanation)
    dump_json(out_dir / "attempts.json", result.record())
    click.echo(
        f"{result.source_class} -> {result.target_class}: flipped={result.flipped} "
        f"after {len(result.attempts)} attempts, {result.denoiser_calls} denoiser calls"
    )


def _suite(config: RunConfig, classifier: BlackBoxClassifier, denoiser, table) -> EvaluationSuite:
    oracle = load_oracle(_checkpoint(config, "oracle.ckpt"))
    identity = load_embedder(_checkpoint(config, "identity.ckpt"), "identity")
    ssl = load_embedder(_checkpoint(config, "ssl.ckpt"), "ssl")
    cond_len = len(render_ids(table.class_template(0), table))
    return EvaluationSuite(
        classifier=classifier,
        oracle=oracle,
        features=oracle.features,
        identity=identity.embed,
        ssl=ssl.embed,
        flops_per_call=flops_per_call(denoiser, cond_len),
        sfid_seed=config.seed,
    )


@cli.command()
@click.option("--limit", type=int, default=None, help="Only the first N test images.")
@click.pass_context
@_handle_errors
async def evaluate(ctx: click.Context, limit: int | None):
    config: RunConfig = ctx.obj
    test_set = load_dataset(config.data_dir, Split.TEST)
    if limit is not None:
        test_set = test_set.subset(range(min(limit, len(test_set))))
    classifier = _open_classifier(ctx, config)
    table = _load_table(config)
    denoiser = load_denoiser(_checkpoint(config, "denoiser.ckpt"))
    artifacts = {
        name: file_digest(_checkpoint(config, name))
        for name in ("denoiser.ckpt", "classifier.ckpt", embeddings_name(config))
    }
    manifest = await run_benchmark(
        test_set,
        classifier,
        table,
        denoiser,
        config.schedule.build(),
        config.edict.schedule(),
        config.output_dir / "benchmark",
        edict_p=config.edict.p,
        mode=config.edict.mode,
        workers=config.workers,
        thread_safe=config.classifier_thread_safe,
        suite=_suite(config, classifier, denoiser, table),
        config=config_echo(config),
        artifacts=artifacts,
        warnings=classifier_warnings(_checkpoint(config, "classifier.ckpt")),
    )
    if manifest.report is not None:
        Console().print(report_table(MetricReport.from_dict(manifest.report)))


@cli.command()
@click.argument("manifest_path", type=click.Path(path_type=Path, exists=True))
@_handle_errors
async def report(manifest_path: Path):
    click.echo(f"Wrote {write_report(manifest_path)}")


@cli.command()
@click.option("--limit", type=int, default=None, help="Only the first N test images.")
@click.pass_context
@_handle_errors
async def sweep(ctx: click.Context, limit: int | None):
    """Success rate over a tau x w grid, and CFG against negative guidance at its centre."""
    config: RunConfig = ctx.obj
    test_set = load_dataset(config.data_dir, Split.TEST)
    images = test_set.images[:limit] if limit is not None else test_set.images
    classifier = _open_classifier(ctx, config)
    denoiser = load_denoiser(_checkpoint(config, "denoiser.ckpt"))
    schedule = config.schedule.build()
    options = {
        "edict_p": config.edict.p,
        "workers": config.workers,
        "thread_safe": config.classifier_thread_safe,
    }

    async def grid(table, taus, ws, mode):
        return await success_grid(
            images, classifier, table, denoiser, schedule, taus, ws, mode=mode, **options
        )

    table = _load_table(config)
    centre = ([SWEEP_TAUS[1]], [SWEEP_WS[1]])
    negative = await grid(table, SWEEP_TAUS, SWEEP_WS, GuidanceMode.NEGATIVE)
    cfg = await grid(table, *centre, GuidanceMode.CFG)
    result = {
        "taus": list(SWEEP_TAUS),
        "ws": list(SWEEP_WS),
        "sr": negative.tolist(),
        "inversions": count_trend_inversions(negative, tolerance=0.01),
        "centre": [SWEEP_TAUS[1], SWEEP_WS[1]],
        "centre_sr": {"cfg": float(cfg[0, 0]), "negative": float(negative[1, 1])},
        "ablations": {},
    }
    baseline = float(negative[1, 1])
    for tokens, context in (("multi", "off"), ("single", "on")):
        variant = apply_overrides(config, tokens=tokens, context=context)
        path = config.checkpoint_dir / embeddings_name(variant)
        if not path.exists() or variant.distill == config.distill:
            continue
        rate = float((await grid(load_table(path), *centre, GuidanceMode.NEGATIVE))[0, 0])
        result["ablations"][f"tokens={tokens},context={context}"] = rate
        _LOGGER.info("tokens=%s context=%s SR delta %+.3f", tokens, context, rate - baseline)

    config.output_dir.mkdir(parents=True, exist_ok=True)
    dump_json(config.output_dir / "sweep.json", result)
    click.echo(
        f"SR grid {negative.tolist()}, {result['inversions']} inversions, "
        f"cfg {result['centre_sr']['cfg']:.3f} vs negative {baseline:.3f}"
    )


def main():
    try:
        cli()
    except KeyboardInterrupt:
        pass


if __name__ == "__main__":
    main()
