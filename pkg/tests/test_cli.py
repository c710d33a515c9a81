import anyio
import asyncclick as click
import pytest

from counterfactual_diffusion.__main__ import (
    DEFAULT_GS,
    DEFAULT_TAU,
    _checkpoint,
    _handle_errors,
    apply_overrides,
    embeddings_name,
)
from counterfactual_diffusion.config import PathsConfig, RunConfig
from counterfactual_diffusion.const import SMILE_ESCALATION
from counterfactual_diffusion.exceptions import MissingArtifactError, ValidationError
from counterfactual_diffusion.guidance import GuidanceMode


@pytest.mark.parametrize(
    "kwargs,name",
    [
        ({}, "embeddings-context3-class3.ckpt"),
        ({"tokens": "single"}, "embeddings-context1-class1.ckpt"),
        ({"context": "off"}, "embeddings-context0-class3.ckpt"),
        ({"tokens": "single", "context": "off"}, "embeddings-context0-class1.ckpt"),
        ({"tokens": "multi", "context": "on"}, "embeddings-context3-class3.ckpt"),
    ],
)
def test_embeddings_name(kwargs, name):
    assert embeddings_name(apply_overrides(RunConfig(), **kwargs)) == name


def test_multi_tokens_after_single():
    single = apply_overrides(RunConfig(), tokens="single")
    multi = apply_overrides(single, tokens="multi")
    assert embeddings_name(multi) == "embeddings-context3-class3.ckpt"
    assert multi.distill == RunConfig().distill


@pytest.mark.parametrize(
    "kwargs,escalation",
    [
        ({}, SMILE_ESCALATION),
        ({"tau": 20}, ((20, DEFAULT_GS),)),
        ({"gs": 6.0}, ((DEFAULT_TAU, 6.0),)),
        ({"tau": 15, "gs": 2.0}, ((15, 2.0),)),
    ],
)
def test_escalation_overrides(kwargs, escalation):
    config = apply_overrides(RunConfig(), **kwargs)
    assert config.edict.schedule().tuples == escalation


@pytest.mark.parametrize(
    "mode,expected",
    [("cfg", GuidanceMode.CFG), ("ng", GuidanceMode.NEGATIVE)],
)
def test_mode_override(mode, expected):
    assert apply_overrides(RunConfig(), mode=mode).edict.mode == expected


def test_seed_and_workers_overrides():
    config = apply_overrides(RunConfig(), seed=3, workers=4)
    assert config.seed == 3
    assert config.distill_train.seed == 8
    assert config.workers == 4

    with pytest.raises(ValidationError):
        apply_overrides(RunConfig(), workers=0)


def test_handle_errors():
    @_handle_errors
    async def failing():
        raise ValidationError("bad input")

    @_handle_errors
    async def working():
        return 5

    with pytest.raises(click.ClickException, match="bad input"):
        anyio.run(failing)
    assert anyio.run(working) == 5


def test_checkpoint(tmp_path):
    config = RunConfig(paths=PathsConfig(checkpoint_dir=str(tmp_path)))
    with pytest.raises(MissingArtifactError) as info:
        _checkpoint(config, "embeddings-context3-class3.ckpt", "distill")
    assert info.value.phase == "distill"

    (tmp_path / "denoiser.ckpt").write_bytes(b"")
    assert _checkpoint(config, "denoiser.ckpt") == tmp_path / "denoiser.ckpt"
