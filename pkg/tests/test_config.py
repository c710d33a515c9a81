import json

import pytest

from counterfactual_diffusion.config import (
    SCHEMA_VERSION,
    EdictSettings,
    RunConfig,
    ScheduleConfig,
    config_echo,
    load_config,
    parse,
    save_config,
    serialize,
)
from counterfactual_diffusion.const import AGE_ESCALATION
from counterfactual_diffusion.exceptions import MissingArtifactError, ValidationError
from counterfactual_diffusion.guidance import GuidanceMode


def test_default_round_trip():
    config = RunConfig()
    assert parse(serialize(config)) == config


def test_custom_round_trip(tmp_path):
    config = RunConfig(
        edict=EdictSettings(p=0.9, escalation=AGE_ESCALATION, mode=GuidanceMode.CFG),
        schedule=ScheduleConfig(inference_steps=20),
        workers=4,
    ).with_seed(11)
    path = tmp_path / "nested" / "config.json"
    save_config(path, config)

    loaded = load_config(path)
    assert loaded == config
    assert loaded.edict.schedule().tuples == AGE_ESCALATION
    assert loaded.schedule.build().num_inference_steps == 20


def test_serialized_form():
    data = json.loads(serialize(RunConfig()))
    assert data["schema_version"] == SCHEMA_VERSION
    assert data["edict"]["mode"] == "negative"
    assert data["edict"]["escalation"][0] == [25, 3.0]
    assert data["data"]["samples_per_split"] == {"train": 4000, "val": 500, "test": 200}
    assert "schema_version" not in config_echo(RunConfig())


def _modified(**changes) -> str:
    data = json.loads(serialize(RunConfig()))
    for path, value in changes.items():
        *parents, key = path.split("__")
        target = data
        for parent in parents:
            target = target[parent]
        target[key] = value
    return json.dumps(data)


@pytest.mark.parametrize(
    "text",
    [
        "not json",
        "[]",
        _modified(schema_version=2),
        _modified(unknown=1),
        _modified(edict__extra=True),
        _modified(seed="0"),
        _modified(workers=1.5),
        _modified(classifier_thread_safe=1),
        _modified(edict__mode="ng"),
        _modified(edict__escalation=[[25]]),
        _modified(denoiser__channel_mults="1,2"),
        _modified(workers=0),
    ],
)
def test_parse_invalid(text):
    with pytest.raises(ValidationError):
        parse(text)


def test_missing_schema_version():
    data = json.loads(serialize(RunConfig()))
    del data["schema_version"]
    with pytest.raises(ValidationError):
        parse(json.dumps(data))


def test_load_config():
    assert load_config(None) == RunConfig()


def test_load_config_missing(tmp_path):
    with pytest.raises(MissingArtifactError) as info:
        load_config(tmp_path / "config.json")
    assert info.value.phase == "init-config"


def test_with_seed_offsets():
    config = RunConfig().with_seed(7)
    seeds = [
        config.data.seed,
        config.denoiser_train.seed,
        config.classifier_train.seed,
        config.oracle_train.seed,
        config.identity_train.seed,
        config.ssl_train.seed,
        config.distill_train.seed,
    ]
    assert config.seed == 7
    assert seeds == [7, 7, 8, 9, 10, 11, 12]
