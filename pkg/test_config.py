"""Scenario schema, validation and the YAML file format."""
import logging
from pathlib import Path

import pytest
from pydantic import ValidationError

from conftest import SCENARIO_DIR, TOY_HARDWARE, TOY_MODEL, TOY_PARALLEL, make_scenario
from src.core.config import (
    GIB,
    RecomputeMode,
    dump_scenario,
    load_scenario,
    reference_scenario,
    parse_scenario,
    save_scenario,
    validate,
)
from src.core.errors import ScenarioError, ScenarioParseError
from src.core.settings import Settings


def test_valid_desk_config():
    scn = make_scenario(model=dict(num_layers=16), parallel=dict(pp=4, layers_per_stage=4))
    assert scn.model.num_layers == 16
    assert scn.parallel.pp == 4


def test_stage_layout_mismatch_names_the_invariant():
    with pytest.raises(ScenarioError) as err:
        make_scenario(model=dict(num_layers=16), parallel=dict(pp=4, layers_per_stage=3))
    assert "l·p·v ≠ L" in str(err.value)
    assert err.value.field == "parallel.layers_per_stage"


def test_alpha_out_of_range():
    with pytest.raises(ScenarioError) as err:
        make_scenario(hardware=dict(alpha=1.2))
    assert "alpha out of range" in str(err.value)
    assert err.value.field == "hardware.alpha"


@pytest.mark.parametrize("section, overrides, field", [
    ("model", dict(topk=5), "model.topk"),
    ("model", dict(num_kv_heads=3), "model.num_kv_heads"),
    ("model", dict(dense_layers=5), "model.dense_layers"),
    ("model", dict(hidden_size=0), "model.hidden_size"),
    ("parallel", dict(pp_rank=1), "parallel.pp_rank"),
    ("parallel", dict(micro_batch=0), "parallel.micro_batch"),
    ("hardware", dict(act_bytes=3), "hardware.act_bytes"),
    ("hardware", dict(alpha=0.0), "hardware.alpha"),
    ("hardware", dict(gpu_memory_bytes=0), "hardware.gpu_memory_bytes"),
])
def test_invariant_violations_name_their_field(section, overrides, field):
    with pytest.raises(ScenarioError) as err:
        make_scenario(**{section: overrides})
    assert err.value.field == field


def test_validate_is_pure():
    a = validate(TOY_MODEL, TOY_PARALLEL, TOY_HARDWARE)
    b = validate(TOY_MODEL, TOY_PARALLEL, TOY_HARDWARE)
    assert a == b


def test_scenario_is_immutable(toy):
    with pytest.raises(ValidationError):
        toy.parallel.pp = 2


def test_stage_layers_with_virtual_stages():
    scn = make_scenario(model=dict(num_layers=16), parallel=dict(pp=4, virtual_stages=2, layers_per_stage=2))
    assert scn.stage_layers(1) == [2, 3, 10, 11]
    assert scn.stage_of_layer(10) == 1
    assert all(scn.stage_of_layer(layer) == r for r in range(4) for layer in scn.stage_layers(r))


def test_for_stage_and_with_recompute(toy):
    scn = make_scenario(model=dict(num_layers=16), parallel=dict(pp=4, layers_per_stage=4))
    assert scn.for_stage(3).parallel.pp_rank == 3
    assert toy.with_recompute("none").parallel.recompute_mode == RecomputeMode.NONE
    with pytest.raises(ScenarioError):
        scn.for_stage(4)


def test_reference_file_matches_preset():
    scn = load_scenario(SCENARIO_DIR / "model_i.yaml")
    assert scn == reference_scenario("I")
    assert scn.model.seq_len == 4096
    assert scn.parallel.ep == 32
    assert scn.hardware.gpu_memory_bytes == 64 * GIB


def test_shipped_scenarios_load():
    for path in sorted(SCENARIO_DIR.glob("*.yaml")):
        assert load_scenario(path).name


def test_empty_file_is_a_parse_error(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    with pytest.raises(ScenarioParseError) as err:
        load_scenario(path)
    assert err.value.line == 1


def test_yaml_syntax_error_carries_line():
    with pytest.raises(ScenarioParseError) as err:
        parse_scenario("name: a\nmodel: {num_layers: 4\nparallel: [\n")
    assert err.value.line is not None
    assert str(err.value).startswith("line ")


def test_missing_section():
    text = dump_scenario(make_scenario()).replace("hardware:", "hardwar:")
    with pytest.raises(ScenarioParseError) as err:
        parse_scenario(text)
    assert err.value.field == "hardware"


def test_newer_format_version_rejected():
    text = dump_scenario(make_scenario()).replace("format_version: 1", "format_version: 2")
    with pytest.raises(ScenarioParseError):
        parse_scenario(text)


def test_unknown_keys_warn(caplog):
    text = dump_scenario(make_scenario())
    text = text.replace("model:\n", "model:\n  mla_rank: 1536\n") + "comment: hello\n"
    with caplog.at_level(logging.WARNING, logger="src.core.config"):
        scn = parse_scenario(text)
    assert scn == make_scenario()
    messages = " ".join(r.getMessage() for r in caplog.records)
    assert "model.mla_rank" in messages
    assert "comment" in messages


def test_round_trip(tmp_path):
    original = load_scenario(SCENARIO_DIR / "model_ii.yaml")
    first = save_scenario(original, tmp_path / "a.yaml")
    again = load_scenario(first)
    assert again == original
    second = save_scenario(again, tmp_path / "b.yaml")
    assert first.read_bytes() == second.read_bytes()


def test_settings_resolve_scenario_by_name():
    settings = Settings(scenario_dir=SCENARIO_DIR)
    assert settings.resolve_scenario("toy") == SCENARIO_DIR / "toy.yaml"
    assert settings.resolve_scenario(str(SCENARIO_DIR / "toy.yaml")) == SCENARIO_DIR / "toy.yaml"
    assert settings.resolve_scenario("nope") == Path("nope")


def test_settings_from_env(monkeypatch):
    monkeypatch.setenv("CHUNKWISE_LOG_LEVEL", "debug")
    monkeypatch.setenv("CHUNKWISE_OUTPUT_DIR", "elsewhere")
    settings = Settings.from_env()
    assert settings.log_level == "DEBUG"
    assert str(settings.output_dir) == "elsewhere"
