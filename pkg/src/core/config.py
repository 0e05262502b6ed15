"""
Scenario configuration

Typed schema for a training scenario: model architecture, parallel layout and
precision/hardware. Scenarios are YAML documents; see scenarios/*.yaml.

Defaults for head_dim, num_kv_heads, router_dim and num_experts in the
reference-scale presets (128/128/256/256) are assumptions, not published values.
"""
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, PositiveInt, NonNegativeInt, ValidationError
from pydantic import field_validator, model_validator

from .errors import ScenarioError, ScenarioParseError
from .files import atomic_write_text

logger = logging.getLogger(__name__)

SCENARIO_FORMAT_VERSION = 1
BYTE_SIZES = (1, 2, 4, 8)
GIB = 1024 ** 3


class RecomputeMode(str, Enum):
    """How activations are kept between forward and backward."""
    NONE = "none"
    FULL = "full"
    CHUNKED = "chunked"


class ModelConfig(BaseModel):
    """Architecture of the MoE transformer."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    num_layers: PositiveInt
    seq_len: PositiveInt
    hidden_size: PositiveInt
    num_heads: PositiveInt
    head_dim: PositiveInt
    num_kv_heads: PositiveInt
    dense_intermediate: PositiveInt
    expert_intermediate: PositiveInt
    router_dim: PositiveInt
    topk: PositiveInt
    vocab_size: PositiveInt
    dense_layers: PositiveInt
    num_experts: PositiveInt

    @model_validator(mode="after")
    def _cross_checks(self) -> "ModelConfig":
        if self.topk > self.num_experts:
            raise ScenarioError("topk exceeds num_experts", field="topk", invariant="t_k <= E_total")
        if self.dense_layers > self.num_layers:
            raise ScenarioError(
                "dense_layers exceeds num_layers", field="dense_layers", invariant="d_l <= L"
            )
        if self.num_kv_heads > self.num_heads:
            raise ScenarioError(
                "num_kv_heads exceeds num_heads", field="num_kv_heads", invariant="k_a <= a"
            )
        return self

    @property
    def moe_layers(self) -> range:
        """Global indices of the MoE layers (dense layers come first)."""
        return range(self.dense_layers, self.num_layers)


class ParallelEnv(BaseModel):
    """Parallel layout and schedule role of the GPU being modelled."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    tp: PositiveInt = 1
    pp: PositiveInt = 1
    cp: PositiveInt = 1
    ep: PositiveInt = 1
    dp: PositiveInt = 1
    layers_per_stage: PositiveInt
    virtual_stages: PositiveInt = 1
    micro_batch: PositiveInt = 1
    global_batch: PositiveInt = 1
    pp_rank: NonNegativeInt = 0
    recompute_mode: RecomputeMode = RecomputeMode.NONE

    @model_validator(mode="after")
    def _rank_in_range(self) -> "ParallelEnv":
        if self.pp_rank >= self.pp:
            raise ScenarioError(
                f"pp_rank {self.pp_rank} out of range for pp={self.pp}",
                field="pp_rank",
                invariant="0 <= r_pp < p",
            )
        return self


class PrecisionAndHardware(BaseModel):
    """Element sizes in bytes and the GPU memory budget."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    act_bytes: int = 2
    param_bytes: int = 2
    grad_bytes: int = 2
    optim_bytes: int = 4
    gpu_memory_bytes: PositiveInt
    alpha: float = 1.0

    @field_validator("act_bytes", "param_bytes", "grad_bytes", "optim_bytes")
    @classmethod
    def _byte_size(cls, v: int, info) -> int:
        if v not in BYTE_SIZES:
            raise ScenarioError(
                f"{info.field_name} must be one of {BYTE_SIZES}, got {v}",
                field=info.field_name,
                invariant="byte size in {1,2,4,8}",
            )
        return v

    @field_validator("alpha")
    @classmethod
    def _alpha_range(cls, v: float) -> float:
        if not 0.0 < v <= 1.0:
            raise ScenarioError(
                f"alpha out of range: {v}", field="alpha", invariant="0 < alpha <= 1"
            )
        return v


class ValidatedScenario(BaseModel):
    """
    A scenario whose invariants all hold. Immutable.

    Build one with validate() or load_scenario(); constructing it directly
    runs the same checks but raises pydantic's ValidationError.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = ""
    model: ModelConfig
    parallel: ParallelEnv
    hardware: PrecisionAndHardware

    @model_validator(mode="after")
    def _stage_layout(self) -> "ValidatedScenario":
        env = self.parallel
        placed = env.layers_per_stage * env.pp * env.virtual_stages
        if placed != self.model.num_layers:
            raise ScenarioError(
                f"l·p·v ≠ L ({env.layers_per_stage}·{env.pp}·{env.virtual_stages}"
                f" = {placed}, L = {self.model.num_layers})",
                field="layers_per_stage",
                invariant="l·p·v = L",
            )
        return self

    # -- layer placement ---------------------------------------------------

    def stage_layers(self, pp_rank: Optional[int] = None) -> List[int]:
        """Global layer indices held by a pipeline rank, in execution order."""
        env = self.parallel
        rank = env.pp_rank if pp_rank is None else pp_rank
        layers = []
        for chunk in range(env.virtual_stages):
            first = (chunk * env.pp + rank) * env.layers_per_stage
            layers.extend(range(first, first + env.layers_per_stage))
        return layers

    def stage_of_layer(self, layer: int) -> int:
        """Pipeline rank holding a global layer index."""
        env = self.parallel
        return (layer // env.layers_per_stage) % env.pp

    # -- derived scenarios ---------------------------------------------------

    def for_stage(self, pp_rank: int) -> "ValidatedScenario":
        """Same scenario seen from another pipeline rank."""
        return validate(self.model, {**self.parallel.model_dump(), "pp_rank": pp_rank},
                        self.hardware, name=self.name)

    def with_recompute(self, mode: Union[RecomputeMode, str]) -> "ValidatedScenario":
        return validate(self.model, {**self.parallel.model_dump(), "recompute_mode": RecomputeMode(mode)},
                        self.hardware, name=self.name)


def _to_scenario_error(exc: ValidationError, section: str) -> ScenarioError:
    """Name the first failing field of a pydantic error."""
    first = exc.errors()[0]
    cause = (first.get("ctx") or {}).get("error")
    loc = ".".join(str(p) for p in first.get("loc", ()))
    if isinstance(cause, ScenarioError):
        field = cause.field or loc
        invariant = cause.invariant
        message = str(cause)
    else:
        field = loc
        invariant = first.get("msg", "invalid value")
        message = invariant
    dotted = f"{section}.{field}" if field else section
    return ScenarioError(f"{dotted}: {message}", field=dotted, invariant=invariant)


def _build(cls, value: Any, section: str):
    if isinstance(value, cls):
        return value
    if isinstance(value, BaseModel):
        value = value.model_dump()
    try:
        return cls.model_validate(value)
    except ValidationError as e:
        raise _to_scenario_error(e, section) from None


def validate(
    model: Union[ModelConfig, Mapping[str, Any]],
    parallel: Union[ParallelEnv, Mapping[str, Any]],
    hardware: Union[PrecisionAndHardware, Mapping[str, Any]],
    name: str = "",
) -> ValidatedScenario:
    """
    Check every scenario invariant and return an immutable scenario.

    Raises:
        ScenarioError naming the first violated invariant and its field.
    """
    cfg = _build(ModelConfig, model, "model")
    env = _build(ParallelEnv, parallel, "parallel")
    hw = _build(PrecisionAndHardware, hardware, "hardware")
    try:
        return ValidatedScenario(name=name, model=cfg, parallel=env, hardware=hw)
    except ValidationError as e:
        raise _to_scenario_error(e, "parallel") from None


# -- file format -------------------------------------------------------------

_SECTIONS = {"model": ModelConfig, "parallel": ParallelEnv, "hardware": PrecisionAndHardware}
_TOP_LEVEL = {"format_version", "name", *_SECTIONS}


def _drop_unknown(data: Dict[str, Any], allowed, where: str) -> Dict[str, Any]:
    kept = {}
    for key, value in data.items():
        if key in allowed:
            kept[key] = value
        else:
            logger.warning("ignoring unknown scenario key %s%s", where, key)
    return kept


def parse_scenario(text: str, source: str = "<string>") -> ValidatedScenario:
    """Parse a YAML scenario document and validate it."""
    if not text.strip():
        raise ScenarioParseError(f"{source}: empty scenario document", line=1)
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ScenarioParseError(f"{source}: {getattr(e, 'problem', None) or e}", line=line) from None
    if not isinstance(data, dict):
        raise ScenarioParseError(f"{source}: top level must be a mapping")

    version = data.get("format_version", SCENARIO_FORMAT_VERSION)
    if not isinstance(version, int) or version > SCENARIO_FORMAT_VERSION:
        raise ScenarioParseError(
            f"{source}: unsupported format_version {version!r}", field="format_version"
        )

    data = _drop_unknown(data, _TOP_LEVEL, "")
    sections = {}
    for section, cls in _SECTIONS.items():
        body = data.get(section)
        if body is None:
            raise ScenarioParseError(f"{source}: missing section '{section}'", field=section)
        if not isinstance(body, dict):
            raise ScenarioParseError(f"{source}: section '{section}' must be a mapping", field=section)
        sections[section] = _drop_unknown(body, cls.model_fields, f"{section}.")

    return validate(sections["model"], sections["parallel"], sections["hardware"],
                    name=str(data.get("name") or ""))


def load_scenario(path: Union[str, Path]) -> ValidatedScenario:
    """Load and validate a scenario file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ScenarioParseError(f"scenario file not found: {path}") from None
    return parse_scenario(text, source=str(path))


def dump_scenario(scn: ValidatedScenario) -> str:
    """Render a scenario as its YAML document."""
    doc = {
        "format_version": SCENARIO_FORMAT_VERSION,
        "name": scn.name,
        "model": scn.model.model_dump(mode="json"),
        "parallel": scn.parallel.model_dump(mode="json"),
        "hardware": scn.hardware.model_dump(mode="json"),
    }
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=False)


def save_scenario(scn: ValidatedScenario, path: Union[str, Path]) -> Path:
    return atomic_write_text(path, dump_scenario(scn))


# -- presets -----------------------------------------------------------------

def reference_scenario(
    variant: str = "I",
    pp_rank: int = 0,
    recompute_mode: Union[RecomputeMode, str] = RecomputeMode.FULL,
) -> ValidatedScenario:
    """
    The reduced-layer DeepSeek-style models on 32 GPUs with 64 GiB each.

    Variant "I" has 16 layers, "II" has 8. Pipeline size 4 puts L/4 layers on
    each rank. Byte sizes 2/2/2 and alpha=0.95 are assumptions chosen so the
    memory comparison lands in the published range.
    """
    layers = {"I": 16, "II": 8}.get(variant.upper())
    if layers is None:
        raise ScenarioError(f"unknown preset variant {variant!r}", field="variant")
    model = dict(
        num_layers=layers, seq_len=4096, hidden_size=7168, num_heads=128, head_dim=128,
        num_kv_heads=128, dense_intermediate=18432, expert_intermediate=2048, router_dim=256,
        topk=8, vocab_size=129280, dense_layers=3, num_experts=256,
    )
    parallel = dict(
        tp=1, pp=4, cp=1, ep=32, dp=1, layers_per_stage=layers // 4, virtual_stages=1,
        micro_batch=1, global_batch=960, pp_rank=pp_rank, recompute_mode=RecomputeMode(recompute_mode),
    )
    hardware = dict(
        act_bytes=2, param_bytes=2, grad_bytes=2, optim_bytes=2,
        gpu_memory_bytes=64 * GIB, alpha=0.95,
    )
    return validate(model, parallel, hardware, name=f"model-{variant.upper()}")
