"""
Routing simulator

Synthetic per-iteration, per-layer token routing traces: how many token copies
each EP rank receives in each MoE layer. Imbalance is modelled, not fitted;
the distribution family is a parameter.

Each (iteration, layer) cell draws from its own PCG64 stream seeded with
SeedSequence(seed, spawn_key=(iteration, layer)), so cells can be produced
in any order (or in parallel) and the trace is the same.
"""
import csv
import io
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, NonNegativeInt, PositiveInt, ValidationError, model_validator

from .config import ValidatedScenario
from .errors import TraceError
from .files import atomic_write_text, header_line, parse_header

logger = logging.getLogger(__name__)

TRACE_KIND = "trace"
TRACE_COLUMNS = ("iteration", "layer", "gpu", "tokens")
_MIN_ALPHA = 1e-12


class DistributionKind(str, Enum):
    UNIFORM = "uniform"
    DIRICHLET = "dirichlet"
    HOT_EXPERT = "hot_expert"
    DEPTH_SKEW = "depth_skew"


_DEFAULT_PARAMS: Dict[DistributionKind, Dict[str, float]] = {
    DistributionKind.UNIFORM: {},
    DistributionKind.DIRICHLET: {"alpha": 1.0},
    DistributionKind.HOT_EXPERT: {"rho": 0.5},
    DistributionKind.DEPTH_SKEW: {"alpha0": 1.0, "decay": 0.5},
}


class GeneratorSpec(BaseModel):
    """Distribution kind, its parameters and the seed. Fully describes a trace."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: DistributionKind
    params: Dict[str, float] = {}
    seed: NonNegativeInt = 0
    source_ranks: PositiveInt = 1

    @model_validator(mode="after")
    def _check_params(self) -> "GeneratorSpec":
        allowed = _DEFAULT_PARAMS[self.kind]
        unknown = set(self.params) - set(allowed)
        if unknown:
            raise TraceError(f"{self.kind.value} takes no parameter(s) {sorted(unknown)}")
        p = self.resolved_params()
        if self.kind == DistributionKind.DIRICHLET and not p["alpha"] > 0:
            raise TraceError(f"dirichlet alpha must be > 0, got {p['alpha']}")
        if self.kind == DistributionKind.HOT_EXPERT and not 0.0 <= p["rho"] <= 1.0:
            raise TraceError(f"hot_expert rho must be in [0, 1], got {p['rho']}")
        if self.kind == DistributionKind.DEPTH_SKEW:
            if not p["alpha0"] > 0:
                raise TraceError(f"depth_skew alpha0 must be > 0, got {p['alpha0']}")
            if not 0.0 < p["decay"] <= 1.0:
                raise TraceError(f"depth_skew decay must be in (0, 1], got {p['decay']}")
        return self

    def resolved_params(self) -> Dict[str, float]:
        return {**_DEFAULT_PARAMS[self.kind], **{k: float(v) for k, v in self.params.items()}}


def make_spec(kind: Union["DistributionKind", str], params: Optional[Dict[str, float]] = None,
              seed: int = 0, source_ranks: int = 1) -> GeneratorSpec:
    """Build a GeneratorSpec, reporting bad input as TraceError."""
    try:
        kind = DistributionKind(kind)
    except ValueError:
        choices = ", ".join(k.value for k in DistributionKind)
        raise TraceError(f"unknown distribution {kind!r} (choose from {choices})") from None
    try:
        return GeneratorSpec(kind=kind, params=params or {}, seed=seed, source_ranks=source_ranks)
    except ValidationError as e:
        cause = (e.errors()[0].get("ctx") or {}).get("error")
        raise (cause if isinstance(cause, TraceError) else TraceError(str(e))) from None


@dataclass(frozen=True, eq=False)
class RoutingTrace:
    """
    Received token copies per [iteration][moe_layer][gpu].

    Layer axis covers the MoE layers only; global layer index is
    first_layer + position. Every cell sums to source_ranks·tokens_per_rank.
    """
    per_gpu_tokens: np.ndarray
    generator: GeneratorSpec
    tokens_per_rank: int
    first_layer: int = 0

    def __post_init__(self):
        arr = self.per_gpu_tokens
        if arr.ndim != 3:
            raise TraceError(f"per_gpu_tokens must be 3-D, got shape {arr.shape}")
        if arr.size and arr.min() < 0:
            raise TraceError("negative token counts in trace")
        expected = self.generator.source_ranks * self.tokens_per_rank
        totals = arr.sum(axis=2)
        if totals.size and not np.all(totals == expected):
            raise TraceError(f"trace does not conserve tokens: cells must sum to {expected}")

    @property
    def iterations(self) -> int:
        return self.per_gpu_tokens.shape[0]

    @property
    def layers(self) -> int:
        return self.per_gpu_tokens.shape[1]

    @property
    def ep(self) -> int:
        return self.per_gpu_tokens.shape[2]

    @property
    def layer_ids(self) -> List[int]:
        return [self.first_layer + i for i in range(self.layers)]

    def received(self, iteration: int, layer: int, ep_rank: Optional[int] = None) -> int:
        """Token copies one rank (or the busiest rank) receives in a global layer."""
        cell = self.per_gpu_tokens[iteration, layer - self.first_layer]
        return int(cell.max() if ep_rank is None else cell[ep_rank])


class LayerStats(NamedTuple):
    layer: int
    min: int
    median: float
    max: int
    p99: int
    mean: float


class TokenPeak(NamedTuple):
    """Extreme received-token counts for one GPU."""
    tokens: int
    absolute_bound: int


def theoretical_peak(scn: ValidatedScenario) -> TokenPeak:
    """e·s, with the top-k inflated bound e·s·t_k alongside."""
    e, s = scn.parallel.ep, scn.model.seq_len
    return TokenPeak(tokens=e * s, absolute_bound=e * s * scn.model.topk)


def _cell_rng(seed: int, iteration: int, layer: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(iteration, layer))))


def _dirichlet(rng: np.random.Generator, alpha: float, size: int) -> np.ndarray:
    # log-space gamma draws stay finite for tiny alpha
    alpha = max(alpha, _MIN_ALPHA)
    log_g = np.log(rng.gamma(alpha + 1.0, size=size)) + np.log(1.0 - rng.random(size)) / alpha
    w = np.exp(log_g - log_g.max())
    return w / w.sum()


def _expert_probs(spec: GeneratorSpec, rng: np.random.Generator, num_experts: int, depth: int) -> np.ndarray:
    p = spec.resolved_params()
    if spec.kind == DistributionKind.UNIFORM:
        return np.full(num_experts, 1.0 / num_experts)
    if spec.kind == DistributionKind.DIRICHLET:
        return _dirichlet(rng, p["alpha"], num_experts)
    if spec.kind == DistributionKind.HOT_EXPERT:
        probs = np.full(num_experts, (1.0 - p["rho"]) / num_experts)
        probs[rng.integers(num_experts)] += p["rho"]
        return probs
    return _dirichlet(rng, p["alpha0"] * p["decay"] ** depth, num_experts)


def generate_trace(
    scn: ValidatedScenario,
    kind: Union[DistributionKind, str],
    params: Optional[Dict[str, float]] = None,
    seed: int = 0,
    iterations: int = 20,
    source_ranks: Optional[int] = None,
) -> RoutingTrace:
    """
    Generate a routing trace.

    Each of `source_ranks` EP ranks (default: all e) dispatches b·s·t_k token
    copies per MoE layer. Expert loads are multinomial over the expert
    probabilities of the cell; expert x lives on GPU x mod e.

    Raises:
        TraceError on invalid distribution parameters.
    """
    if iterations < 0:
        raise TraceError(f"iterations must be >= 0, got {iterations}")
    m, env = scn.model, scn.parallel
    spec = make_spec(kind, params, seed=seed, source_ranks=source_ranks or env.ep)
    tokens_per_rank = env.micro_batch * m.seq_len * m.topk
    total = spec.source_ranks * tokens_per_rank
    moe_layers = list(m.moe_layers)
    expert_gpu = np.arange(m.num_experts) % env.ep

    out = np.zeros((iterations, len(moe_layers), env.ep), dtype=np.int64)
    for it in range(iterations):
        for depth, layer in enumerate(moe_layers):
            rng = _cell_rng(seed, it, layer)
            counts = rng.multinomial(total, _expert_probs(spec, rng, m.num_experts, depth))
            np.add.at(out[it, depth], expert_gpu, counts)

    logger.debug("generated %s trace: %d iterations x %d layers", spec.kind.value, iterations, len(moe_layers))
    return RoutingTrace(out, spec, tokens_per_rank, first_layer=m.dense_layers)


def trace_stats(trace: RoutingTrace) -> List[LayerStats]:
    """Order statistics per layer over all (iteration, gpu) samples."""
    if trace.iterations == 0 or trace.layers == 0:
        raise TraceError("trace_stats needs a non-empty trace")
    stats = []
    for i, layer in enumerate(trace.layer_ids):
        values = trace.per_gpu_tokens[:, i, :].ravel()
        stats.append(LayerStats(
            layer=layer,
            min=int(values.min()),
            median=float(np.median(values)),
            max=int(values.max()),
            p99=int(np.percentile(values, 99, method="inverted_cdf")),
            mean=float(values.mean()),
        ))
    return stats


# -- export / import -------------------------------------------------------------

def _trace_metadata(trace: RoutingTrace) -> Dict[str, Any]:
    return {
        "generator": trace.generator.model_dump(mode="json"),
        "tokens_per_rank": trace.tokens_per_rank,
        "first_layer": trace.first_layer,
        "shape": list(trace.per_gpu_tokens.shape),
    }


def dump_trace(trace: RoutingTrace) -> str:
    buf = io.StringIO()
    buf.write(header_line(TRACE_KIND, _trace_metadata(trace)))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for (it, depth, gpu), tokens in np.ndenumerate(trace.per_gpu_tokens):
        writer.writerow((it, trace.first_layer + depth, gpu, int(tokens)))
    return buf.getvalue()


def save_trace(trace: RoutingTrace, path: Union[str, Path]) -> Path:
    return atomic_write_text(path, dump_trace(trace))


def load_trace(path: Union[str, Path]) -> RoutingTrace:
    """Read a trace written by save_trace."""
    with Path(path).open("r", encoding="utf-8", newline="") as f:
        _, meta = parse_header(f.readline(), TRACE_KIND)
        try:
            shape = tuple(int(x) for x in meta["shape"])
            spec = GeneratorSpec.model_validate(meta["generator"])
            first_layer = int(meta["first_layer"])
            tokens_per_rank = int(meta["tokens_per_rank"])
        except (KeyError, TypeError, ValueError) as e:
            raise TraceError(f"{path}: incomplete trace header ({e})") from None
        reader = csv.reader(f)
        columns = next(reader, None)
        if tuple(columns or ()) != TRACE_COLUMNS:
            raise TraceError(f"{path}: expected columns {TRACE_COLUMNS}, got {columns}")
        arr = np.zeros(shape, dtype=np.int64)
        for lineno, row in enumerate(reader, start=3):
            try:
                it, layer, gpu, tokens = (int(x) for x in row)
            except ValueError as e:
                raise TraceError(f"{path}: line {lineno}: bad record {row} ({e})") from None
            index = (it, layer - first_layer, gpu)
            if not all(0 <= i < n for i, n in zip(index, shape)):
                raise TraceError(
                    f"{path}: line {lineno}: iteration {it}, layer {layer}, gpu {gpu} outside the "
                    f"trace shape {list(shape)} starting at layer {first_layer}"
                )
            arr[index] = tokens
    return RoutingTrace(arr, spec, tokens_per_rank, first_layer=first_layer)
