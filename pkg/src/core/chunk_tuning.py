"""
Memory-aware chunk tuning

Before training, derive from the memory model how many received tokens one
MoE layer may hold on a stage (max_received_tokens). During training, split
each layer's received tokens into ceil(s''/s'_max) chunks, snapped up to the
configured chunk bins.
"""
import csv
import io
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from .config import ValidatedScenario
from .errors import PlanningError, StaticInfeasibleError
from .files import atomic_write_text, header_line
from .memory_model import (
    attention_segment_bytes,
    bytes_per_received_token,
    capacity_bytes,
    stage_static_memory,
)
from .routing_sim import RoutingTrace

logger = logging.getLogger(__name__)

DEFAULT_BINS: Tuple[int, ...] = (1, 2, 4, 8)
PLAN_KIND = "plan"
PLAN_COLUMNS = (
    "iteration", "layer", "stage", "received_tokens", "max_received",
    "c_theoretical", "c_selected", "clamped", "feasible",
)


def max_received_tokens(
    scn: ValidatedScenario,
    stage: Optional[int] = None,
    static_bytes: Optional[int] = None,
) -> int:
    """
    Largest received-token count one MoE layer may hold on a stage:

        floor((alpha·M_GPU − M_sta − attention rows) / bytes per received token)

    May be <= 0, meaning even single-token chunks do not fit.

    Raises:
        StaticInfeasibleError: static memory alone exceeds alpha·M_GPU
    """
    rank = scn.parallel.pp_rank if stage is None else stage
    stage_scn = scn.for_stage(rank)
    if static_bytes is None:
        static_bytes = stage_static_memory(stage_scn).total
    capacity = capacity_bytes(scn.hardware)
    if static_bytes > capacity:
        raise StaticInfeasibleError(
            f"stage {rank}: static memory {static_bytes} B exceeds usable capacity {capacity} B"
        )
    available = capacity - static_bytes - attention_segment_bytes(stage_scn)
    limit = math.floor(available / bytes_per_received_token(stage_scn))
    logger.debug("stage %d: max received tokens %d (available %d B)", rank, limit, available)
    return limit


def theoretical_chunks(received: int, max_received: int) -> int:
    """ceil(s''/s'_max), at least one chunk."""
    if max_received <= 0:
        raise PlanningError(f"no token budget left (max received tokens = {max_received})")
    if received < 0:
        raise PlanningError(f"received tokens must be >= 0, got {received}")
    return max(1, -(-received // max_received))


def check_bins(bins: Sequence[int]) -> Tuple[int, ...]:
    bins = tuple(int(b) for b in bins)
    if not bins:
        raise PlanningError("chunk bins must not be empty")
    if bins[0] < 1:
        raise PlanningError(f"chunk bins must start at >= 1, got {bins[0]}")
    if any(a >= b for a, b in zip(bins, bins[1:])):
        raise PlanningError(f"chunk bins must be strictly increasing, got {list(bins)}")
    return bins


class BinChoice(NamedTuple):
    chunks: int
    clamped: bool


def select_bin(chunks: int, bins: Sequence[int]) -> BinChoice:
    """Smallest bin >= chunks; the largest bin (clamped) when none is big enough."""
    bins = check_bins(bins)
    for b in bins:
        if b >= chunks:
            return BinChoice(b, False)
    logger.warning("chunk count %d exceeds largest bin %d; clamping", chunks, bins[-1])
    return BinChoice(bins[-1], True)


@dataclass(frozen=True)
class PlanCell:
    iteration: int
    layer: int
    stage: int
    received_tokens: int
    max_received: int
    c_theoretical: int
    c_selected: int
    clamped: bool
    feasible: bool

    @property
    def chunk_tokens(self) -> int:
        return -(-self.received_tokens // self.c_selected)


@dataclass(frozen=True)
class ChunkPlan:
    """Chunk decision for every (iteration, MoE layer) of a trace."""
    method: str
    bins: Tuple[int, ...]
    iterations: int
    layer_ids: Tuple[int, ...]
    cells: Tuple[PlanCell, ...]

    @property
    def feasible(self) -> bool:
        return all(c.feasible for c in self.cells)

    @property
    def clamped_cells(self) -> int:
        return sum(c.clamped for c in self.cells)

    def iteration_cells(self, iteration: int) -> List[PlanCell]:
        return [c for c in self.cells if c.iteration == iteration]

    def grid(self, field: str = "c_selected") -> np.ndarray:
        """[iteration x layer] array of one cell field: the chunk heat map."""
        out = np.zeros((self.iterations, len(self.layer_ids)), dtype=np.int64)
        column = {layer: i for i, layer in enumerate(self.layer_ids)}
        for c in self.cells:
            out[c.iteration, column[c.layer]] = int(getattr(c, field))
        return out

    def layer_means(self, field: str = "c_selected") -> List[float]:
        if self.iterations == 0:
            return [0.0] * len(self.layer_ids)
        return [float(v) for v in self.grid(field).mean(axis=0)]

    def to_records(self) -> List[Dict[str, Any]]:
        return [asdict(c) for c in self.cells]


def _received(trace: RoutingTrace, scn: ValidatedScenario, iteration: int, layer: int,
              ep_rank: Optional[int]) -> int:
    # trace counts are per micro-batch; the memory model takes per-sequence tokens
    return -(-trace.received(iteration, layer, ep_rank) // scn.parallel.micro_batch)


def stage_peak_received(
    scn: ValidatedScenario,
    trace: RoutingTrace,
    stage: Optional[int] = None,
    ep_rank: Optional[int] = None,
) -> int:
    """Largest s'' over the trace's iterations and the stage's MoE layers (0 if it has none)."""
    _check_dims(scn, trace, ep_rank)
    rank = scn.parallel.pp_rank if stage is None else stage
    layers = [layer for layer in trace.layer_ids if scn.stage_of_layer(layer) == rank]
    return max(
        (_received(trace, scn, it, layer, ep_rank) for it in range(trace.iterations) for layer in layers),
        default=0,
    )


def _check_dims(scn: ValidatedScenario, trace: RoutingTrace, ep_rank: Optional[int]) -> None:
    expected = list(scn.model.moe_layers)
    if trace.layer_ids != expected:
        raise PlanningError(
            f"trace covers layers {trace.layer_ids[:1]}..{trace.layer_ids[-1:]} but the scenario's "
            f"MoE layers are {expected[:1]}..{expected[-1:]}"
        )
    if trace.ep != scn.parallel.ep:
        raise PlanningError(f"trace has {trace.ep} GPUs per layer, scenario ep = {scn.parallel.ep}")
    if ep_rank is not None and not 0 <= ep_rank < trace.ep:
        raise PlanningError(f"ep_rank {ep_rank} outside [0, {trace.ep})")


class _StageBudget:
    """s'_max per pipeline stage, computed once and reused for every cell."""

    def __init__(self, scn: ValidatedScenario, static_bytes: Optional[int]):
        self.scn = scn
        self.static_bytes = static_bytes
        self._cache: Dict[int, int] = {}

    def __call__(self, stage: int) -> int:
        if stage not in self._cache:
            limit = max_received_tokens(self.scn, stage, self.static_bytes)
            if limit <= 0:
                logger.warning("stage %d has no token budget (max received tokens %d)", stage, limit)
            self._cache[stage] = limit
        return self._cache[stage]


def plan_chunks(
    scn: ValidatedScenario,
    trace: RoutingTrace,
    bins: Sequence[int] = DEFAULT_BINS,
    ep_rank: Optional[int] = None,
    static_bytes: Optional[int] = None,
) -> ChunkPlan:
    """
    Memory-aware plan: per cell, c = ceil(s''/s'_max) snapped to the next bin up.

    Args:
        scn: Scenario; every pipeline stage is planned for its own layers
        trace: Routing trace over the scenario's MoE layers
        bins: Allowed chunk counts, strictly increasing
        ep_rank: Plan for one EP rank instead of the busiest one
        static_bytes: Override the per-stage static memory

    Raises:
        PlanningError on bad bins or mismatched traces
        StaticInfeasibleError when a stage's static memory alone does not fit
    """
    bins = check_bins(bins)
    _check_dims(scn, trace, ep_rank)
    budget = _StageBudget(scn, static_bytes)
    cells = []
    clamped = 0
    for it in range(trace.iterations):
        for layer in trace.layer_ids:
            stage = scn.stage_of_layer(layer)
            s_max = budget(stage)
            received = _received(trace, scn, it, layer, ep_rank)
            if s_max > 0:
                c_theory = theoretical_chunks(received, s_max)
                choice = _quiet_select(c_theory, bins)
            else:
                # no budget: largest bin, marked infeasible unless nothing arrived
                c_theory = 0
                choice = BinChoice(bins[-1], True)
            clamped += choice.clamped
            cells.append(PlanCell(
                iteration=it,
                layer=layer,
                stage=stage,
                received_tokens=received,
                max_received=s_max,
                c_theoretical=c_theory,
                c_selected=choice.chunks,
                clamped=choice.clamped,
                feasible=-(-received // choice.chunks) <= s_max,
            ))
    if clamped:
        logger.warning("%d plan cell(s) clamped to the largest bin %d", clamped, bins[-1])
    return ChunkPlan("tuned", bins, trace.iterations, tuple(trace.layer_ids), tuple(cells))


def _quiet_select(chunks: int, bins: Tuple[int, ...]) -> BinChoice:
    # plan_chunks reports clamping once for the whole plan
    for b in bins:
        if b >= chunks:
            return BinChoice(b, False)
    return BinChoice(bins[-1], True)


def fixed_plan(
    scn: ValidatedScenario,
    trace: RoutingTrace,
    chunks: int,
    ep_rank: Optional[int] = None,
    static_bytes: Optional[int] = None,
    method: Optional[str] = None,
) -> ChunkPlan:
    """Same chunk count in every cell (no chunking when chunks=1)."""
    if chunks < 1:
        raise PlanningError(f"chunk count must be >= 1, got {chunks}")
    _check_dims(scn, trace, ep_rank)
    budget = _StageBudget(scn, static_bytes)
    cells = []
    for it in range(trace.iterations):
        for layer in trace.layer_ids:
            stage = scn.stage_of_layer(layer)
            s_max = budget(stage)
            received = _received(trace, scn, it, layer, ep_rank)
            c_theory = theoretical_chunks(received, s_max) if s_max > 0 else 0
            cells.append(PlanCell(
                iteration=it,
                layer=layer,
                stage=stage,
                received_tokens=received,
                max_received=s_max,
                c_theoretical=c_theory,
                c_selected=chunks,
                clamped=False,
                feasible=-(-received // chunks) <= s_max,
            ))
    name = method or ("no_chunk" if chunks == 1 else "fixed_bin")
    return ChunkPlan(name, (chunks,), trace.iterations, tuple(trace.layer_ids), tuple(cells))


# -- export ---------------------------------------------------------------------

def dump_plan(plan: ChunkPlan) -> str:
    buf = io.StringIO()
    buf.write(header_line(PLAN_KIND, {
        "method": plan.method,
        "bins": list(plan.bins),
        "iterations": plan.iterations,
        "layers": list(plan.layer_ids),
    }))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PLAN_COLUMNS)
    for c in plan.cells:
        writer.writerow((c.iteration, c.layer, c.stage, c.received_tokens, c.max_received,
                         c.c_theoretical, c.c_selected, int(c.clamped), int(c.feasible)))
    return buf.getvalue()


def save_plan(plan: ChunkPlan, path: Union[str, Path]) -> Path:
    return atomic_write_text(path, dump_plan(plan))
