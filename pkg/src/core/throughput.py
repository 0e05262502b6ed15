"""
Throughput model

Parametric iteration-time model over a chunk plan, and tokens per GPU per
second (TGS = g_bs·s / (T·N)). Parameters are user calibrated; nothing here
is fitted to real hardware.
"""
import csv
import io
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, NonNegativeFloat

from .chunk_tuning import DEFAULT_BINS, ChunkPlan, check_bins, fixed_plan, plan_chunks
from .config import RecomputeMode, ValidatedScenario
from .errors import ThroughputError
from .files import atomic_write_text, header_line
from .routing_sim import RoutingTrace

logger = logging.getLogger(__name__)

REPORT_KIND = "throughput"
METHODS = ("no_chunk", "fixed_bin", "tuned")


class CostParams(BaseModel):
    """Per-token compute time, recompute overhead, per-chunk launch cost and fixed iteration time."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    t_compute_per_token: NonNegativeFloat = 1e-6
    t_recompute_factor: NonNegativeFloat = 1.0
    t_chunk_fixed: NonNegativeFloat = 1e-3
    t_base_iter: NonNegativeFloat = 1.0


def recompute_fraction(scn: ValidatedScenario) -> float:
    """Share of the MoE segment recomputed in backward."""
    return 1.0 if scn.parallel.recompute_mode in (RecomputeMode.FULL, RecomputeMode.CHUNKED) else 0.0


def _cells_time(cells, params: CostParams, fraction: float) -> float:
    per_token = params.t_compute_per_token * (1.0 + params.t_recompute_factor * fraction)
    return sum(c.received_tokens * per_token + c.c_selected * params.t_chunk_fixed for c in cells)


def iteration_time(
    plan: ChunkPlan,
    params: CostParams,
    scn: ValidatedScenario,
    iteration: Optional[int] = None,
) -> float:
    """
    T = t_base_iter + Σ_cells [tokens·t_token·(1 + f·recompute) + c_selected·t_chunk].

    With iteration=None the mean over the plan's iterations is returned; an
    empty plan costs t_base_iter.
    """
    fraction = recompute_fraction(scn)
    if iteration is not None:
        if not 0 <= iteration < plan.iterations:
            raise ThroughputError(f"iteration {iteration} outside [0, {plan.iterations})")
        return params.t_base_iter + _cells_time(plan.iteration_cells(iteration), params, fraction)
    if plan.iterations == 0:
        return params.t_base_iter
    return params.t_base_iter + _cells_time(plan.cells, params, fraction) / plan.iterations


def default_gpu_count(scn: ValidatedScenario) -> int:
    """t·p·c·d GPUs, but never fewer than the EP group."""
    env = scn.parallel
    return max(env.tp * env.pp * env.cp * env.dp, env.ep)


def tgs(seconds: float, scn: ValidatedScenario, num_gpus: Optional[int] = None) -> float:
    """Tokens per GPU per second: g_bs·s / (T·N)."""
    n = default_gpu_count(scn) if num_gpus is None else num_gpus
    if not seconds > 0:
        raise ThroughputError(f"iteration time must be > 0, got {seconds}")
    if n < 1:
        raise ThroughputError(f"GPU count must be >= 1, got {n}")
    return scn.parallel.global_batch * scn.model.seq_len / (seconds * n)


@dataclass(frozen=True)
class MethodThroughput:
    method: str
    iteration_seconds: Tuple[float, ...]
    mean_seconds: float
    tgs: float
    mean_chunks: float
    feasible: bool


@dataclass(frozen=True)
class ThroughputReport:
    num_gpus: int
    params: CostParams
    rows: Tuple[MethodThroughput, ...]

    def row(self, method: str) -> MethodThroughput:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_records(self) -> List[Dict[str, Any]]:
        out = []
        for r in self.rows:
            record = asdict(r)
            record["iteration_seconds"] = list(r.iteration_seconds)
            out.append(record)
        return out


def _method_row(plan: ChunkPlan, params: CostParams, scn: ValidatedScenario, n: int) -> MethodThroughput:
    per_iter = tuple(iteration_time(plan, params, scn, it) for it in range(plan.iterations))
    mean = iteration_time(plan, params, scn)
    chunks = [c.c_selected for c in plan.cells]
    return MethodThroughput(
        method=plan.method,
        iteration_seconds=per_iter,
        mean_seconds=mean,
        tgs=tgs(mean, scn, n),
        mean_chunks=sum(chunks) / len(chunks) if chunks else 0.0,
        feasible=plan.feasible,
    )


def method_plans(
    scn: ValidatedScenario,
    trace: RoutingTrace,
    bins: Sequence[int] = DEFAULT_BINS,
    fixed_chunks: Optional[int] = None,
    static_bytes: Optional[int] = None,
) -> List[ChunkPlan]:
    """no_chunk (c=1), fixed_bin (largest bin unless fixed_chunks) and tuned plans."""
    bins = check_bins(bins)
    return [
        fixed_plan(scn, trace, 1, static_bytes=static_bytes, method="no_chunk"),
        fixed_plan(scn, trace, fixed_chunks or bins[-1], static_bytes=static_bytes, method="fixed_bin"),
        plan_chunks(scn, trace, bins, static_bytes=static_bytes),
    ]


def compare_throughput(
    scn: ValidatedScenario,
    trace: RoutingTrace,
    params: CostParams,
    bins: Sequence[int] = DEFAULT_BINS,
    num_gpus: Optional[int] = None,
    fixed_chunks: Optional[int] = None,
    static_bytes: Optional[int] = None,
    plans: Optional[Sequence[ChunkPlan]] = None,
) -> ThroughputReport:
    """Iteration time and TGS of each method on one trace."""
    n = default_gpu_count(scn) if num_gpus is None else num_gpus
    if plans is None:
        plans = method_plans(scn, trace, bins, fixed_chunks, static_bytes)
    rows = tuple(_method_row(p, params, scn, n) for p in plans)
    for r in rows:
        logger.info("%s: T=%.6g s, TGS=%.6g", r.method, r.mean_seconds, r.tgs)
    return ThroughputReport(num_gpus=n, params=params, rows=rows)


def dump_throughput(report: ThroughputReport) -> str:
    buf = io.StringIO()
    buf.write(header_line(REPORT_KIND, {"num_gpus": report.num_gpus, "params": report.params.model_dump()}))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("method", "mean_seconds", "tgs", "mean_chunks", "feasible"))
    for r in report.rows:
        writer.writerow((r.method, repr(r.mean_seconds), repr(r.tgs), repr(r.mean_chunks), int(r.feasible)))
    return buf.getvalue()


def save_throughput(report: ThroughputReport, path: Union[str, Path]) -> Path:
    return atomic_write_text(path, dump_throughput(report))
