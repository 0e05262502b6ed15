"""
Memory comparison report

Static, activation and total memory of one pipeline stage under the three
training methods: no chunking on top of full recomputation, a fixed chunk
count, and memory-aware tuning.
"""
import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from .chunk_tuning import DEFAULT_BINS, check_bins, max_received_tokens, select_bin, theoretical_chunks
from .config import RecomputeMode, ValidatedScenario
from .files import atomic_write_text, header_line
from .memory_model import MemoryEstimate, absolute_token_bound, capacity_bytes, estimate

logger = logging.getLogger(__name__)

REPORT_KIND = "memory"
GB = 1e9


@dataclass(frozen=True)
class MethodMemory:
    method: str
    chunks: int
    c_theoretical: Optional[int]
    estimate: MemoryEstimate

    @property
    def feasible(self) -> bool:
        return self.estimate.feasible


@dataclass(frozen=True)
class MemoryReport:
    scenario: str
    pp_rank: int
    received_tokens: int
    capacity_bytes: int
    rows: Tuple[MethodMemory, ...]

    def row(self, method: str) -> MethodMemory:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_records(self) -> List[Dict[str, Any]]:
        out = []
        for r in self.rows:
            est = r.estimate
            out.append({
                "method": r.method,
                "pp_rank": self.pp_rank,
                "received_tokens": est.received_tokens,
                "c_selected": r.chunks,
                "c_theoretical": r.c_theoretical,
                "chunk_tokens": est.chunk_tokens,
                "static_bytes": est.static_bytes,
                "activation_bytes": est.activation_bytes,
                "total_bytes": est.total_bytes,
                "capacity_bytes": self.capacity_bytes,
                "headroom_bytes": est.headroom_bytes,
                "feasible": est.feasible,
            })
        return out

    def format_table(self) -> str:
        lines = [
            f"scenario {self.scenario or '-'}  stage {self.pp_rank}  "
            f"s'={self.received_tokens}  capacity {self.capacity_bytes / GB:.1f} GB",
            f"{'method':<10} {'c':>3} {'static (GB)':>12} {'active (GB)':>12} {'all (GB)':>10}  training",
        ]
        for r in self.rows:
            est = r.estimate
            lines.append(
                f"{r.method:<10} {r.chunks:>3} {est.static_bytes / GB:>12.1f} "
                f"{est.activation_bytes / GB:>12.1f} {est.total_bytes / GB:>10.1f}  "
                f"{'ok' if est.feasible else 'x'}"
            )
        return "\n".join(lines)


def compare_methods(
    scn: ValidatedScenario,
    bins: Sequence[int] = DEFAULT_BINS,
    received_tokens: Optional[int] = None,
    fixed_chunks: Optional[int] = None,
    static_bytes: Optional[int] = None,
    methods: Sequence[str] = ("no_chunk", "fixed_bin", "tuned"),
) -> MemoryReport:
    """
    Memory of the scenario's stage under each method.

    Args:
        scn: Scenario; pp_rank picks the stage. No-recompute scenarios are
            evaluated with full recomputation, which all three methods use.
        bins: Chunk bins for the tuned method; the largest is the fixed count
        received_tokens: s' on the GPU; defaults to the worst case e·s·t_k
        fixed_chunks: Chunk count of fixed_bin (default: largest bin)
        static_bytes: Override the stage's static memory
    """
    bins = check_bins(bins)
    if scn.parallel.recompute_mode == RecomputeMode.NONE:
        scn = scn.with_recompute(RecomputeMode.FULL)
    tokens = absolute_token_bound(scn) if received_tokens is None else received_tokens

    rows = []
    for method in methods:
        c_theory = None
        if method == "no_chunk":
            chunks = 1
        elif method == "fixed_bin":
            chunks = fixed_chunks or bins[-1]
        elif method == "tuned":
            s_max = max_received_tokens(scn, static_bytes=static_bytes)
            if s_max > 0:
                c_theory = theoretical_chunks(tokens, s_max)
                chunks = select_bin(c_theory, bins).chunks
            else:
                logger.warning("stage %d has no token budget (max received tokens %d)", scn.parallel.pp_rank, s_max)
                c_theory, chunks = 0, bins[-1]
        else:
            raise ValueError(f"unknown method {method!r}")
        est = estimate(scn, tokens, chunks=chunks, static_bytes=static_bytes)
        if not est.feasible:
            logger.warning("%s on stage %d needs %d B over capacity", method, est.pp_rank, -est.headroom_bytes)
        rows.append(MethodMemory(method, chunks, c_theory, est))
    return MemoryReport(scn.name, scn.parallel.pp_rank, tokens, capacity_bytes(scn.hardware), tuple(rows))


def dump_memory_report(report: MemoryReport) -> str:
    records = report.to_records()
    buf = io.StringIO()
    buf.write(header_line(REPORT_KIND, {"scenario": report.scenario, "pp_rank": report.pp_rank}))
    if records:
        writer = csv.DictWriter(buf, fieldnames=list(records[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(records)
    return buf.getvalue()


def save_memory_report(report: MemoryReport, path: Union[str, Path]) -> Path:
    return atomic_write_text(path, dump_memory_report(report))
