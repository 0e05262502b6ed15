"""
Plan Stage

Chunk plan for a routing trace, loaded from disk or generated on the fly.
"""
import logging
from typing import Any, Dict

from ..core.chunk_tuning import DEFAULT_BINS, plan_chunks, save_plan
from ..core.routing_sim import RoutingTrace, generate_trace, load_trace
from .base_stage import BaseStage, ExitCode, StageResult, StageRole

logger = logging.getLogger(__name__)


def resolve_trace(task: Dict[str, Any]) -> RoutingTrace:
    """The task's trace: given directly, read from trace_path, or generated from dist/seed/iterations."""
    if task.get("trace") is not None:
        return task["trace"]
    if task.get("trace_path"):
        return load_trace(task["trace_path"])
    return generate_trace(
        task["scenario"],
        task.get("dist", "uniform"),
        task.get("dist_params"),
        seed=task.get("seed", 0),
        iterations=task.get("iterations", 20),
        source_ranks=task.get("source_ranks"),
    )


class PlanStage(BaseStage):
    """Memory-aware chunk plan over every (iteration, MoE layer) cell."""

    def __init__(self):
        super().__init__(
            name="Plan-Stage",
            role=StageRole.PLAN,
            description="Per-layer, per-iteration chunk counts from the memory budget",
        )

    def execute(self, task: Dict[str, Any]) -> StageResult:
        """
        Args:
            task: scenario, a trace source (see resolve_trace), bins, ep_rank,
                static_bytes and an optional output path

        Returns:
            StageResult with the ChunkPlan; exit code 2 if any cell stays over budget
        """
        scn = task["scenario"]
        trace = resolve_trace(task)
        plan = plan_chunks(
            scn, trace,
            bins=task.get("bins") or DEFAULT_BINS,
            ep_rank=task.get("ep_rank"),
            static_bytes=task.get("static_bytes"),
        )
        outputs = {}
        if task.get("output"):
            outputs["plan"] = str(save_plan(plan, task["output"]))

        over = sum(not c.feasible for c in plan.cells)
        if over:
            logger.warning("%d plan cell(s) exceed the token budget even at the largest bin", over)
        return StageResult(
            success=True,
            data=plan,
            metadata={
                "exit_code": ExitCode.INFEASIBLE if over else ExitCode.OK,
                "outputs": outputs,
                "clamped_cells": plan.clamped_cells,
            },
        )
