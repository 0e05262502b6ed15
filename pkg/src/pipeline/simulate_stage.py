"""
Simulate Stage

The experiment flow: generate a routing trace, plan chunks with every
method, estimate throughput, and write trace / plan / throughput files.
"""
from pathlib import Path
from typing import Any, Dict

from ..core.chunk_tuning import DEFAULT_BINS, save_plan
from ..core.routing_sim import save_trace
from ..core.throughput import CostParams, compare_throughput, method_plans, save_throughput
from .base_stage import BaseStage, ExitCode, StageResult, StageRole
from .plan_stage import resolve_trace

TRACE_FILE = "trace.csv"
PLAN_FILE = "plan.csv"
THROUGHPUT_FILE = "throughput.csv"


class SimulateStage(BaseStage):
    """Trace -> plans -> throughput, deterministic per seed."""

    def __init__(self):
        super().__init__(
            name="Simulate-Stage",
            role=StageRole.SIMULATE,
            description="Synthetic routing, chunk plans and TGS comparison",
        )

    def execute(self, task: Dict[str, Any]) -> StageResult:
        """
        Execute a simulate task.

        Args:
            task: Task specification containing:
                - scenario: ValidatedScenario (required)
                - dist, dist_params, seed, iterations, source_ranks: trace generator
                - bins, fixed_chunks, static_bytes: planning
                - cost: CostParams; gpus: GPU count for TGS
                - out_dir: where to write the files (nothing written if absent)
        """
        scn = task["scenario"]
        trace = resolve_trace(task)
        bins = task.get("bins") or DEFAULT_BINS
        plans = method_plans(scn, trace, bins, task.get("fixed_chunks"), task.get("static_bytes"))
        report = compare_throughput(
            scn, trace, task.get("cost") or CostParams(),
            num_gpus=task.get("gpus"),
            plans=plans,
        )
        tuned = plans[-1]

        outputs = {}
        if task.get("out_dir"):
            out_dir = Path(task["out_dir"])
            outputs["trace"] = str(save_trace(trace, out_dir / TRACE_FILE))
            outputs["plan"] = str(save_plan(tuned, out_dir / PLAN_FILE))
            outputs["throughput"] = str(save_throughput(report, out_dir / THROUGHPUT_FILE))

        return StageResult(
            success=True,
            data={"trace": trace, "plans": {p.method: p for p in plans}, "throughput": report},
            metadata={"exit_code": ExitCode.OK, "outputs": outputs, "tuned_feasible": tuned.feasible},
        )
