"""
Estimate Stage

Memory report for one pipeline stage: static, activation and total bytes
under each training method, with the capacity verdict.
"""
from typing import Any, Dict

from ..core.chunk_tuning import DEFAULT_BINS, stage_peak_received
from ..core.report import compare_methods
from ..core.throughput import METHODS
from .base_stage import BaseStage, ExitCode, StageResult, StageRole


class EstimateStage(BaseStage):
    """Evaluates the memory model for the no_chunk, fixed_bin and tuned methods."""

    def __init__(self):
        super().__init__(
            name="Estimate-Stage",
            role=StageRole.ESTIMATE,
            description="Static and activation memory per method against GPU capacity",
        )

    def execute(self, task: Dict[str, Any]) -> StageResult:
        """
        Execute an estimate task.

        Args:
            task: Task specification containing:
                - scenario: ValidatedScenario (required)
                - stage: pipeline rank to evaluate (default: the scenario's)
                - received_tokens: s' on the GPU, or
                - trace: RoutingTrace whose peak s'' for the stage is used
                - method: one of no_chunk / fixed_bin / tuned (default: all)
                - bins, fixed_chunks, static_bytes, ep_rank

        Returns:
            StageResult with a MemoryReport; exit code 2 when the requested
            method (or, without one, every method) is over capacity
        """
        scn = task["scenario"]
        if task.get("stage") is not None:
            scn = scn.for_stage(task["stage"])
        method = task.get("method")
        if method is not None and method not in METHODS:
            return StageResult(False, None, f"unknown method {method!r}; choose from {', '.join(METHODS)}",
                               {"exit_code": ExitCode.CONFIG})

        tokens = task.get("received_tokens")
        if tokens is None and task.get("trace") is not None:
            tokens = stage_peak_received(scn, task["trace"], ep_rank=task.get("ep_rank"))

        report = compare_methods(
            scn,
            bins=task.get("bins") or DEFAULT_BINS,
            received_tokens=tokens,
            fixed_chunks=task.get("fixed_chunks"),
            static_bytes=task.get("static_bytes"),
            methods=(method,) if method else METHODS,
        )
        infeasible = [r.method for r in report.rows if not r.feasible]

        blocked = bool(infeasible) if method else len(infeasible) == len(report.rows)
        return StageResult(
            success=True,
            data=report,
            metadata={
                "exit_code": ExitCode.INFEASIBLE if blocked else ExitCode.OK,
                "infeasible_methods": infeasible,
            },
        )
