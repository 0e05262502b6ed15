"""
Verify Stage

Runs the kernel property suite and reports the first failing seed.
"""
from typing import Any, Dict

from ..core.verification import KernelSize, run_suite
from .base_stage import BaseStage, ExitCode, StageResult, StageRole


class VerifyStage(BaseStage):
    def __init__(self):
        super().__init__(
            name="Verify-Stage",
            role=StageRole.VERIFY,
            description="Chunked kernel equivalence, gradient and peak-memory checks",
        )

    def execute(self, task: Dict[str, Any]) -> StageResult:
        size = task.get("size") or KernelSize()
        report = run_suite(size, task.get("seeds", 10), inject_fault=task.get("inject_fault", False),
                           first_seed=task.get("first_seed", 0))
        if report.passed:
            return StageResult(True, report, metadata={"exit_code": ExitCode.OK})
        first = report.failures[0]
        return StageResult(
            success=False,
            data=report,
            error=f"{first.check} failed for seed {first.seed}: {first.detail}",
            metadata={"exit_code": ExitCode.PROPERTY_FAILURE, "failing_seeds": sorted({f.seed for f in report.failures})},
        )
