"""
Coordinator - routes tasks to the registered stages

Each CLI subcommand is one action; "report" chains estimate and simulate
for a full comparison of the three methods on one scenario.
"""
import logging
from typing import Any, Dict, Optional

from .base_stage import BaseStage, ExitCode, StageResult, StageRole

logger = logging.getLogger(__name__)


class Coordinator:
    """Holds the stages by role and dispatches tasks to them."""

    def __init__(self):
        self.stages: Dict[str, BaseStage] = {}

    def register_stage(self, stage: BaseStage):
        self.stages[stage.role.value] = stage

    def get_stage(self, role: StageRole) -> Optional[BaseStage]:
        return self.stages.get(role.value)

    def execute(self, task: Dict[str, Any]) -> StageResult:
        """
        Execute a task.

        Args:
            task: Task specification; "action" is a StageRole value or "report",
                the rest is passed to the stage

        Returns:
            StageResult of the stage (or of the first failing stage for "report")
        """
        action = task.get("action", "estimate")
        if action == "report":
            return self._report(task)
        try:
            role = StageRole(action)
        except ValueError:
            return StageResult(False, None, f"Unknown action: {action}", {"exit_code": ExitCode.CONFIG})
        stage = self.get_stage(role)
        if stage is None:
            return StageResult(False, None, f"{role.value} stage not registered", {"exit_code": ExitCode.CONFIG})
        logger.info("running %s", stage.name)
        return stage.run(task)

    def _report(self, task: Dict[str, Any]) -> StageResult:
        results = {}
        for role in (StageRole.ESTIMATE, StageRole.SIMULATE):
            result = self.execute({**task, "action": role.value})
            results[role.value] = result
            if not result.success:
                return StageResult(False, results, result.error, result.metadata)
        return StageResult(
            success=True,
            data={role: r.data for role, r in results.items()},
            metadata={"exit_code": max(r.exit_code for r in results.values())},
        )


class ChunkwiseWorkforce:
    """
    Owns a Coordinator with every stage registered and gives the CLI and
    demo one call per workflow step.
    """

    def __init__(self):
        self.coordinator = Coordinator()
        self._initialized = False

    def initialize(self):
        if self._initialized:
            return

        from .estimate_stage import EstimateStage
        from .plan_stage import PlanStage
        from .simulate_stage import SimulateStage
        from .verify_stage import VerifyStage

        self.coordinator.register_stage(EstimateStage())
        self.coordinator.register_stage(SimulateStage())
        self.coordinator.register_stage(PlanStage())
        self.coordinator.register_stage(VerifyStage())
        self._initialized = True

    def run(self, action: str, **task: Any) -> StageResult:
        self.initialize()
        return self.coordinator.execute({"action": action, **task})

    def estimate(self, **task: Any) -> StageResult:
        return self.run("estimate", **task)

    def simulate(self, **task: Any) -> StageResult:
        return self.run("simulate", **task)

    def plan(self, **task: Any) -> StageResult:
        return self.run("plan", **task)

    def verify(self, **task: Any) -> StageResult:
        return self.run("verify", **task)
