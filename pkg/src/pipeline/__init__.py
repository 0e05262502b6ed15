"""
Chunkwise pipeline stages
"""
from .base_stage import BaseStage, ExitCode, StageResult, StageRole
from .coordinator import ChunkwiseWorkforce, Coordinator
from .estimate_stage import EstimateStage
from .plan_stage import PlanStage
from .simulate_stage import SimulateStage
from .verify_stage import VerifyStage

__all__ = [
    "BaseStage",
    "ExitCode",
    "StageResult",
    "StageRole",
    "ChunkwiseWorkforce",
    "Coordinator",
    "EstimateStage",
    "PlanStage",
    "SimulateStage",
    "VerifyStage",
]
