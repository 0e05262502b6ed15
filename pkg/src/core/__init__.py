"""
Chunkwise Core Module
"""
from .config import (
    ModelConfig,
    ParallelEnv,
    PrecisionAndHardware,
    RecomputeMode,
    ValidatedScenario,
    load_scenario,
    reference_scenario,
    save_scenario,
    validate,
)
from .errors import ChunkwiseError, ScenarioError
from .memory_model import MemoryEstimate, activation_memory, estimate, feasibility, resident_multiplier, static_memory
from .routing_sim import RoutingTrace, generate_trace, theoretical_peak, trace_stats
from .chunk_tuning import ChunkPlan, max_received_tokens, plan_chunks, select_bin, theoretical_chunks
from .throughput import CostParams, ThroughputReport, iteration_time, tgs
from .settings import settings

__all__ = [
    "ModelConfig",
    "ParallelEnv",
    "PrecisionAndHardware",
    "RecomputeMode",
    "ValidatedScenario",
    "load_scenario",
    "reference_scenario",
    "save_scenario",
    "validate",
    "ChunkwiseError",
    "ScenarioError",
    "MemoryEstimate",
    "activation_memory",
    "estimate",
    "feasibility",
    "resident_multiplier",
    "static_memory",
    "RoutingTrace",
    "generate_trace",
    "theoretical_peak",
    "trace_stats",
    "ChunkPlan",
    "max_received_tokens",
    "plan_chunks",
    "select_bin",
    "theoretical_chunks",
    "CostParams",
    "ThroughputReport",
    "iteration_time",
    "tgs",
    "settings",
]
