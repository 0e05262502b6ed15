"""
Theoretical memory cost model

Static memory (weights, gradients, optimizer states) and stored activation
memory of one MoE transformer layer, row by row, plus the capacity check.

All byte math is exact integer arithmetic. Each stored-activation row is
floor(m·D_t·b·elements / (t·c)); the activation total is the sum of the rows.
"""
import logging
import math
from dataclasses import asdict, dataclass, replace
from fractions import Fraction
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .config import PrecisionAndHardware, ParallelEnv, RecomputeMode, ValidatedScenario
from .errors import MemoryModelError

logger = logging.getLogger(__name__)


def resident_multiplier(env: ParallelEnv) -> int:
    """
    How many layers' worth of activations are resident at the peak.

    Full recomputation keeps one. Chunked recomputation runs on top of full
    recomputation, so it keeps one as well. Without recomputation the
    pipeline schedule keeps v·p + p − 2·r_pp − 1, never less than one.
    """
    if env.recompute_mode in (RecomputeMode.FULL, RecomputeMode.CHUNKED):
        return 1
    m = env.virtual_stages * env.pp + env.pp - 2 * env.pp_rank - 1
    return max(m, 1)


# -- stored activations --------------------------------------------------------

@dataclass(frozen=True)
class ActivationTerm:
    """One stored-activation row of an MoE transformer layer."""
    module: str
    input_id: int
    bytes: int


def _row_elements(scn: ValidatedScenario, received_tokens: int) -> List[Tuple[str, int, int]]:
    m = scn.model
    s, h = m.seq_len, m.hidden_size
    n = received_tokens
    return [
        ("norm", 1, s * h),
        ("q, k, v", 2, s * h),
        ("attention", 3, s * m.num_heads * m.head_dim),
        ("attention", 4, s * m.num_kv_heads * m.head_dim),
        ("attention", 5, s * m.num_kv_heads * m.head_dim),
        ("o", 6, s * h),
        ("add", 7, 0),
        ("norm", 8, s * h),
        ("router", 9, s * h),
        ("router", 10, s * m.router_dim),
        ("activated expert", 11, n * h),
        ("activated expert", 12, 2 * n * m.expert_intermediate),
        ("score mul", 13, n * h),
        ("add", 14, 0),
    ]


MOE_ROW_IDS = (11, 12, 13)


def _check_tokens(scn: ValidatedScenario, received_tokens: int) -> None:
    if received_tokens < 0:
        raise MemoryModelError(f"received tokens must be >= 0, got {received_tokens}")
    bound = absolute_token_bound(scn)
    if received_tokens > bound:
        raise MemoryModelError(
            f"received tokens {received_tokens} exceed e·s·t_k = {bound}; routing cannot deliver that"
        )


def absolute_token_bound(scn: ValidatedScenario) -> int:
    """e·s·t_k: every token copy of every EP rank on one GPU."""
    return scn.parallel.ep * scn.model.seq_len * scn.model.topk


def chunk_tokens(received_tokens: int, chunks: int) -> int:
    """Largest chunk when received tokens are split into `chunks` pieces."""
    if chunks < 1:
        raise MemoryModelError(f"chunk count must be >= 1, got {chunks}")
    return -(-received_tokens // chunks)


def activation_terms(scn: ValidatedScenario, received_tokens: int, chunks: int = 1) -> List[ActivationTerm]:
    """
    Stored activation bytes per row.

    With chunks > 1 the MoE rows (11–13) hold only the largest chunk.
    """
    _check_tokens(scn, received_tokens)
    tokens = chunk_tokens(received_tokens, chunks)
    env, hw = scn.parallel, scn.hardware
    scale = resident_multiplier(env) * hw.act_bytes * env.micro_batch
    split = env.tp * env.cp
    return [
        ActivationTerm(module, row, scale * elements // split)
        for module, row, elements in _row_elements(scn, tokens)
    ]


def activation_closed_form(scn: ValidatedScenario, received_tokens: int) -> int:
    """Closed-form total: (m/(tc))·D_t·b·(s·(5h + a·h_d + 2k_a·h_d + e_n) + s'·(2h + 2g_e))."""
    _check_tokens(scn, received_tokens)
    m, env = scn.model, scn.parallel
    h = m.hidden_size
    seq_part = m.seq_len * (5 * h + m.num_heads * m.head_dim + 2 * m.num_kv_heads * m.head_dim + m.router_dim)
    token_part = received_tokens * (2 * h + 2 * m.expert_intermediate)
    scale = resident_multiplier(env) * scn.hardware.act_bytes * env.micro_batch
    return scale * (seq_part + token_part) // (env.tp * env.cp)


def attention_segment_bytes(scn: ValidatedScenario) -> int:
    """Bytes of the rows that do not depend on routing (rows 1–10)."""
    return sum(t.bytes for t in activation_terms(scn, 0) if t.input_id not in MOE_ROW_IDS)


def bytes_per_received_token(scn: ValidatedScenario) -> Fraction:
    """Slope of activation memory in received tokens: (m/(tc))·D_t·b·(2h + 2g_e)."""
    m, env = scn.model, scn.parallel
    numer = resident_multiplier(env) * scn.hardware.act_bytes * env.micro_batch
    numer *= 2 * m.hidden_size + 2 * m.expert_intermediate
    return Fraction(numer, env.tp * env.cp)


@dataclass(frozen=True)
class ActivationMemory:
    """Activation part of a memory estimate."""
    activation_bytes: int
    terms: Tuple[ActivationTerm, ...]
    resident_multiplier: int
    received_tokens: int
    chunks: int
    chunk_tokens: int


def activation_memory(scn: ValidatedScenario, received_tokens: int, chunks: int = 1) -> ActivationMemory:
    """Stored activation memory of one layer for a given received-token count."""
    terms = tuple(activation_terms(scn, received_tokens, chunks))
    return ActivationMemory(
        activation_bytes=sum(t.bytes for t in terms),
        terms=terms,
        resident_multiplier=resident_multiplier(scn.parallel),
        received_tokens=received_tokens,
        chunks=chunks,
        chunk_tokens=chunk_tokens(received_tokens, chunks),
    )


# -- static memory -----------------------------------------------------------

@dataclass(frozen=True)
class ModuleSize:
    """Parameter count of one weighted module and how many copies a stage holds."""
    name: str
    params: int
    count: int = 1

    @property
    def total(self) -> int:
        return self.params * self.count


@dataclass(frozen=True)
class StaticBreakdown:
    params_bytes: int
    grads_bytes: int
    optimizer_bytes: int

    @property
    def total(self) -> int:
        return self.params_bytes + self.grads_bytes + self.optimizer_bytes


def static_breakdown(hw: PrecisionAndHardware, total_params: int) -> StaticBreakdown:
    if total_params < 0:
        raise MemoryModelError(f"parameter count must be >= 0, got {total_params}")
    return StaticBreakdown(
        params_bytes=hw.param_bytes * total_params,
        grads_bytes=hw.grad_bytes * total_params,
        optimizer_bytes=4 * hw.optim_bytes * total_params,
    )


def static_memory(scn: ValidatedScenario, module_sizes: Sequence[int]) -> int:
    """
    Static bytes for per-layer module sizes S_i (already divided by t):
    (D_para + D_grad + 4·D_opt)·v·l·ΣS_i.
    """
    if any(size < 0 for size in module_sizes):
        raise MemoryModelError("module sizes must be non-negative")
    env = scn.parallel
    layers = env.virtual_stages * env.layers_per_stage
    return static_breakdown(scn.hardware, layers * sum(module_sizes)).total


def _shard(params: int, tp: int) -> int:
    return -(-params // tp)


def stage_module_sizes(scn: ValidatedScenario, pp_rank: Optional[int] = None) -> List[ModuleSize]:
    """
    Weighted modules held by one pipeline rank.

    Assumed composition (never enumerated in published form):
      - every layer: two norms (h each), q/k/v and o projections
      - dense layers (the first d_l): gated MLP, 3·h·g_d
      - MoE layers: router h·e_n and ⌈E_total/e⌉ local gated experts, 3·h·g_e each
      - first rank: input embedding V·h; last rank: output head V·h and final norm
    Matrices are divided by t; norms and the router are replicated.
    """
    m, env = scn.model, scn.parallel
    rank = env.pp_rank if pp_rank is None else pp_rank
    h, tp = m.hidden_size, env.tp
    layers = scn.stage_layers(rank)
    n_dense = sum(1 for layer in layers if layer < m.dense_layers)
    n_moe = len(layers) - n_dense
    local_experts = -(-m.num_experts // env.ep)

    sizes = [
        ModuleSize("norms", 2 * h, len(layers)),
        ModuleSize("attention_qkv", _shard(h * (m.num_heads + 2 * m.num_kv_heads) * m.head_dim, tp), len(layers)),
        ModuleSize("attention_out", _shard(m.num_heads * m.head_dim * h, tp), len(layers)),
    ]
    if n_dense:
        sizes.append(ModuleSize("dense_mlp", _shard(3 * h * m.dense_intermediate, tp), n_dense))
    if n_moe:
        sizes.append(ModuleSize("router", h * m.router_dim, n_moe))
        sizes.append(ModuleSize("experts", _shard(local_experts * 3 * h * m.expert_intermediate, tp), n_moe))
    if rank == 0:
        sizes.append(ModuleSize("embedding", _shard(m.vocab_size * h, tp)))
    if rank == env.pp - 1:
        sizes.append(ModuleSize("output_head", _shard(m.vocab_size * h, tp)))
        sizes.append(ModuleSize("final_norm", h))
    return sizes


def stage_static_memory(scn: ValidatedScenario, pp_rank: Optional[int] = None) -> StaticBreakdown:
    """Static bytes of one pipeline rank from its module inventory."""
    total = sum(size.total for size in stage_module_sizes(scn, pp_rank))
    return static_breakdown(scn.hardware, total)


# -- capacity ------------------------------------------------------------------

def capacity_bytes(hw: PrecisionAndHardware) -> int:
    """floor(alpha·M_GPU), with alpha read as the decimal it was written as."""
    return math.floor(Fraction(str(hw.alpha)) * hw.gpu_memory_bytes)


@dataclass(frozen=True)
class MemoryEstimate:
    """Static and activation memory of one GPU, with the capacity verdict."""
    static_bytes: int
    params_bytes: int
    grads_bytes: int
    optimizer_bytes: int
    activation_bytes: int
    activation_terms: Tuple[ActivationTerm, ...]
    resident_multiplier: int
    feasible: bool
    headroom_bytes: int
    received_tokens: int = 0
    chunks: int = 1
    chunk_tokens: int = 0
    pp_rank: int = 0

    @property
    def total_bytes(self) -> int:
        return self.static_bytes + self.activation_bytes

    def to_record(self) -> Dict[str, Any]:
        record = asdict(self)
        record["activation_terms"] = [asdict(t) for t in self.activation_terms]
        record["total_bytes"] = self.total_bytes
        return record


def feasibility(est: MemoryEstimate, hw: PrecisionAndHardware) -> Tuple[bool, int]:
    """(static + activation <= alpha·M_GPU, alpha·M_GPU − static − activation)."""
    headroom = capacity_bytes(hw) - est.static_bytes - est.activation_bytes
    return headroom >= 0, headroom


def estimate(
    scn: ValidatedScenario,
    received_tokens: int,
    chunks: int = 1,
    static_bytes: Optional[int] = None,
) -> MemoryEstimate:
    """
    Full memory estimate for the scenario's pipeline rank.

    Args:
        scn: Validated scenario; its pp_rank selects the stage
        received_tokens: Token copies received by the MoE layer (s')
        chunks: Chunk count applied to the MoE rows
        static_bytes: Override the static total (breakdown fields are then zero)
    """
    act = activation_memory(scn, received_tokens, chunks)
    if static_bytes is None:
        static = stage_static_memory(scn)
    else:
        if static_bytes < 0:
            raise MemoryModelError("static bytes must be >= 0")
        static = StaticBreakdown(static_bytes, 0, 0)
    est = MemoryEstimate(
        static_bytes=static.total,
        params_bytes=static.params_bytes,
        grads_bytes=static.grads_bytes,
        optimizer_bytes=static.optimizer_bytes,
        activation_bytes=act.activation_bytes,
        activation_terms=act.terms,
        resident_multiplier=act.resident_multiplier,
        feasible=False,
        headroom_bytes=0,
        received_tokens=received_tokens,
        chunks=chunks,
        chunk_tokens=act.chunk_tokens,
        pp_rank=scn.parallel.pp_rank,
    )
    ok, headroom = feasibility(est, scn.hardware)
    if not ok:
        logger.debug("stage %d over capacity by %d bytes", est.pp_rank, -headroom)
    return replace(est, feasible=ok, headroom_bytes=headroom)
