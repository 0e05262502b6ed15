"""
Desk-scale MoE layer

A numerically exact MoE layer (dispatch -> gated expert MLPs -> weighted
combine) with a hand-written backward, a chunked forward/backward that
recomputes each chunk, and a byte-level activation meter.

Expert MLP: out = (act(x·W_gate) ⊙ (x·W_up))·W_down, act = SiLU by default.

Row results never depend on which other rows share the batch: projections
reduce over a non-contiguous axis (sequential adds, no BLAS), and every token
sums its top-k contributions in slot order. That makes chunked and unchunked
forward outputs and input gradients bit-identical. Weight gradients are
reduced with matmuls and match to rounding.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from .errors import MeterError, MissingActivationsError, NumericalHealthError, PartitionError
from .files import atomic_write_text

logger = logging.getLogger(__name__)


# -- activations -----------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s + x * s * (1.0 - s)


ACTIVATIONS: Dict[str, Tuple[Callable, Callable]] = {
    "silu": (_silu, _silu_grad),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(x.dtype)),
    # constant-one gate: expert reduces to (x·W_up)·W_down
    "unit": (np.ones_like, np.zeros_like),
}


def _activation(name: str) -> Tuple[Callable, Callable]:
    try:
        return ACTIVATIONS[name]
    except KeyError:
        raise ValueError(f"unknown activation {name!r}; choose from {sorted(ACTIVATIONS)}") from None


# -- data types ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TokenBatch:
    """Local tokens and their top-k routing (expert id, score) per slot."""
    data: np.ndarray
    expert_ids: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ValueError(f"token data must be [tokens x hidden], got shape {self.data.shape}")
        if self.expert_ids.ndim != 2 or self.expert_ids.shape[0] != self.data.shape[0]:
            raise ValueError(f"expert_ids must be [tokens x topk], got shape {self.expert_ids.shape}")
        if self.scores.shape != self.expert_ids.shape:
            raise ValueError(f"scores shape {self.scores.shape} != expert_ids shape {self.expert_ids.shape}")
        if self.expert_ids.size and self.expert_ids.min() < 0:
            raise ValueError("negative expert id")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("routing scores must be finite")

    @property
    def num_tokens(self) -> int:
        return self.data.shape[0]

    @property
    def topk(self) -> int:
        return self.expert_ids.shape[1]

    def slice(self, start: int, stop: int) -> "TokenBatch":
        return TokenBatch(self.data[start:stop], self.expert_ids[start:stop], self.scores[start:stop])


@dataclass(frozen=True, eq=False)
class ExpertWeights:
    """Per-expert gated MLP weights: w_gate, w_up [E x h x g], w_down [E x g x h]."""
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray

    def __post_init__(self):
        e, h, g = self.w_gate.shape
        if self.w_up.shape != (e, h, g) or self.w_down.shape != (e, g, h):
            raise ValueError(
                f"inconsistent expert shapes {self.w_gate.shape}, {self.w_up.shape}, {self.w_down.shape}"
            )
        for name in ("w_gate", "w_up", "w_down"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def num_experts(self) -> int:
        return self.w_gate.shape[0]

    @property
    def hidden(self) -> int:
        return self.w_gate.shape[1]

    @property
    def intermediate(self) -> int:
        return self.w_gate.shape[2]

    @classmethod
    def random(cls, rng: np.random.Generator, experts: int, hidden: int, intermediate: int,
               dtype=np.float64) -> "ExpertWeights":
        scale_in, scale_out = hidden ** -0.5, intermediate ** -0.5
        return cls(
            w_gate=(rng.standard_normal((experts, hidden, intermediate)) * scale_in).astype(dtype),
            w_up=(rng.standard_normal((experts, hidden, intermediate)) * scale_in).astype(dtype),
            w_down=(rng.standard_normal((experts, intermediate, hidden)) * scale_out).astype(dtype),
        )


@dataclass(frozen=True, eq=False)
class Gradients:
    x: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    scores: np.ndarray

    def weights(self) -> ExpertWeights:
        return ExpertWeights(self.w_gate, self.w_up, self.w_down)


@dataclass(frozen=True)
class ChunkPartition:
    """Contiguous, disjoint token ranges covering [0, num_tokens). Empty ranges are allowed."""
    boundaries: Tuple[Tuple[int, int], ...]

    def __post_init__(self):
        if not self.boundaries:
            raise PartitionError("a partition needs at least one chunk")
        expected = 0
        for start, stop in self.boundaries:
            if start != expected or stop < start:
                raise PartitionError(f"chunk ({start}, {stop}) breaks contiguity at token {expected}")
            expected = stop

    @classmethod
    def even(cls, num_tokens: int, chunks: int) -> "ChunkPartition":
        """Split into `chunks` ranges whose sizes differ by at most one (larger first)."""
        if chunks < 1:
            raise PartitionError(f"chunk count must be >= 1, got {chunks}")
        base, extra = divmod(num_tokens, chunks)
        bounds, start = [], 0
        for i in range(chunks):
            stop = start + base + (1 if i < extra else 0)
            bounds.append((start, stop))
            start = stop
        return cls(tuple(bounds))

    @property
    def num_chunks(self) -> int:
        return len(self.boundaries)

    @property
    def num_tokens(self) -> int:
        return self.boundaries[-1][1]

    def __iter__(self) -> Iterator[Tuple[int, int]]:
        return iter(self.boundaries)


# -- activation meter -------------------------------------------------------------

@dataclass(frozen=True)
class MeterEvent:
    tag: str
    bytes: int
    sign: int
    resident: bool = False


class ActivationMeter:
    """
    Running ledger of activation bytes.

    Resident buffers (layer input/output and their gradients) are tracked
    apart so the token-dependent peak can be read on its own.
    """

    def __init__(self, element_bytes: Optional[int] = None):
        self.element_bytes = element_bytes
        self.ledger: List[MeterEvent] = []
        self.current_bytes = 0
        self.peak_bytes = 0
        self.resident_bytes = 0
        self.peak_token_bytes = 0

    def allocate(self, tag: str, nbytes: int, resident: bool = False) -> None:
        self._record(MeterEvent(tag, nbytes, +1, resident))

    def release(self, tag: str, nbytes: int, resident: bool = False) -> None:
        self._record(MeterEvent(tag, nbytes, -1, resident))

    def _record(self, event: MeterEvent) -> None:
        delta = event.sign * event.bytes
        if self.current_bytes + delta < 0:
            raise MeterError(f"releasing {event.bytes} bytes of {event.tag!r} leaves a negative balance")
        self.ledger.append(event)
        self.current_bytes += delta
        if event.resident:
            self.resident_bytes += delta
        self.peak_bytes = max(self.peak_bytes, self.current_bytes)
        self.peak_token_bytes = max(self.peak_token_bytes, self.current_bytes - self.resident_bytes)

    def allocations(self) -> List[Tuple[str, int]]:
        return [(e.tag, e.bytes) for e in self.ledger if e.sign > 0]

    def to_records(self) -> List[Dict[str, Any]]:
        out, running = [], 0
        for e in self.ledger:
            running += e.sign * e.bytes
            out.append({"tag": e.tag, "bytes": e.bytes, "sign": e.sign,
                        "resident": e.resident, "current": running})
        return out


def _element_bytes(meter: Optional[ActivationMeter], arr: np.ndarray) -> int:
    if meter is not None and meter.element_bytes is not None:
        return meter.element_bytes
    return arr.itemsize


def _row_bytes(copies: int, hidden: int, intermediate: int, eb: int) -> List[Tuple[str, int]]:
    # stored rows of the MoE segment: expert input, gate/up pair, expert output
    return [
        ("expert_input", copies * hidden * eb),
        ("expert_intermediate", 2 * copies * intermediate * eb),
        ("expert_output", copies * hidden * eb),
    ]


def _charge_rows(meter, rows, chunk_tag: str = "") -> None:
    if meter is None:
        return
    for tag, nbytes in rows:
        meter.allocate(tag + chunk_tag, nbytes)


def _free_rows(meter, rows, chunk_tag: str = "") -> None:
    if meter is None:
        return
    for tag, nbytes in reversed(rows):
        meter.release(tag + chunk_tag, nbytes)


# -- core math -----------------------------------------------------------------

def _rowwise_matmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    """a @ w where each output row depends only on its own input row."""
    return (a[:, :, None] * w[None, :, :]).sum(axis=1)


@dataclass(eq=False)
class SavedActivations:
    """What forward keeps for backward, in dispatch (expert-sorted) order."""
    order: np.ndarray
    expert_sorted: np.ndarray
    x: np.ndarray
    z: np.ndarray
    u: np.ndarray
    out: np.ndarray
    rows: List[Tuple[str, int]] = field(default_factory=list)
    released: bool = False

    @property
    def num_copies(self) -> int:
        return self.order.shape[0]


@dataclass(eq=False)
class ForwardResult:
    output: np.ndarray
    saved: Optional[SavedActivations]


def _check_inputs(batch: TokenBatch, weights: ExpertWeights) -> None:
    if batch.data.shape[1] != weights.hidden:
        raise ValueError(f"token hidden size {batch.data.shape[1]} != expert hidden size {weights.hidden}")
    if batch.expert_ids.size and batch.expert_ids.max() >= weights.num_experts:
        raise ValueError(f"expert id {batch.expert_ids.max()} >= number of experts {weights.num_experts}")


def _segments(expert_sorted: np.ndarray, num_experts: int) -> Iterator[Tuple[int, int, int]]:
    edges = np.searchsorted(expert_sorted, np.arange(num_experts + 1))
    for e in range(num_experts):
        lo, hi = int(edges[e]), int(edges[e + 1])
        if hi > lo:
            yield e, lo, hi


def _forward_core(batch: TokenBatch, weights: ExpertWeights, act: Callable) -> Tuple[np.ndarray, SavedActivations]:
    s, k, h = batch.num_tokens, batch.topk, weights.hidden
    flat_experts = batch.expert_ids.reshape(-1)
    # dispatch: stable sort of token copies by expert
    order = np.argsort(flat_experts, kind="stable")
    expert_sorted = flat_experts[order]
    x = batch.data[order // k] if k else batch.data[:0]
    n, g = order.shape[0], weights.intermediate
    z = np.empty((n, g), dtype=batch.data.dtype)
    u = np.empty((n, g), dtype=batch.data.dtype)
    out = np.empty((n, h), dtype=batch.data.dtype)
    for e, lo, hi in _segments(expert_sorted, weights.num_experts):
        z[lo:hi] = _rowwise_matmul(x[lo:hi], weights.w_gate[e])
        u[lo:hi] = _rowwise_matmul(x[lo:hi], weights.w_up[e])
        out[lo:hi] = _rowwise_matmul(act(z[lo:hi]) * u[lo:hi], weights.w_down[e])
    y = _combine(out, order, batch.scores, s, k, h)
    return y, SavedActivations(order, expert_sorted, x, z, u, out)


def _combine(out: np.ndarray, order: np.ndarray, scores: np.ndarray, s: int, k: int, h: int) -> np.ndarray:
    """Inverse permutation, then score-weighted sum over slots in slot order."""
    by_copy = np.empty((s * k, h), dtype=out.dtype)
    by_copy[order] = out
    by_copy = by_copy.reshape(s, k, h)
    y = np.zeros((s, h), dtype=out.dtype)
    for j in range(k):
        y += scores[:, j, None] * by_copy[:, j]
    return y


def _check_health(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalHealthError(f"non-finite values in {what}")


def _backward_core(
    output_grad: np.ndarray,
    batch: TokenBatch,
    weights: ExpertWeights,
    saved: SavedActivations,
    act: Callable,
    act_grad: Callable,
    grads: Gradients,
    token_offset: int = 0,
) -> None:
    """Accumulate gradients of one (sub)batch into grads."""
    s, k, h = batch.num_tokens, batch.topk, weights.hidden
    order = saved.order
    out_by_copy = np.empty((s * k, h), dtype=saved.out.dtype)
    out_by_copy[order] = saved.out
    out_by_copy = out_by_copy.reshape(s, k, h)

    rows = slice(token_offset, token_offset + s)
    grads.scores[rows] = (output_grad[:, None, :] * out_by_copy).sum(axis=2)
    d_out = (batch.scores[:, :, None] * output_grad[:, None, :]).reshape(s * k, h)[order]

    dx = np.empty_like(saved.x)
    for e, lo, hi in _segments(saved.expert_sorted, weights.num_experts):
        x, z, u = saved.x[lo:hi], saved.z[lo:hi], saved.u[lo:hi]
        gate = act(z)
        da = _rowwise_matmul(d_out[lo:hi], weights.w_down[e].T)
        grads.w_down[e] += (gate * u).T @ d_out[lo:hi]
        dz = da * u * act_grad(z)
        du = da * gate
        grads.w_gate[e] += x.T @ dz
        grads.w_up[e] += x.T @ du
        dx[lo:hi] = _rowwise_matmul(dz, weights.w_gate[e].T) + _rowwise_matmul(du, weights.w_up[e].T)

    dx_by_copy = np.empty_like(dx)
    dx_by_copy[order] = dx
    dx_by_copy = dx_by_copy.reshape(s, k, h)
    x_grad = np.zeros((s, h), dtype=dx.dtype)
    for j in range(k):
        x_grad += dx_by_copy[:, j]
    grads.x[rows] = x_grad


def _zero_grads(batch: TokenBatch, weights: ExpertWeights) -> Gradients:
    return Gradients(
        x=np.zeros_like(batch.data),
        w_gate=np.zeros_like(weights.w_gate),
        w_up=np.zeros_like(weights.w_up),
        w_down=np.zeros_like(weights.w_down),
        scores=np.zeros_like(batch.scores),
    )


# -- public operations -------------------------------------------------------------

def forward(
    batch: TokenBatch,
    weights: ExpertWeights,
    meter: Optional[ActivationMeter] = None,
    activation: str = "silu",
    save: bool = True,
) -> ForwardResult:
    """
    Y[i] = Σ_slots score · expert(X[i]).

    With save=True the expert activations stay charged on the meter and are
    returned for backward; otherwise they are released before returning.
    """
    _check_inputs(batch, weights)
    act, _ = _activation(activation)
    eb = _element_bytes(meter, batch.data)
    resident = batch.num_tokens * weights.hidden * eb
    if meter is not None:
        meter.allocate("input", resident, resident=True)
        meter.allocate("output", resident, resident=True)

    rows = _row_bytes(batch.num_tokens * batch.topk, weights.hidden, weights.intermediate, eb)
    _charge_rows(meter, rows)
    y, saved = _forward_core(batch, weights, act)
    _check_health(y, "MoE forward output")
    if not save:
        _free_rows(meter, rows)
        return ForwardResult(y, None)
    saved.rows = rows
    return ForwardResult(y, saved)


def backward(
    output_grad: np.ndarray,
    batch: TokenBatch,
    weights: ExpertWeights,
    saved: Optional[SavedActivations],
    meter: Optional[ActivationMeter] = None,
    activation: str = "silu",
) -> Gradients:
    """
    Exact reverse-mode gradients of forward().

    Pass the meter that forward() charged; the saved activations are released
    from it at the end.
    """
    if saved is None or saved.released:
        raise MissingActivationsError("backward needs the activations saved by forward(save=True)")
    _check_inputs(batch, weights)
    if output_grad.shape != batch.data.shape:
        raise ValueError(f"output_grad shape {output_grad.shape} != token shape {batch.data.shape}")
    if saved.num_copies != batch.num_tokens * batch.topk:
        raise MissingActivationsError("saved activations belong to a different batch")
    act, act_grad = _activation(activation)
    eb = _element_bytes(meter, batch.data)
    resident = batch.num_tokens * weights.hidden * eb
    if meter is not None:
        meter.allocate("output_grad", resident, resident=True)
        meter.allocate("input_grad", resident, resident=True)

    grads = _zero_grads(batch, weights)
    _backward_core(output_grad, batch, weights, saved, act, act_grad, grads)
    _free_rows(meter, saved.rows)
    saved.released = True
    _check_health(grads.x, "MoE input gradient")
    return grads


def forward_chunked(
    batch: TokenBatch,
    weights: ExpertWeights,
    partition: ChunkPartition,
    meter: Optional[ActivationMeter] = None,
    activation: str = "silu",
) -> np.ndarray:
    """
    concat(F(X_1), ..., F(X_c)), each chunk dispatched, computed and combined
    on its own. Chunk activations are released as soon as the chunk is done.
    """
    _check_inputs(batch, weights)
    if partition.num_tokens != batch.num_tokens:
        raise PartitionError(f"partition covers {partition.num_tokens} tokens, batch has {batch.num_tokens}")
    logger.debug("chunked forward: %d tokens in %d chunks", batch.num_tokens, partition.num_chunks)
    act, _ = _activation(activation)
    eb = _element_bytes(meter, batch.data)
    resident = batch.num_tokens * weights.hidden * eb
    if meter is not None:
        meter.allocate("input", resident, resident=True)
        meter.allocate("output", resident, resident=True)

    y = np.empty_like(batch.data)
    for i, (start, stop) in enumerate(partition):
        chunk = batch.slice(start, stop)
        rows = _row_bytes(chunk.num_tokens * chunk.topk, weights.hidden, weights.intermediate, eb)
        tag = f"[{i}]" if partition.num_chunks > 1 else ""
        _charge_rows(meter, rows, tag)
        y[start:stop], _ = _forward_core(chunk, weights, act)
        _free_rows(meter, rows, tag)
    _check_health(y, "chunked MoE forward output")
    return y


def backward_chunked(
    output_grad: np.ndarray,
    batch: TokenBatch,
    weights: ExpertWeights,
    partition: ChunkPartition,
    meter: Optional[ActivationMeter] = None,
    activation: str = "silu",
) -> Gradients:
    """
    Chunk-level recompute then backward: for each chunk in order, recompute its
    forward, backprop the matching slice of output_grad, free the chunk.
    Input gradients are concatenated, weight gradients summed over chunks.
    """
    _check_inputs(batch, weights)
    if partition.num_tokens != output_grad.shape[0] or partition.num_tokens != batch.num_tokens:
        raise PartitionError(
            f"partition covers {partition.num_tokens} tokens, output_grad has {output_grad.shape[0]}"
        )
    if output_grad.shape != batch.data.shape:
        raise ValueError(f"output_grad shape {output_grad.shape} != token shape {batch.data.shape}")
    logger.debug("chunked backward: %d tokens in %d chunks", batch.num_tokens, partition.num_chunks)
    act, act_grad = _activation(activation)
    eb = _element_bytes(meter, batch.data)
    resident = batch.num_tokens * weights.hidden * eb
    if meter is not None:
        meter.allocate("output_grad", resident, resident=True)
        meter.allocate("input_grad", resident, resident=True)

    grads = _zero_grads(batch, weights)
    for i, (start, stop) in enumerate(partition):
        chunk = batch.slice(start, stop)
        rows = _row_bytes(chunk.num_tokens * chunk.topk, weights.hidden, weights.intermediate, eb)
        tag = f"[{i}]" if partition.num_chunks > 1 else ""
        _charge_rows(meter, rows, tag)
        _, saved = _forward_core(chunk, weights, act)
        _backward_core(output_grad[start:stop], chunk, weights, saved, act, act_grad, grads, token_offset=start)
        _free_rows(meter, rows, tag)
    _check_health(grads.x, "chunked MoE input gradient")
    return grads


# -- instances and fixtures ---------------------------------------------------------

def random_instance(
    rng: np.random.Generator,
    tokens: int,
    hidden: int,
    intermediate: int,
    experts: int,
    topk: int,
    dtype=np.float64,
) -> Tuple[TokenBatch, ExpertWeights]:
    """Random tokens, distinct top-k experts per token and positive scores."""
    if topk > experts:
        raise ValueError(f"topk {topk} > experts {experts}")
    data = rng.standard_normal((tokens, hidden)).astype(dtype)
    ids = np.stack([rng.choice(experts, size=topk, replace=False) for _ in range(tokens)]) \
        if tokens else np.zeros((0, topk), dtype=np.int64)
    raw = rng.random((tokens, topk)) + 0.1
    scores = (raw / raw.sum(axis=1, keepdims=True)).astype(dtype)
    return TokenBatch(data, ids.astype(np.int64), scores), ExpertWeights.random(rng, experts, hidden, intermediate, dtype)


FIXTURE_FORMAT = "chunkwise-fixture"


def save_fixture(path: Union[str, Path], batch: TokenBatch, weights: ExpertWeights,
                 activation: str = "silu") -> Path:
    doc = {
        "format": FIXTURE_FORMAT,
        "version": 1,
        "activation": activation,
        "data": batch.data.tolist(),
        "expert_ids": batch.expert_ids.tolist(),
        "scores": batch.scores.tolist(),
        "w_gate": weights.w_gate.tolist(),
        "w_up": weights.w_up.tolist(),
        "w_down": weights.w_down.tolist(),
    }
    return atomic_write_text(path, json.dumps(doc, indent=1) + "\n")


def load_fixture(path: Union[str, Path]) -> Tuple[TokenBatch, ExpertWeights, str]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != FIXTURE_FORMAT:
        raise ValueError(f"{path}: not a {FIXTURE_FORMAT} file")
    batch = TokenBatch(
        np.asarray(doc["data"], dtype=np.float64).reshape(len(doc["data"]), -1),
        np.asarray(doc["expert_ids"], dtype=np.int64).reshape(len(doc["expert_ids"]), -1),
        np.asarray(doc["scores"], dtype=np.float64).reshape(len(doc["scores"]), -1),
    )
    weights = ExpertWeights(*(np.asarray(doc[k], dtype=np.float64) for k in ("w_gate", "w_up", "w_down")))
    return batch, weights, doc.get("activation", "silu")
