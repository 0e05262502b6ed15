"""
Kernel verification suite

Seeded property checks of the MoE kernel: chunked forward equals the
unchunked forward bit for bit, chunked backward matches the unchunked
backward, backward matches central finite differences, and chunking divides
the token-dependent activation peak.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, PositiveInt, model_validator

from .moe_kernel import (
    ActivationMeter,
    ChunkPartition,
    ExpertWeights,
    TokenBatch,
    backward,
    backward_chunked,
    forward,
    forward_chunked,
    random_instance,
)

logger = logging.getLogger(__name__)

GRAD_TOLERANCE = 1e-12
# chunked vs unchunked gradients in single precision
FLOAT32_TOLERANCE = 1e-5
FD_STEP = 1e-5
FD_TOLERANCE = 1e-6
FD_FLOOR = 1e-2
FD_SAMPLES = 6


class KernelSize(BaseModel):
    """Upper bounds for the random instances of the suite."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    tokens: PositiveInt = 64
    hidden: PositiveInt = 16
    intermediate: PositiveInt = 32
    experts: PositiveInt = 8
    topk: PositiveInt = 4
    max_chunks: PositiveInt = 8

    @model_validator(mode="after")
    def _topk_fits(self) -> "KernelSize":
        if self.topk > self.experts:
            raise ValueError(f"topk {self.topk} > experts {self.experts}")
        return self

    @classmethod
    def parse(cls, text: str) -> "KernelSize":
        """'TOKENSxHIDDENxINTERMEDIATExEXPERTSxTOPK', e.g. '64x16x32x8x4'."""
        parts = text.lower().split("x")
        if len(parts) != 5:
            raise ValueError(f"size must look like 64x16x32x8x4, got {text!r}")
        names = ("tokens", "hidden", "intermediate", "experts", "topk")
        return cls(**dict(zip(names, (int(p) for p in parts))))


@dataclass(frozen=True)
class CheckResult:
    check: str
    seed: int
    passed: bool
    detail: str = ""


@dataclass
class VerificationReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]

    def summary(self) -> Dict[str, Tuple[int, int]]:
        """check name -> (passed, total)"""
        out: Dict[str, Tuple[int, int]] = {}
        for r in self.results:
            ok, total = out.get(r.check, (0, 0))
            out[r.check] = (ok + r.passed, total + 1)
        return out

    def to_records(self) -> List[Dict[str, Any]]:
        return [asdict(r) for r in self.results]


def draw_instance(seed: int, size: KernelSize, dtype=np.float64) -> Tuple[TokenBatch, ExpertWeights]:
    """Random instance with every dimension drawn up to the size bounds."""
    rng = np.random.default_rng(seed)
    experts = int(rng.integers(1, size.experts + 1))
    return random_instance(
        rng,
        tokens=int(rng.integers(1, size.tokens + 1)),
        hidden=int(rng.integers(1, size.hidden + 1)),
        intermediate=int(rng.integers(1, size.intermediate + 1)),
        experts=experts,
        topk=int(rng.integers(1, min(size.topk, experts) + 1)),
        dtype=dtype,
    )


def max_relative_error(actual: np.ndarray, expected: np.ndarray) -> float:
    """max |actual − expected| scaled by the largest magnitude of expected."""
    diff = float(np.max(np.abs(actual - expected))) if expected.size else 0.0
    scale = float(np.max(np.abs(expected))) if expected.size else 0.0
    if scale == 0.0:
        return diff
    return diff / scale


def check_forward_equivalence(seed: int, size: KernelSize, inject_fault: bool = False,
                               dtype=np.float64) -> CheckResult:
    batch, weights = draw_instance(seed, size, dtype)
    reference = forward(batch, weights, save=False).output
    for c in range(1, size.max_chunks + 1):
        chunked = forward_chunked(batch, weights, ChunkPartition.even(batch.num_tokens, c))
        if inject_fault:
            chunked[0, 0] += 1.0
        if not np.array_equal(chunked, reference):
            return CheckResult("forward_equivalence", seed, False, f"mismatch at c={c}")
    return CheckResult("forward_equivalence", seed, True)


def check_backward_equivalence(seed: int, size: KernelSize, dtype=np.float64) -> CheckResult:
    """
    Chunked backward against the unchunked one. In double precision input
    gradients must be identical and the rest within GRAD_TOLERANCE; in single
    precision every gradient is held to FLOAT32_TOLERANCE.
    """
    batch, weights = draw_instance(seed, size, dtype)
    rng = np.random.default_rng([seed, 1])
    y_grad = rng.standard_normal(batch.data.shape).astype(dtype)
    single = np.dtype(dtype) == np.float32
    tolerance = FLOAT32_TOLERANCE if single else GRAD_TOLERANCE
    names = ("w_gate", "w_up", "w_down", "scores") + (("x",) if single else ())
    saved = forward(batch, weights).saved
    reference = backward(y_grad, batch, weights, saved)
    worst = 0.0
    for c in range(1, size.max_chunks + 1):
        grads = backward_chunked(y_grad, batch, weights, ChunkPartition.even(batch.num_tokens, c))
        if not single and not np.array_equal(grads.x, reference.x):
            return CheckResult("backward_equivalence", seed, False, f"input gradient differs at c={c}")
        for name in names:
            err = max_relative_error(getattr(grads, name), getattr(reference, name))
            worst = max(worst, err)
            if err > tolerance:
                return CheckResult("backward_equivalence", seed, False, f"{name} rel. error {err:.3g} at c={c}")
    return CheckResult("backward_equivalence", seed, True, f"max rel. error {worst:.3g}")


def _loss_delta(batch: TokenBatch, weights: ExpertWeights, y_grad: np.ndarray,
                perturb: Callable[[TokenBatch, ExpertWeights, float], Tuple[TokenBatch, ExpertWeights]]) -> float:
    plus = forward(*perturb(batch, weights, FD_STEP), save=False).output
    minus = forward(*perturb(batch, weights, -FD_STEP), save=False).output
    # difference first: untouched rows cancel exactly
    return float(np.sum((plus - minus) * y_grad) / (2 * FD_STEP))


def _bump_tokens(index):
    def perturb(batch, weights, step):
        data = batch.data.copy()
        data[index] += step
        return TokenBatch(data, batch.expert_ids, batch.scores), weights
    return perturb


def _bump_scores(index):
    def perturb(batch, weights, step):
        scores = batch.scores.copy()
        scores[index] += step
        return TokenBatch(batch.data, batch.expert_ids, scores), weights
    return perturb


def _bump_weight(name, index):
    def perturb(batch, weights, step):
        arrays = {k: getattr(weights, k) for k in ("w_gate", "w_up", "w_down")}
        arrays[name] = arrays[name].copy()
        arrays[name][index] += step
        return batch, ExpertWeights(**arrays)
    return perturb


def finite_difference_error(numeric: float, analytic: float) -> float:
    """
    |numeric − analytic| / max(|numeric|, |analytic|, FD_FLOOR).

    Relative for gradients of magnitude FD_FLOOR and above. Below the floor it
    is an absolute test: FD_TOLERANCE then bounds the difference at
    FD_TOLERANCE·FD_FLOOR = 1e-8, near the rounding error of a central
    difference at FD_STEP.
    """
    return abs(numeric - analytic) / max(abs(numeric), abs(analytic), FD_FLOOR)


def check_gradients(seed: int, size: KernelSize) -> CheckResult:
    """Analytic backward against central differences of sum(Y ⊙ G) on sampled coordinates."""
    batch, weights = draw_instance(seed, size)
    rng = np.random.default_rng([seed, 2])
    y_grad = rng.standard_normal(batch.data.shape)
    grads = backward(y_grad, batch, weights, forward(batch, weights).saved)

    samples = []
    targets = [("x", batch.data, _bump_tokens), ("scores", batch.scores, _bump_scores)]
    targets += [(name, getattr(weights, name), lambda idx, n=name: _bump_weight(n, idx))
                for name in ("w_gate", "w_up", "w_down")]
    for name, array, bump in targets:
        for flat in rng.choice(array.size, size=min(FD_SAMPLES, array.size), replace=False):
            index = np.unravel_index(int(flat), array.shape)
            samples.append((name, index, bump(index)))

    worst = 0.0
    for name, index, perturb in samples:
        numeric = _loss_delta(batch, weights, y_grad, perturb)
        analytic = float(getattr(grads, name)[index])
        err = finite_difference_error(numeric, analytic)
        worst = max(worst, err)
        if err > FD_TOLERANCE:
            return CheckResult("gradient_check", seed, False,
                               f"{name}{tuple(int(i) for i in index)}: analytic {analytic:.9g}, numeric {numeric:.9g}")
    return CheckResult("gradient_check", seed, True, f"max rel. error {worst:.3g}")


def uniform_instance(tokens: int, hidden: int, intermediate: int, experts: int, topk: int,
                     seed: int = 0) -> Tuple[TokenBatch, ExpertWeights]:
    """Balanced routing: token i goes to experts i, i+1, ..., i+topk−1 (mod experts)."""
    rng = np.random.default_rng(seed)
    ids = (np.arange(tokens)[:, None] + np.arange(topk)[None, :]) % experts
    scores = np.full((tokens, topk), 1.0 / topk)
    batch = TokenBatch(rng.standard_normal((tokens, hidden)), ids.astype(np.int64), scores)
    return batch, ExpertWeights.random(rng, experts, hidden, intermediate)


def token_peaks(batch: TokenBatch, weights: ExpertWeights, chunks: int) -> Tuple[int, int]:
    """Token-dependent meter peaks (unchunked, chunked) over a forward + backward pass."""
    full = ActivationMeter()
    saved = forward(batch, weights, full).saved
    backward(np.ones_like(batch.data), batch, weights, saved, full)

    chunked = ActivationMeter()
    partition = ChunkPartition.even(batch.num_tokens, chunks)
    forward_chunked(batch, weights, partition, chunked)
    backward_chunked(np.ones_like(batch.data), batch, weights, partition, chunked)
    return full.peak_token_bytes, chunked.peak_token_bytes


def check_peak_reduction(seed: int, size: KernelSize) -> CheckResult:
    """Chunked token peak = unchunked/c up to one chunk-remainder quantum, for every c."""
    batch, weights = uniform_instance(size.tokens, size.hidden, size.intermediate,
                                      size.experts, size.topk, seed)
    quantum = size.topk * (2 * size.hidden + 2 * size.intermediate) * batch.data.itemsize
    previous = None
    for c in range(1, min(size.max_chunks, size.tokens) + 1):
        full, chunked = token_peaks(batch, weights, c)
        if abs(chunked - full / c) > quantum:
            return CheckResult("peak_reduction", seed, False, f"c={c}: peak {chunked}, expected ~{full / c:.0f}")
        if previous is not None and chunked > previous:
            return CheckResult("peak_reduction", seed, False, f"peak grew from {previous} to {chunked} at c={c}")
        previous = chunked
    return CheckResult("peak_reduction", seed, True)


def run_suite(size: KernelSize, seeds: int, inject_fault: bool = False, first_seed: int = 0) -> VerificationReport:
    """Every check for seeds first_seed .. first_seed+seeds−1."""
    report = VerificationReport()
    for seed in range(first_seed, first_seed + seeds):
        report.results.append(check_forward_equivalence(seed, size, inject_fault))
        report.results.append(check_backward_equivalence(seed, size))
        report.results.append(check_gradients(seed, size))
        report.results.append(check_peak_reduction(seed, size))
    for failure in report.failures:
        logger.warning("%s failed for seed %d: %s", failure.check, failure.seed, failure.detail)
    return report
