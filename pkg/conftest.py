"""Shared fixtures for the chunkwise tests."""
from pathlib import Path

import numpy as np
import pytest

from src.core.config import RecomputeMode, reference_scenario, validate

REPO_ROOT = Path(__file__).parent
SCENARIO_DIR = REPO_ROOT / "scenarios"

TOY_MODEL = dict(
    num_layers=4, seq_len=8, hidden_size=4, num_heads=2, head_dim=2, num_kv_heads=1,
    dense_intermediate=8, expert_intermediate=8, router_dim=4, topk=2, vocab_size=16,
    dense_layers=1, num_experts=4,
)
TOY_PARALLEL = dict(tp=1, pp=1, cp=1, ep=2, dp=1, layers_per_stage=4, virtual_stages=1,
                    micro_batch=1, global_batch=8, pp_rank=0, recompute_mode="full")
TOY_HARDWARE = dict(act_bytes=2, param_bytes=2, grad_bytes=2, optim_bytes=4,
                    gpu_memory_bytes=10000, alpha=1.0)
# static memory the hand-worked toy examples assume
TOY_STATIC = 2000


def make_scenario(model=None, parallel=None, hardware=None, name="test"):
    return validate({**TOY_MODEL, **(model or {})}, {**TOY_PARALLEL, **(parallel or {})},
                    {**TOY_HARDWARE, **(hardware or {})}, name=name)


@pytest.fixture
def toy():
    return make_scenario(name="toy")


@pytest.fixture(scope="session")
def model_i():
    return reference_scenario("I", pp_rank=0, recompute_mode=RecomputeMode.FULL)


@pytest.fixture
def skew_scenario():
    """Eight EP ranks with four experts each, enough layers to see depth effects."""
    return make_scenario(
        model=dict(num_layers=12, seq_len=64, num_experts=32, topk=2, dense_layers=3),
        parallel=dict(ep=8, layers_per_stage=12),
        hardware=dict(gpu_memory_bytes=10 ** 9),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
