"""Coordinator, stages and the memory comparison report."""
import numpy as np
import pytest

from conftest import TOY_STATIC
from src.core.memory_model import absolute_token_bound
from src.core.report import compare_methods, dump_memory_report
from src.core.routing_sim import generate_trace
from src.core.verification import KernelSize
from src.pipeline import (
    ChunkwiseWorkforce,
    Coordinator,
    EstimateStage,
    ExitCode,
    PlanStage,
    SimulateStage,
    StageRole,
    VerifyStage,
)


@pytest.fixture
def workforce():
    wf = ChunkwiseWorkforce()
    wf.initialize()
    return wf


# -- memory report ---------------------------------------------------------------

def test_reference_feasibility_pattern(model_i):
    report = compare_methods(model_i)
    assert report.received_tokens == absolute_token_bound(model_i)
    assert [r.feasible for r in report.rows] == [False, True, True]
    tuned = report.row("tuned")
    assert tuned.c_theoretical == 4
    assert tuned.chunks == 4
    assert report.row("fixed_bin").chunks == 8
    no_chunk = report.row("no_chunk").estimate
    assert 43.0 / 2 <= no_chunk.static_bytes / 1e9 <= 43.0 * 2


def test_no_recompute_scenario_is_compared_under_full_recompute(model_i):
    a = compare_methods(model_i.with_recompute("none"))
    b = compare_methods(model_i)
    assert a.to_records() == b.to_records()


def test_report_table_and_records(toy):
    report = compare_methods(toy, received_tokens=16, static_bytes=TOY_STATIC)
    table = report.format_table()
    assert "no_chunk" in table and "tuned" in table
    assert table.splitlines()[0].startswith("scenario toy  stage 0  s'=16")
    records = report.to_records()
    assert records[0]["activation_bytes"] == 1280
    assert records[0]["headroom_bytes"] == 6720
    assert records[2]["c_theoretical"] == 1
    text = dump_memory_report(report)
    assert text.startswith("# chunkwise-memory v1 ")
    assert len(text.splitlines()) == 5


def test_tuned_row_without_token_budget(toy):
    report = compare_methods(toy, received_tokens=16, static_bytes=9488)
    tuned = report.row("tuned")
    assert tuned.c_theoretical == 0
    assert tuned.chunks == 8
    assert [r.feasible for r in report.rows] == [False, False, False]
    assert report.to_records()[2]["c_selected"] == 8


def test_unknown_method_rejected(toy):
    with pytest.raises(ValueError):
        compare_methods(toy, methods=("magic",))


# -- coordinator ---------------------------------------------------------------

def test_stages_registered_by_role(workforce):
    coordinator = workforce.coordinator
    assert isinstance(coordinator.get_stage(StageRole.ESTIMATE), EstimateStage)
    assert isinstance(coordinator.get_stage(StageRole.SIMULATE), SimulateStage)
    assert isinstance(coordinator.get_stage(StageRole.PLAN), PlanStage)
    assert isinstance(coordinator.get_stage(StageRole.VERIFY), VerifyStage)
    assert "role=plan" in repr(coordinator.get_stage(StageRole.PLAN))


def test_stages_keep_no_state_between_runs(workforce, toy):
    stage = workforce.coordinator.get_stage(StageRole.ESTIMATE)
    before = dict(vars(stage))
    workforce.estimate(scenario=toy, received_tokens=16, static_bytes=TOY_STATIC)
    assert vars(stage) == before


def test_unknown_action(workforce):
    result = workforce.run("train")
    assert not result.success
    assert result.exit_code == ExitCode.CONFIG


def test_unregistered_stage():
    result = Coordinator().execute({"action": "plan"})
    assert result.exit_code == ExitCode.CONFIG
    assert "not registered" in result.error


# -- estimate --------------------------------------------------------------------

def test_estimate_all_methods_is_ok_when_one_fits(workforce, model_i):
    result = workforce.estimate(scenario=model_i)
    assert result.success
    assert result.exit_code == ExitCode.OK
    assert result.metadata["infeasible_methods"] == ["no_chunk"]


def test_estimate_single_infeasible_method(workforce, model_i):
    result = workforce.estimate(scenario=model_i, method="no_chunk")
    assert result.exit_code == ExitCode.INFEASIBLE
    assert [r.method for r in result.data.rows] == ["no_chunk"]


def test_estimate_unknown_method(workforce, toy):
    assert workforce.estimate(scenario=toy, method="magic").exit_code == ExitCode.CONFIG


def test_estimate_from_trace_peak(workforce, toy):
    trace = generate_trace(toy, "hot_expert", {"rho": 1.0}, iterations=2)
    result = workforce.estimate(scenario=toy, trace=trace, static_bytes=TOY_STATIC)
    assert result.data.received_tokens == 32


def test_estimate_static_infeasible(workforce, toy):
    result = workforce.estimate(scenario=toy, method="tuned", static_bytes=20000)
    assert not result.success
    assert result.exit_code == ExitCode.INFEASIBLE


def test_estimate_without_token_budget_is_infeasible(workforce, toy):
    result = workforce.estimate(scenario=toy, received_tokens=16, static_bytes=9488)
    assert result.success
    assert result.exit_code == ExitCode.INFEASIBLE
    assert result.metadata["infeasible_methods"] == ["no_chunk", "fixed_bin", "tuned"]


def test_estimate_bad_token_count(workforce, toy):
    result = workforce.estimate(scenario=toy, received_tokens=10_000)
    assert result.exit_code == ExitCode.CONFIG


def test_estimate_other_stage(workforce, model_i):
    result = workforce.estimate(scenario=model_i, stage=3)
    assert result.data.pp_rank == 3
    assert workforce.estimate(scenario=model_i, stage=9).exit_code == ExitCode.CONFIG


# -- plan and simulate ----------------------------------------------------------

def test_plan_stage_writes_file(workforce, toy, tmp_path):
    result = workforce.plan(scenario=toy, dist="dirichlet", dist_params={"alpha": 0.5}, seed=2,
                            iterations=4, static_bytes=TOY_STATIC, output=tmp_path / "plan.csv")
    assert result.exit_code == ExitCode.OK
    assert result.data.iterations == 4
    assert (tmp_path / "plan.csv").exists()
    assert result.metadata["outputs"]["plan"].endswith("plan.csv")


def test_plan_stage_flags_cells_over_budget(workforce, toy):
    result = workforce.plan(scenario=toy, dist="hot_expert", dist_params={"rho": 1.0},
                            iterations=2, static_bytes=9344)
    assert result.success
    assert result.exit_code == ExitCode.INFEASIBLE
    assert result.metadata["clamped_cells"] > 0


def test_plan_stage_reads_trace_file(workforce, toy, tmp_path):
    first = workforce.simulate(scenario=toy, seed=5, iterations=3, static_bytes=TOY_STATIC, out_dir=tmp_path)
    result = workforce.plan(scenario=toy, trace_path=tmp_path / "trace.csv", static_bytes=TOY_STATIC)
    assert result.data.cells == first.data["plans"]["tuned"].cells


def test_plan_stage_bad_generator(workforce, toy):
    result = workforce.plan(scenario=toy, dist="dirichlet", dist_params={"alpha": -1})
    assert result.exit_code == ExitCode.CONFIG


def test_simulate_stage(workforce, toy, tmp_path):
    result = workforce.simulate(scenario=toy, dist="depth_skew", seed=1, iterations=5,
                                static_bytes=TOY_STATIC, out_dir=tmp_path / "run")
    assert result.exit_code == ExitCode.OK
    assert set(result.metadata["outputs"]) == {"trace", "plan", "throughput"}
    assert set(result.data["plans"]) == {"no_chunk", "fixed_bin", "tuned"}
    assert result.data["trace"].iterations == 5
    for name in ("trace.csv", "plan.csv", "throughput.csv"):
        assert (tmp_path / "run" / name).exists()


def test_simulate_is_deterministic(workforce, toy):
    a = workforce.simulate(scenario=toy, dist="dirichlet", seed=8, iterations=4, static_bytes=TOY_STATIC)
    b = workforce.simulate(scenario=toy, dist="dirichlet", seed=8, iterations=4, static_bytes=TOY_STATIC)
    assert np.array_equal(a.data["trace"].per_gpu_tokens, b.data["trace"].per_gpu_tokens)
    assert a.data["throughput"].to_records() == b.data["throughput"].to_records()


def test_report_action_chains_estimate_and_simulate(workforce, toy):
    result = workforce.run("report", scenario=toy, iterations=2, static_bytes=TOY_STATIC)
    assert result.success
    assert set(result.data) == {"estimate", "simulate"}
    assert result.exit_code == ExitCode.OK


# -- verify ----------------------------------------------------------------------

SMALL = KernelSize(tokens=8, hidden=3, intermediate=4, experts=3, topk=2, max_chunks=3)


def test_verify_passes(workforce):
    result = workforce.verify(size=SMALL, seeds=2)
    assert result.success
    assert result.exit_code == ExitCode.OK


def test_verify_fault_reports_failing_seeds(workforce):
    result = workforce.verify(size=SMALL, seeds=2, first_seed=4, inject_fault=True)
    assert not result.success
    assert result.exit_code == ExitCode.PROPERTY_FAILURE
    assert result.metadata["failing_seeds"] == [4, 5]
    assert "seed 4" in result.error
