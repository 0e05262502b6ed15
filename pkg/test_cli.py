"""Command line: subcommands, exit codes, output files and manifests."""
import json

import pytest

from conftest import SCENARIO_DIR
from src.main import RunManifest, build_parser, main

TOY = str(SCENARIO_DIR / "toy.yaml")
MODEL_I = str(SCENARIO_DIR / "model_i.yaml")
RUN_FILES = ("trace.csv", "plan.csv", "throughput.csv")


def _json_out(capsys):
    return json.loads(capsys.readouterr().out)


# -- estimate ---------------------------------------------------------------------

def test_estimate_reference_pattern(tmp_path, capsys):
    code = main(["estimate", "--scenario", MODEL_I, "--format", "json",
                 "--manifest", str(tmp_path / "m.json")])
    records = _json_out(capsys)
    assert code == 0
    assert [r["method"] for r in records] == ["no_chunk", "fixed_bin", "tuned"]
    assert [r["feasible"] for r in records] == [False, True, True]
    assert records[2]["c_selected"] == 4


def test_estimate_infeasible_method_exits_2(tmp_path, capsys):
    code = main(["estimate", "--scenario", MODEL_I, "--method", "no_chunk",
                 "--manifest", str(tmp_path / "m.json")])
    assert code == 2
    assert "no_chunk" in capsys.readouterr().out
    manifest = RunManifest.model_validate_json((tmp_path / "m.json").read_text())
    assert manifest.exit_code == 2
    assert manifest.subcommand == "estimate"


def test_estimate_zero_tokens_is_attention_only(tmp_path, capsys):
    code = main(["estimate", "--scenario", TOY, "--s-prime", "0", "--format", "json",
                 "--manifest", str(tmp_path / "m.json")])
    records = _json_out(capsys)
    assert code == 0
    assert {r["activation_bytes"] for r in records} == {512}


def test_estimate_without_token_budget_exits_2(tmp_path, capsys):
    # 40000 B capacity minus 39488 B static leaves exactly the attention rows
    code = main(["estimate", "--scenario", TOY, "--static-bytes", "39488", "--s-prime", "16",
                 "--format", "json", "--manifest", str(tmp_path / "m.json")])
    records = _json_out(capsys)
    assert code == 2
    assert [r["feasible"] for r in records] == [False, False, False]
    assert records[2]["c_theoretical"] == 0
    assert records[2]["c_selected"] == 8


def test_estimate_writes_report_file(tmp_path, capsys):
    out = tmp_path / "memory.csv"
    code = main(["estimate", "--scenario", TOY, "--s-prime", "16", "--format", "csv", "--output", str(out)])
    capsys.readouterr()
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# chunkwise-memory v1 ")
    assert len(lines) == 5
    # manifest lands next to the first output when --manifest is absent
    assert (tmp_path / "memory.csv.manifest.json").exists()


def test_estimate_from_trace_file(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["simulate", "--scenario", TOY, "--dist", "hot_expert", "--param", "rho=1",
                 "--iters", "2", "--out-dir", str(run)]) == 0
    capsys.readouterr()
    code = main(["estimate", "--scenario", TOY, "--trace", str(run / "trace.csv"), "--format", "json",
                 "--manifest", str(tmp_path / "m.json")])
    records = _json_out(capsys)
    assert code == 0
    assert records[0]["received_tokens"] == 32


# -- simulate ------------------------------------------------------------------------

def test_simulate_is_byte_identical_per_seed(tmp_path, capsys):
    for name in ("a", "b"):
        code = main(["simulate", "--scenario", TOY, "--dist", "dirichlet", "--param", "alpha=0.4",
                     "--seed", "7", "--iters", "6", "--out-dir", str(tmp_path / name)])
        assert code == 0
    capsys.readouterr()
    for name in RUN_FILES:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["seed"] == 7
    assert manifest["bins"] == [1, 2, 4, 8]
    assert set(manifest["outputs"]) == {"trace", "plan", "throughput"}


def test_simulate_zero_iterations_writes_headers_only(tmp_path, capsys):
    code = main(["simulate", "--scenario", TOY, "--iters", "0", "--out-dir", str(tmp_path)])
    capsys.readouterr()
    assert code == 0
    assert len((tmp_path / "trace.csv").read_text().splitlines()) == 2
    assert len((tmp_path / "plan.csv").read_text().splitlines()) == 2


@pytest.mark.parametrize("dist, param", [("dirichlet", "alpha=-1"), ("hot_expert", "rho=2"), ("uniform", "rho=0.5")])
def test_simulate_invalid_parameters_exit_1(tmp_path, capsys, dist, param):
    code = main(["simulate", "--scenario", TOY, "--dist", dist, "--param", param,
                 "--out-dir", str(tmp_path)])
    assert code == 1
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "trace.csv").exists()


@pytest.mark.parametrize("flag", ["--t-token", "--t-chunk", "--t-base", "--t-recompute"])
def test_simulate_negative_cost_exits_1(tmp_path, capsys, flag):
    code = main(["simulate", "--scenario", TOY, flag, "-1", "--iters", "1", "--out-dir", str(tmp_path)])
    assert code == 1
    assert "error" in capsys.readouterr().err
    assert not (tmp_path / "trace.csv").exists()


def test_simulate_depth_skew_needs_more_chunks_deeper(tmp_path, capsys):
    code = main(["simulate", "--scenario", TOY, "--dist", "depth_skew", "--param", "decay=0.1",
                 "--static-bytes", "39104", "--iters", "20", "--out-dir", str(tmp_path)])
    capsys.readouterr()
    assert code == 0
    rows = (tmp_path / "plan.csv").read_text().splitlines()[2:]
    by_layer = {}
    for row in rows:
        fields = row.split(",")
        by_layer.setdefault(int(fields[1]), []).append(int(fields[6]))
    means = [sum(v) / len(v) for _, v in sorted(by_layer.items())]
    assert means[-1] >= means[0]
    assert all(int(row.split(",")[4]) == 8 for row in rows)


def test_replay_reproduces_simulate(tmp_path, capsys):
    first = tmp_path / "first"
    assert main(["simulate", "--scenario", TOY, "--dist", "depth_skew", "--seed", "3", "--iters", "4",
                 "--out-dir", str(first)]) == 0
    second = tmp_path / "second"
    assert main(["replay", "--manifest", str(first / "manifest.json"), "--out-dir", str(second)]) == 0
    capsys.readouterr()
    for name in RUN_FILES:
        assert (first / name).read_bytes() == (second / name).read_bytes()
    assert (second / "manifest.json").exists()


def test_replay_missing_manifest(tmp_path, capsys):
    assert main(["replay", "--manifest", str(tmp_path / "none.json")]) == 1


# -- plan --------------------------------------------------------------------------

def test_plan_command(tmp_path, capsys):
    out = tmp_path / "plan.csv"
    code = main(["plan", "--scenario", TOY, "--iters", "3", "--output", str(out),
                 "--manifest", str(tmp_path / "m.json")])
    capsys.readouterr()
    assert code == 0
    assert len(out.read_text().splitlines()) == 2 + 3 * 3


def test_plan_over_budget_exits_2(tmp_path, capsys):
    code = main(["plan", "--scenario", TOY, "--dist", "hot_expert", "--param", "rho=1", "--iters", "2",
                 "--static-bytes", "39344", "--format", "json", "--manifest", str(tmp_path / "m.json")])
    records = _json_out(capsys)
    assert code == 2
    assert any(r["clamped"] for r in records)


# -- verify --------------------------------------------------------------------------

def test_verify_passes(tmp_path, capsys):
    code = main(["verify", "--size", "8x3x4x3x2", "--seeds", "2", "--manifest", str(tmp_path / "m.json")])
    assert code == 0
    assert "forward_equivalence" in capsys.readouterr().out


def test_verify_injected_fault_exits_3(tmp_path, capsys):
    code = main(["verify", "--size", "8x3x4x3x2", "--seeds", "2", "--inject-fault",
                 "--manifest", str(tmp_path / "m.json")])
    assert code == 3
    assert "FAILED" in capsys.readouterr().out


# -- usage and configuration errors ---------------------------------------------------

@pytest.mark.parametrize("argv", [
    ["estimate"],
    ["estimate", "--scenario", TOY, "--s-prime", "3", "--trace", "t.csv"],
    ["simulate", "--scenario", TOY, "--param", "alpha"],
    ["verify", "--size", "8x3"],
    ["frobnicate"],
])
def test_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as err:
        main(argv)
    assert err.value.code == 1


def test_missing_scenario_exits_1(tmp_path, capsys):
    code = main(["estimate", "--scenario", str(tmp_path / "absent.yaml"), "--manifest", str(tmp_path / "m.json")])
    assert code == 1
    assert "not found" in capsys.readouterr().err


def test_invalid_scenario_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text((SCENARIO_DIR / "toy.yaml").read_text().replace("alpha: 1.0", "alpha: 1.2"))
    code = main(["estimate", "--scenario", str(bad), "--manifest", str(tmp_path / "m.json")])
    assert code == 1
    assert "alpha" in capsys.readouterr().err


def test_bins_flag_parsing():
    args = build_parser().parse_args(["plan", "--scenario", TOY, "--bins", "1,3,9"])
    assert args.bins == [1, 3, 9]
