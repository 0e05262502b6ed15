"""
Chunkwise command line

Run with: python -m src.main <estimate|simulate|plan|verify|replay> ...

Exit codes: 0 ok, 1 configuration error, 2 infeasible, 3 property failure.
"""
import argparse
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import BaseModel, ValidationError

from . import __version__
from .core.chunk_tuning import DEFAULT_BINS, dump_plan
from .core.config import load_scenario
from .core.errors import ChunkwiseError
from .core.files import atomic_write_text
from .core.report import dump_memory_report
from .core.routing_sim import DistributionKind, load_trace
from .core.settings import settings
from .core.throughput import METHODS, CostParams, dump_throughput
from .core.verification import KernelSize
from .pipeline import ChunkwiseWorkforce, ExitCode, StageResult

logger = logging.getLogger(__name__)

FORMATS = ("table", "csv", "json")


class RunManifest(BaseModel):
    """Everything needed to re-run a command."""
    tool_version: str
    subcommand: str
    argv: List[str]
    scenario: Optional[str] = None
    seed: Optional[int] = None
    bins: Optional[List[int]] = None
    outputs: Dict[str, str] = {}
    exit_code: int = 0
    started_at: str
    wall_clock_seconds: float


# -- argument helpers -------------------------------------------------------------

def _bins(text: str) -> List[int]:
    try:
        return [int(x) for x in text.replace(" ", "").strip("[]").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bins must be a comma separated list of integers, got {text!r}")


def _param(text: str) -> tuple:
    key, sep, value = text.partition("=")
    try:
        if not sep:
            raise ValueError
        return key.strip(), float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"distribution parameter must look like name=value, got {text!r}")


def _size(text: str) -> KernelSize:
    try:
        return KernelSize.parse(text)
    except (ValueError, ValidationError) as e:
        raise argparse.ArgumentTypeError(str(e))


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the configuration error code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(ExitCode.CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="chunkwise",
        description="MoE training memory planner and chunked dispatch simulator",
    )
    parser.add_argument("--version", action="version", version=f"chunkwise {__version__}")
    parser.add_argument("--log-level", default=settings.log_level,
                        help="logging level (default from CHUNKWISE_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_args(p):
        p.add_argument("--scenario", required=True,
                       help="scenario YAML file, or a name inside CHUNKWISE_SCENARIO_DIR")
        p.add_argument("--bins", type=_bins, default=list(DEFAULT_BINS), help="chunk bins, e.g. 1,2,4,8")
        p.add_argument("--static-bytes", type=int, help="override the per-stage static memory")
        p.add_argument("--format", choices=FORMATS, default="table")
        p.add_argument("--manifest", help="where to write the run manifest")

    def generator_args(p):
        p.add_argument("--dist", choices=[k.value for k in DistributionKind], default="uniform")
        p.add_argument("--param", dest="params", type=_param, action="append", default=[],
                       help="distribution parameter name=value (alpha, rho, alpha0, decay)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--iters", type=int, default=20)
        p.add_argument("--source-ranks", type=int, help="EP ranks dispatching tokens (default: ep)")

    est = sub.add_parser("estimate", help="memory report per method")
    scenario_args(est)
    tokens = est.add_mutually_exclusive_group()
    tokens.add_argument("--s-prime", type=int, help="received tokens on the GPU (default e·s·t_k)")
    tokens.add_argument("--trace", help="routing trace file; its peak received tokens are used")
    est.add_argument("--stage", type=int, help="pipeline rank (default: the scenario's pp_rank)")
    est.add_argument("--ep-rank", type=int)
    est.add_argument("--method", choices=METHODS)
    est.add_argument("--fixed-chunks", type=int)
    est.add_argument("--output", help="also write the report to this file")

    sim = sub.add_parser("simulate", help="trace, chunk plans and throughput")
    scenario_args(sim)
    generator_args(sim)
    sim.add_argument("--fixed-chunks", type=int)
    sim.add_argument("--gpus", type=int, help="GPU count N for TGS")
    sim.add_argument("--t-token", type=float, default=CostParams().t_compute_per_token)
    sim.add_argument("--t-recompute", type=float, default=CostParams().t_recompute_factor)
    sim.add_argument("--t-chunk", type=float, default=CostParams().t_chunk_fixed)
    sim.add_argument("--t-base", type=float, default=CostParams().t_base_iter)
    sim.add_argument("--out-dir", help=f"output directory (default {settings.output_dir}/<scenario>-seed<seed>)")

    pln = sub.add_parser("plan", help="chunk plan for a trace")
    scenario_args(pln)
    generator_args(pln)
    pln.add_argument("--trace", help="routing trace file (otherwise one is generated)")
    pln.add_argument("--ep-rank", type=int)
    pln.add_argument("--output", help="plan file to write")

    ver = sub.add_parser("verify", help="kernel property checks")
    ver.add_argument("--size", type=_size, default=KernelSize(), help="TOKENSxHIDDENxINTERMEDIATExEXPERTSxTOPK")
    ver.add_argument("--seeds", type=int, default=10)
    ver.add_argument("--first-seed", type=int, default=0)
    ver.add_argument("--manifest", help="where to write the run manifest")
    ver.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    rep = sub.add_parser("replay", help="re-run a recorded manifest")
    rep.add_argument("--manifest", required=True, dest="replay_manifest")
    rep.add_argument("--out-dir", help="redirect a simulate replay to another directory")
    return parser


# -- subcommands -------------------------------------------------------------------

def _emit(text: str, output: Optional[str], outputs: Dict[str, str], key: str) -> None:
    print(text.rstrip("\n"))
    if output:
        outputs[key] = str(atomic_write_text(output, text if text.endswith("\n") else text + "\n"))


def _scenario(args):
    return load_scenario(settings.resolve_scenario(args.scenario))


def cmd_estimate(args, workforce: ChunkwiseWorkforce, outputs: Dict[str, str]) -> StageResult:
    scn = _scenario(args)
    result = workforce.estimate(
        scenario=scn,
        stage=args.stage,
        received_tokens=args.s_prime,
        trace=load_trace(args.trace) if args.trace else None,
        ep_rank=args.ep_rank,
        method=args.method,
        bins=args.bins,
        fixed_chunks=args.fixed_chunks,
        static_bytes=args.static_bytes,
    )
    if result.data is not None:
        report = result.data
        if args.format == "csv":
            text = dump_memory_report(report)
        elif args.format == "json":
            text = json.dumps(report.to_records(), indent=2)
        else:
            text = report.format_table()
        _emit(text, args.output, outputs, "report")
    return result


def _default_out_dir(args) -> Path:
    return settings.output_dir / f"{Path(args.scenario).stem}-seed{args.seed}"


def cmd_simulate(args, workforce: ChunkwiseWorkforce, outputs: Dict[str, str]) -> StageResult:
    scn = _scenario(args)
    out_dir = Path(args.out_dir) if args.out_dir else _default_out_dir(args)
    result = workforce.simulate(
        scenario=scn,
        dist=args.dist,
        dist_params=dict(args.params),
        seed=args.seed,
        iterations=args.iters,
        source_ranks=args.source_ranks,
        bins=args.bins,
        fixed_chunks=args.fixed_chunks,
        static_bytes=args.static_bytes,
        cost=CostParams(
            t_compute_per_token=args.t_token,
            t_recompute_factor=args.t_recompute,
            t_chunk_fixed=args.t_chunk,
            t_base_iter=args.t_base,
        ),
        gpus=args.gpus,
        out_dir=out_dir,
    )
    if result.success:
        outputs.update(result.metadata["outputs"])
        report = result.data["throughput"]
        if args.format == "json":
            print(json.dumps(report.to_records(), indent=2))
        elif args.format == "csv":
            print(dump_throughput(report).rstrip("\n"))
        else:
            print(f"{'method':<10} {'T (s)':>12} {'TGS':>12} {'mean c':>8}  feasible")
            for r in report.rows:
                print(f"{r.method:<10} {r.mean_seconds:>12.6g} {r.tgs:>12.6g} {r.mean_chunks:>8.2f}  "
                      f"{'ok' if r.feasible else 'x'}")
            print(f"wrote {', '.join(sorted(outputs.values()))}")
    return result


def cmd_plan(args, workforce: ChunkwiseWorkforce, outputs: Dict[str, str]) -> StageResult:
    scn = _scenario(args)
    result = workforce.plan(
        scenario=scn,
        trace_path=args.trace,
        dist=args.dist,
        dist_params=dict(args.params),
        seed=args.seed,
        iterations=args.iters,
        source_ranks=args.source_ranks,
        bins=args.bins,
        ep_rank=args.ep_rank,
        static_bytes=args.static_bytes,
        output=args.output,
    )
    if result.success:
        outputs.update(result.metadata["outputs"])
        plan = result.data
        if args.format == "csv":
            print(dump_plan(plan).rstrip("\n"))
        elif args.format == "json":
            print(json.dumps(plan.to_records(), indent=2))
        else:
            print(f"{'layer':>5} {'stage':>5} {'mean c':>7} {'max c':>5}")
            grid = plan.grid()
            for i, layer in enumerate(plan.layer_ids):
                column = grid[:, i]
                print(f"{layer:>5} {scn.stage_of_layer(layer):>5} "
                      f"{(column.mean() if column.size else 0.0):>7.2f} {(column.max() if column.size else 0):>5}")
    return result


def cmd_verify(args, workforce: ChunkwiseWorkforce, outputs: Dict[str, str]) -> StageResult:
    result = workforce.verify(size=args.size, seeds=args.seeds, first_seed=args.first_seed,
                              inject_fault=args.inject_fault)
    if result.data is not None:
        for check, (ok, total) in result.data.summary().items():
            print(f"{check:<22} {ok}/{total} passed")
    if not result.success and result.data is not None:
        print(f"FAILED: {result.error}")
    return result


COMMANDS = {
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "plan": cmd_plan,
    "verify": cmd_verify,
}


def _manifest_path(args, outputs: Dict[str, str]) -> Path:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    if args.command == "simulate" and "trace" in outputs:
        return Path(outputs["trace"]).parent / "manifest.json"
    if outputs:
        first = Path(next(iter(outputs.values())))
        return first.with_name(first.name + ".manifest.json")
    return settings.output_dir / f"{args.command}.manifest.json"


def replay(manifest_path: str, out_dir: Optional[str] = None) -> int:
    """Re-run the command recorded in a manifest."""
    try:
        manifest = RunManifest.model_validate_json(Path(manifest_path).read_text(encoding="utf-8"))
    except (OSError, ValidationError) as e:
        print(f"error: cannot read manifest {manifest_path}: {e}", file=sys.stderr)
        return ExitCode.CONFIG
    argv = list(manifest.argv)
    if out_dir is not None:
        if manifest.subcommand != "simulate":
            print("error: --out-dir only applies to simulate manifests", file=sys.stderr)
            return ExitCode.CONFIG
        argv = _replace_flag(argv, "--out-dir", out_dir)
        argv = _replace_flag(argv, "--manifest", str(Path(out_dir) / "manifest.json"))
    logger.info("replaying %s", " ".join(argv))
    return main(argv)


def _replace_flag(argv: List[str], flag: str, value: str) -> List[str]:
    out, skip = [], False
    for item in argv:
        if skip:
            skip = False
            continue
        if item == flag:
            skip = True
            continue
        if item.startswith(flag + "="):
            continue
        out.append(item)
    return out + [flag, value]


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    if args.command == "replay":
        return replay(args.replay_manifest, args.out_dir)

    started = datetime.now(timezone.utc)
    clock = time.perf_counter()
    outputs: Dict[str, str] = {}
    workforce = ChunkwiseWorkforce()
    try:
        result = COMMANDS[args.command](args, workforce, outputs)
    except (ChunkwiseError, ValidationError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return ExitCode.CONFIG
    if result.error:
        print(f"error: {result.error}", file=sys.stderr)

    manifest = RunManifest(
        tool_version=__version__,
        subcommand=args.command,
        argv=argv,
        scenario=getattr(args, "scenario", None),
        seed=getattr(args, "seed", None),
        bins=getattr(args, "bins", None),
        outputs=outputs,
        exit_code=result.exit_code,
        started_at=started.isoformat(),
        wall_clock_seconds=time.perf_counter() - clock,
    )
    try:
        atomic_write_text(_manifest_path(args, outputs), manifest.model_dump_json(indent=2) + "\n")
    except OSError as e:
        logger.warning("could not write run manifest: %s", e)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
