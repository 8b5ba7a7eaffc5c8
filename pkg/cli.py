import argparse
from contextlib import ExitStack
from os import environ
from pathlib import Path
import sys
from typing import List, Optional, Sequence, TextIO

import experiment
from experiment import ConfigError
import report
import tracing

OK = 0
CONFIG_ERROR = 1
RUNTIME_FAILURE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tta",
        allow_abbrev=False,
        description="Single-sample test-time adaptation with CLIP-style rewards.",
        epilog=(
            "Config fields can be overridden after the config path: --<field> for "
            "[tta] and [experiment], --<section>.<field> for the other sections."
        ),
    )
    commands = parser.add_subparsers(dest="command", required=True)

    pretrain = commands.add_parser(
        "pretrain", allow_abbrev=False, help="build model checkpoints"
    )
    pretrain.add_argument("config", type=Path)

    genbench = commands.add_parser(
        "genbench", allow_abbrev=False, help="write benchmark files"
    )
    genbench.add_argument("config", type=Path)
    genbench.add_argument("--out", type=Path, required=True, dest="bench_out")

    run = commands.add_parser("run", allow_abbrev=False, help="run one experiment")
    run.add_argument("config", type=Path)

    sweep = commands.add_parser(
        "sweep", allow_abbrev=False, help="grid over TTA settings"
    )
    sweep.add_argument("config", type=Path)
    sweep.add_argument(
        "--grid",
        action="append",
        default=[],
        metavar="FIELD=V1,V2",
        help="a sweep axis; repeat for a cartesian grid",
    )

    summary = commands.add_parser(
        "report", allow_abbrev=False, help="aggregate run directories"
    )
    summary.add_argument("runs", type=Path, nargs="+")
    summary.add_argument("--out", type=Path, required=True, dest="report_out")
    summary.add_argument("--no-charts", action="store_false", dest="charts")
    return parser


def parse(argv: Sequence[str]) -> argparse.Namespace:
    """Parse arguments, raising ConfigError instead of exiting on bad usage."""
    parser = build_parser()
    try:
        args, rest = parser.parse_known_args(argv)
    except SystemExit as e:
        if e.code in (0, None):
            raise
        raise ConfigError("Invalid command line") from e
    if rest and args.command == "report":
        raise ConfigError(f"Unrecognised arguments {rest}")
    args.overrides = experiment.parse_overrides(rest)
    return args


def execute(args: argparse.Namespace, out: TextIO) -> None:
    if args.command == "report":
        for line in report.write_report(args.runs, args.report_out, args.charts):
            print(line, file=out)
        return

    cfg = experiment.load_config(args.config, args.overrides)

    if args.command == "genbench":
        benchmark = experiment.genbench(cfg, args.bench_out)
        print(
            f"Wrote benchmark with {len(benchmark.target)} target samples "
            f"to {args.bench_out}",
            file=out,
        )
    elif args.command == "pretrain":
        rows = experiment.pretrain(cfg, experiment.load_bench(cfg))
        header = ["model", "epochs", "final_loss", "source_accuracy"]
        for line in report.lines(header, [row.cells() for row in rows]):
            print(line, file=out)
    elif args.command == "run":
        result = experiment.run_experiment(cfg)
        cells = [row.cells() for row in result.rows]
        for line in report.lines(experiment.RESULT_COLUMNS, cells):
            print(line, file=out)
        for task, objective in result.skipped:
            print(f"note: {task} does not support {objective}; skipped", file=out)
    elif args.command == "sweep":
        grid = experiment.parse_grid(args.grid) if args.grid else None
        path = experiment.run_sweep(cfg, grid)
        rows = experiment.read_table(path)
        header: List[str] = list(rows[0]) if rows else []
        for line in report.lines(header, [list(row.values()) for row in rows]):
            print(line, file=out)


def main(
    argv: Optional[Sequence[str]] = None,
    out: TextIO = sys.stdout,
    err: TextIO = sys.stderr,
) -> int:
    tracing_context = ExitStack()

    trace_file_name = environ.get("TRACEFILE")
    if trace_file_name:
        trace_file = open(trace_file_name, mode="w")
        tracing_context.enter_context(trace_file)
        tracing.init(trace_file)

    with tracing_context:
        try:
            execute(parse(sys.argv[1:] if argv is None else argv), out)
        except (ConfigError, FileNotFoundError) as e:
            print(f"error: {e}", file=err)
            return CONFIG_ERROR
        except KeyboardInterrupt:
            return RUNTIME_FAILURE
        except Exception as e:
            print(f"failed: {type(e).__name__}: {e}", file=err)
            return RUNTIME_FAILURE
    return OK


if __name__ == "__main__":
    sys.exit(main())
