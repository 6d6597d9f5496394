"""
Command line entry point.

    hydrasim run scenarios/chaos.json --seed 7 -v
    hydrasim run scenarios/chaos.json --seeds 0-15 --workers 4
    hydrasim validate scenarios/chaos.json
    hydrasim report runs/chaos-7
"""

import argparse
import logging
import sys
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from hydrasim.client import ResultsClient
from hydrasim.config import HydraSettings
from hydrasim.harness import RunResult, run_scenario
from hydrasim.metrics import METRICS_FILE, read_jsonl, write_report
from hydrasim.scenario import Scenario, ScenarioError, load_scenario

log = logging.getLogger(__name__)


def configure_logging(level: str | int) -> None:
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)-7s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def parse_seeds(text: str) -> list[int]:
    """`7`, `0-15` or `1,4,9`."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError(f"no seeds in {text!r}")
    return seeds


def publish(result: RunResult, settings: HydraSettings) -> str | None:
    with ResultsClient(settings.api_url, timeout=settings.api_timeout) as client:
        run_id = client.start_run(result.scenario, result.seed)
        client.upload_metrics(run_id, result.metrics.records)
        summary = {
            "ok": result.ok,
            "failures": result.failures,
            "jobs": {name: r.status for name, r in result.reports.items()},
        }
        client.complete_run(run_id, summary, status="completed" if result.ok else "failed")
    return run_id


def _run_one(scenario: Scenario, seed: int, out_root: Path, settings: HydraSettings, publish_run: bool) -> RunResult:
    out_dir = out_root / f"{scenario.name}-{seed}"
    result = run_scenario(scenario, seed=seed, out_dir=out_dir)
    if publish_run:
        run_id = publish(result, settings)
        if run_id:
            log.info(f"published {scenario.name} seed {seed} as run {run_id}")
    return result


def cmd_run(args: argparse.Namespace, settings: HydraSettings) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as e:
        for error in e.errors:
            print(f"error: {error}", file=sys.stderr)
        return 2
    seeds = args.seeds or [args.seed if args.seed is not None else scenario.seed]
    out_root = Path(args.out or settings.output_dir)
    publish_run = args.publish or settings.publish

    if len(seeds) == 1:
        results = [_run_one(scenario, seeds[0], out_root, settings, publish_run)]
    else:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(lambda s: _run_one(scenario, s, out_root, settings, publish_run), seeds))

    failed = 0
    for result in results:
        status = "ok" if result.ok else "FAILED"
        print(f"{result.scenario} seed={result.seed}: {status} -> {result.out_dir}")
        for failure in result.failures:
            print(f"  {failure}")
        failed += not result.ok
    return 1 if failed else 0


def cmd_validate(args: argparse.Namespace, _settings: HydraSettings) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as e:
        for error in e.errors:
            print(f"error: {error}", file=sys.stderr)
        return 2
    print(
        f"{scenario.name}: {scenario.topology.peers} peers, {len(scenario.faults)} faults, "
        f"{len(scenario.datasets)} dataset actions, {len(scenario.jobs)} jobs"
    )
    return 0


def cmd_report(args: argparse.Namespace, _settings: HydraSettings) -> int:
    directory = Path(args.directory)
    metrics = directory / METRICS_FILE
    if not metrics.is_file():
        print(f"error: {metrics} not found", file=sys.stderr)
        return 2
    summary = write_report(read_jsonl(metrics), directory)
    print(summary.read_text(encoding="utf-8"), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hydrasim", description="Deterministic Hydra network simulator")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--seeds", type=parse_seeds, help="sweep several seeds, e.g. 0-15")
    run.add_argument("--workers", type=int, default=4, help="threads for a seed sweep")
    run.add_argument("--out", help="output root (default HYDRA_OUTPUT_DIR)")
    run.add_argument("--publish", action="store_true", help="upload the run to the results service")
    run.set_defaults(handler=cmd_run)

    validate = sub.add_parser("validate", help="check a scenario file without running it")
    validate.add_argument("scenario")
    validate.set_defaults(handler=cmd_validate)

    report = sub.add_parser("report", help="rebuild the summary from a metrics directory")
    report.add_argument("directory")
    report.set_defaults(handler=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings = HydraSettings()
    level: str | int = settings.log_level
    if args.verbose == 1:
        level = logging.INFO
    elif args.verbose >= 2:
        level = logging.DEBUG
    configure_logging(level)
    return int(args.handler(args, settings))
