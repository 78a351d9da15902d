"""Command-line entry point: init, simulate, bench, verify, export."""
from __future__ import annotations

import argparse
import json
import logging
import pickle
import sys
from dataclasses import replace
from pathlib import Path

from . import contracts
from .bench import BenchError, parse_suite, sweep, write_sweep
from .gridcase import CaseFormatError, apply_grouping, load_case, load_grouping
from .ledger import MAINCHAIN, LedgerError, NetworkConfigError, load_network_config, verify_export
from .powerflow import PowerFlowError
from .scenario import (DATA_DIR, ConfigError, World, cmd_init, cmd_simulate, load_scenario, resolve_path,
                       write_log, write_trajectory)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_COLLAPSE = 0, 1, 2, 3

INIT_STATE = "world_init.pkl"
FINAL_STATE = "world.pkl"
LEDGER_DUMP = "ledger.jsonl"

log = logging.getLogger("dvschain")


class RuntimeFailure(RuntimeError):
    pass


def _scenario(args):
    path = args.scenario or DATA_DIR / "scenarios" / "base.json"
    return load_scenario(path, case=args.case, grouping=args.grouping, network=args.network, seed=args.seed)


def _save(world: World, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pickle.dumps(world))


def _load(out_dir: Path, *names: str) -> World:
    for name in names:
        path = out_dir / name
        if path.exists():
            return pickle.loads(path.read_bytes())
    raise ConfigError(f"no initialized state in {out_dir}; run `dvschain init` first")


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def run_init(args) -> int:
    cfg = _scenario(args)
    world = cmd_init(cfg, wall_clock=args.wall_clock)
    out = Path(args.out_dir)
    _save(world, out / INIT_STATE)
    records = [k for k in world.network.channels[MAINCHAIN].state.keys() if k.startswith("group/")]
    _write_json(out / "init.json", {"scenario": cfg.name, "records": records,
                                    "chain_hashes": world.network.chain_hashes()})
    print(f"initialized {len(world.groups)} groups, {len(records)} topology records -> {out}")
    return EXIT_OK


def run_simulate(args) -> int:
    out = Path(args.out_dir)
    cfg = _scenario(args)
    init_path = out / INIT_STATE
    world = None
    if init_path.exists():
        world = pickle.loads(init_path.read_bytes())
        if world.config != cfg or world.network.wall_clock != args.wall_clock:
            log.info("stored state was initialized from a different scenario; re-initializing")
            world = None
    if world is None:
        world = cmd_init(cfg, wall_clock=args.wall_clock)
        _save(world, init_path)
    result = cmd_simulate(world)
    _save(world, out / FINAL_STATE)
    write_log(result, out / "scenario_log.jsonl")
    write_trajectory(result, out / "vsi_trajectory.csv")
    world.network.export_jsonl(out / LEDGER_DUMP)
    _write_json(out / "chain_hashes.json", result.chain_hashes)
    from .plotting import plot_trajectory
    plot_trajectory(result.trajectory, cfg.threshold, out / "vsi_trajectory.png", result.log)
    counts = {k: len(result.events(k)) for k in ("action", "merge", "split", "collapse")}
    print(f"{cfg.name}: " + ", ".join(f"{v} {k}" for k, v in counts.items()) + f" -> {out}")
    return EXIT_COLLAPSE if result.collapsed else EXIT_OK


def run_bench(args) -> int:
    suite_path = resolve_path(args.suite or DATA_DIR / "suite.json", Path.cwd())
    try:
        suite = parse_suite(json.loads(Path(suite_path).read_text()), Path(suite_path).parent)
    except FileNotFoundError as exc:
        raise ConfigError(f"suite file not found: {suite_path}") from exc
    except (json.JSONDecodeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    case_path = resolve_path(args.case, Path.cwd()) if args.case else suite.case
    grouping_path = resolve_path(args.grouping, Path.cwd()) if args.grouping else suite.grouping
    try:
        case = load_case(case_path)
        groups = apply_grouping(case, load_grouping(grouping_path))
        networks = {name: load_network_config(path) for name, path in suite.networks.items()}
    except FileNotFoundError as exc:
        raise ConfigError(f"missing input file: {exc.filename}") from exc
    except (CaseFormatError, NetworkConfigError) as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(args.out_dir)
    from .plotting import plot_sweep
    for axis, values, base in suite.sweeps():
        if args.seed is not None:
            base = replace(base, seed=args.seed)
        series = sweep(axis, values, base, networks, case, groups, wall_clock=args.wall_clock)
        csv_path, _ = write_sweep(axis, series, out)
        plot_sweep(axis, series, out / f"sweep_{axis}.png")
        print(f"{axis}: {len(values)} points x {len(networks)} networks -> {csv_path}")
    return EXIT_OK


def run_verify(args) -> int:
    out = Path(args.out_dir)
    dump = Path(args.ledger) if args.ledger else out / LEDGER_DUMP
    if not dump.exists():
        world = _load(out, FINAL_STATE, INIT_STATE)
        results = {cid: world.network.verify_chain(cid) for cid in sorted(world.network.channels)}
    else:
        results = verify_export(dump)
    ok = True
    for cid, (good, bad) in sorted(results.items()):
        print(f"{cid}: {'ok' if good else f'broken at block {bad}'}")
        ok &= good
    if not ok:
        raise RuntimeFailure("ledger verification failed")
    return EXIT_OK


def run_export(args) -> int:
    out = Path(args.out_dir)
    world = _load(out, FINAL_STATE, INIT_STATE)
    target = Path(args.ledger) if args.ledger else out / LEDGER_DUMP
    n = world.network.export_jsonl(target)
    print(f"wrote {n} blocks -> {target}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dvschain", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", default="dvschain-out", help="where state, logs and reports go")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--wall-clock", action="store_true",
                        help="time contract execution for real instead of using the cost model")
    common.add_argument("-v", "--verbose", action="store_true")
    inputs = argparse.ArgumentParser(add_help=False)
    inputs.add_argument("--scenario", help="scenario JSON (default: bundled base scenario)")
    inputs.add_argument("--case", help="case file overriding the scenario's")
    inputs.add_argument("--grouping", help="grouping file overriding the scenario's")
    inputs.add_argument("--network", help="network config overriding the scenario's")

    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("init", parents=[common, inputs], help="record group data and VVC budgets")
    p.set_defaults(func=run_init)
    p = sub.add_parser("simulate", parents=[common, inputs], help="run a closed-loop scenario")
    p.set_defaults(func=run_simulate)
    p = sub.add_parser("bench", parents=[common], help="run the benchmark sweeps")
    p.add_argument("--suite", help="suite JSON (default: bundled suite)")
    p.add_argument("--case")
    p.add_argument("--grouping")
    p.set_defaults(func=run_bench)
    for name, func, text in (("verify", run_verify, "audit the hash chains"),
                             ("export", run_export, "dump every block as JSON lines")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--ledger", help="ledger dump path (default: <out-dir>/ledger.jsonl)")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    contracts.set_caching(not args.wall_clock)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (LedgerError, BenchError, PowerFlowError, RuntimeFailure) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        contracts.set_caching(True)


if __name__ == "__main__":
    sys.exit(main())
