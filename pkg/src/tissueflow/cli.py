"""Command-line front end.

Exit codes: 0 success (or partial failure without ``--strict``), 1 generic
error or missing dataset, 2 parse error, 3 cycle or missing input, 4 store
error, 5 plugin crash.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from tissueflow import __version__, evolve, metrics
from tissueflow.errors import TissueflowError
from tissueflow.guidelines import CriteriaStore
from tissueflow.memory import open_store
from tissueflow.plan import builtin_registry, load_plan
from tissueflow.plugins import make_runner
from tissueflow.registry import REGISTRY_DATASET, ToolRegistry
from tissueflow.scheduler import compile_plan, execute_plan, make_executor

logger = logging.getLogger("tissueflow")

DEFAULT_STORE = "tfstore"


def _out(line: str = "") -> None:
    sys.stdout.write(line + "\n")


# -- run -------------------------------------------------------------------


def cmd_run(args) -> int:
    doc = load_plan(args.plan)
    registry = doc.registry()
    criteria = doc.load_criteria()
    workflow = doc.workflow(registry)
    try:
        executor = make_executor(args.executor)
    except ValueError as exc:
        raise TissueflowError(str(exc)) from exc
    try:
        with open_store(args.store) as store:
            cs = CriteriaStore(store)
            for c in criteria:
                cs.ensure(c, actor="plan")
            registry.save(store, actor="plan")
            graph = compile_plan(workflow, registry, store)
            runner = make_runner(registry, seed=0 if args.seed is None else args.seed)
            record = execute_plan(graph, executor, store, runner)
    finally:
        executor.close()

    for line in record.summary_lines():
        _out(line)
    _out(f"outcome\t{record.outcome}\t{record.wall_time:.3f}s")
    if args.log:
        Path(args.log).write_text(record.to_jsonl(), encoding="utf-8")

    crashed = [n for n, r in record.nodes.items() if r.crashed]
    if crashed:
        logger.error("plugin crash in %s", ", ".join(sorted(crashed)))
        return 5
    if record.outcome == "success":
        return 0
    if record.outcome == "partial" and not args.strict:
        logger.warning("partial run: failed nodes %s", ", ".join(record.failed()))
        return 0
    return 1


# -- simulate-feedback -----------------------------------------------------


def cmd_simulate(args) -> int:
    scenario = evolve.load_scenario(args.scenario)
    seed = scenario.seed if args.seed is None else args.seed
    with open_store(args.store) as store:
        result = evolve.simulate(store, scenario, seed=seed, rounds=args.rounds,
                                 oracle_accuracy=args.oracle_accuracy)
    _out("round\taccuracy")
    for r, acc in enumerate(result.trace):
        _out(f"{r}\t{acc:.6f}")
    return 0


# -- inspect ---------------------------------------------------------------


def _shape(shape) -> str:
    return "x".join(map(str, shape)) if shape else "scalar"


def _parse_slice(text: str, ndim: int) -> tuple:
    parts = text.split(",")
    if len(parts) > ndim:
        raise TissueflowError(f"slice {text!r} has more than {ndim} axes")
    out = []
    for p in parts:
        try:
            if ":" in p:
                out.append(slice(*(int(v) if v else None for v in p.split(":"))))
            else:
                out.append(int(p))
        except (TypeError, ValueError) as exc:
            raise TissueflowError(f"bad slice component {p!r}") from exc
    return tuple(out)


def cmd_inspect(args) -> int:
    with open_store(args.store, readonly=True) as store:
        if args.what == "list":
            for info in store.list_datasets(args.pattern):
                _out(f"{info.name}\t{info.role.value}\t{info.dtype}\t{_shape(info.shape)}\t"
                     f"{info.content_hash}")
        elif args.what == "show":
            info = store.info(args.name)
            _out(f"name\t{info.name}")
            _out(f"role\t{info.role.value}")
            _out(f"dtype\t{info.dtype}")
            _out(f"shape\t{_shape(info.shape)}")
            for k in sorted(info.attrs):
                _out(f"attr\t{k}\t{info.attrs[k]}")
            _out(f"content_hash\t{info.content_hash}")
            if args.slice:
                arr = store.read_array(args.name)
                view = np.asarray(arr[_parse_slice(args.slice, arr.ndim)])
                with np.printoptions(threshold=400, linewidth=120):
                    for line in np.array2string(view).splitlines():
                        _out(f"data\t{line}")
        elif args.what == "history":
            for e in store.history(args.name):
                _out(e.to_line().rstrip("\n"))
        else:
            for e in store.journal():
                _out(e.to_line().rstrip("\n"))
    return 0


# -- metrics, tools, gc ----------------------------------------------------


def cmd_metrics(args) -> int:
    with open_store(args.store) as store:
        result = metrics.metrics_from_store(store, args.truth, args.pred, args.kind)
        rows = metrics.report_rows(result)
        name = args.name or f"{args.kind}_{args.pred}"
        metrics.write_report(store, name, rows)
    sys.stdout.write(metrics.format_report(rows))
    return 0


def cmd_tools(args) -> int:
    if args.plan:
        registry = load_plan(args.plan).registry()
    else:
        registry = builtin_registry()
        if Path(args.store).is_dir():
            with open_store(args.store, readonly=True) as store:
                if REGISTRY_DATASET in store:
                    registry = ToolRegistry.load(store)
    _out("tool_id\tversion\tcapability\tmodality\tperf_score\trunner")
    for c in registry:
        _out(f"{c.tool_id}\t{c.version}\t{c.capability.value}\t{c.modality.value}\t"
             f"{c.perf_score:g}\t{c.runner}")
    return 0


def cmd_gc(args) -> int:
    with open_store(args.store) as store:
        removed = store.gc()
    _out(f"removed\t{removed}")
    return 0


# -- entry point -----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tissueflow", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--store", default=DEFAULT_STORE, help="store directory (default: %(default)s)")
    p.add_argument("--seed", type=int, default=None, help="seed for every random source")
    p.add_argument("--executor", default="inline", help="inline or pool=K (default: inline)")
    p.add_argument("--strict", action="store_true", help="exit nonzero on partial failure")
    p.add_argument("--log-level", default="WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="compile and execute a plan")
    run.add_argument("plan")
    run.add_argument("--log", help="write the run log as JSON lines to this file")
    run.set_defaults(func=cmd_run)

    sim = sub.add_parser("simulate-feedback", help="run the active-learning loop on a scenario")
    sim.add_argument("scenario")
    sim.add_argument("--rounds", type=int, default=None)
    sim.add_argument("--oracle-accuracy", type=float, default=1.0)
    sim.set_defaults(func=cmd_simulate)

    ins = sub.add_parser("inspect", help="look at store contents")
    isub = ins.add_subparsers(dest="what", required=True)
    lst = isub.add_parser("list")
    lst.add_argument("pattern", nargs="?", default="*")
    show = isub.add_parser("show")
    show.add_argument("name")
    show.add_argument("--slice", help="numpy-style index, e.g. 0:4,0:4")
    hist = isub.add_parser("history")
    hist.add_argument("name")
    isub.add_parser("journal")
    ins.set_defaults(func=cmd_inspect)

    met = sub.add_parser("metrics", help="score one dataset against another")
    met.add_argument("truth")
    met.add_argument("pred")
    met.add_argument("--kind", choices=["regression", "classification", "auc"], required=True)
    met.add_argument("--name", help="report name (dataset table_metrics_<name>)")
    met.set_defaults(func=cmd_metrics)

    tools = sub.add_parser("tools", help="tool registry")
    tsub = tools.add_subparsers(dest="what", required=True)
    tl = tsub.add_parser("list")
    tl.add_argument("--plan", help="include the tools declared in this plan")
    tools.set_defaults(func=cmd_tools)

    gc = sub.add_parser("gc", help="drop superseded payloads")
    gc.set_defaults(func=cmd_gc)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except TissueflowError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
