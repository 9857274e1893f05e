"""Plan compilation and wave-parallel execution (Kahn's algorithm)."""

from __future__ import annotations

import enum
import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from types import MappingProxyType
from typing import Callable, Iterable, Mapping

from tissueflow.errors import (
    CycleDetected,
    InvalidPlan,
    MissingInput,
    NodeExecutionFailed,
    Stalled,
    StoreError,
    StoreUnavailable,
    UnknownTool,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaskNode:
    node_id: str
    tool_id: str
    params: Mapping = field(default_factory=dict)
    input_names: tuple[str, ...] = ()
    output_names: tuple[str, ...] = ()


@dataclass(frozen=True)
class WorkflowPlan:
    nodes: tuple[TaskNode, ...]
    edges: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class TaskGraph:
    """Compiled, immutable DAG. ``in_degree`` holds the initial counts d(v)."""

    nodes: Mapping[str, TaskNode]
    successors: Mapping[str, tuple[str, ...]]
    predecessors: Mapping[str, tuple[str, ...]]
    in_degree: Mapping[str, int]

    @property
    def edge_count(self) -> int:
        return sum(len(s) for s in self.successors.values())

    def edges(self) -> list[tuple[str, str]]:
        return [(u, v) for u in sorted(self.successors) for v in self.successors[u]]

    def cursor(self) -> "WaveCursor":
        return WaveCursor(self)

    def waves(self) -> list[list[str]]:
        cur = self.cursor()
        out = []
        while not cur.exhausted:
            out.append(sorted(next_wave(cur)))
        return out


class WaveCursor:
    """Mutable in-degree state for iterating a graph wave by wave."""

    def __init__(self, graph: TaskGraph):
        self.graph = graph
        self.remaining = dict(graph.in_degree)
        self.decrements = 0

    @property
    def exhausted(self) -> bool:
        return not self.remaining


def next_wave(cursor: WaveCursor) -> frozenset[str]:
    """Pop every zero in-degree node and decrement its successors."""
    if not cursor.remaining:
        return frozenset()
    wave = frozenset(v for v, d in cursor.remaining.items() if d == 0)
    if not wave:
        raise Stalled(f"no ready node among {sorted(cursor.remaining)}")
    for v in wave:
        del cursor.remaining[v]
    for v in sorted(wave):
        for u in cursor.graph.successors[v]:
            cursor.remaining[u] -= 1
            cursor.decrements += 1
    return wave


def _find_cycle(nodes: Iterable[str], succ: Mapping[str, list[str]]) -> list[str]:
    color = {v: 0 for v in nodes}
    parent: dict[str, str] = {}
    for root in sorted(color):
        if color[root]:
            continue
        stack = [(root, iter(sorted(succ[root])))]
        color[root] = 1
        while stack:
            v, it = stack[-1]
            for u in it:
                if color[u] == 0:
                    color[u] = 1
                    parent[u] = v
                    stack.append((u, iter(sorted(succ[u]))))
                    break
                if color[u] == 1:
                    cycle = [v]
                    while cycle[-1] != u:
                        cycle.append(parent[cycle[-1]])
                    cycle.reverse()
                    return cycle + [u]
            else:
                color[v] = 2
                stack.pop()
    return []


def compile_plan(plan: WorkflowPlan, registry=None, store=None) -> TaskGraph:
    """Validate ``plan`` and build a :class:`TaskGraph`.

    Each node input must be written by an ancestor node or already exist in
    ``store``. Tool ids are checked against ``registry`` when one is given.
    """
    nodes: dict[str, TaskNode] = {}
    for n in plan.nodes:
        if n.node_id in nodes:
            raise InvalidPlan(f"duplicate node id {n.node_id!r}")
        nodes[n.node_id] = n
    producer: dict[str, str] = {}
    for n in plan.nodes:
        for out in n.output_names:
            if out in producer:
                raise InvalidPlan(f"{out!r} written by both {producer[out]} and {n.node_id}")
            producer[out] = n.node_id
    if registry is not None:
        for n in plan.nodes:
            if n.tool_id not in registry:
                raise UnknownTool(f"node {n.node_id}: tool {n.tool_id!r} not registered")

    succ: dict[str, set[str]] = {v: set() for v in nodes}
    for u, v in plan.edges:
        if u not in nodes or v not in nodes:
            raise InvalidPlan(f"edge {u}->{v} references an unknown node")
        if u == v:
            raise CycleDetected([u, u])
        succ[u].add(v)
    succ_sorted = {v: sorted(s) for v, s in succ.items()}
    cycle = _find_cycle(nodes, succ_sorted)
    if cycle:
        raise CycleDetected(cycle)

    pred: dict[str, list[str]] = {v: [] for v in nodes}
    for u, vs in succ_sorted.items():
        for v in vs:
            pred[v].append(u)
    graph = TaskGraph(
        nodes=MappingProxyType(nodes),
        successors=MappingProxyType({v: tuple(s) for v, s in succ_sorted.items()}),
        predecessors=MappingProxyType({v: tuple(sorted(p)) for v, p in pred.items()}),
        in_degree=MappingProxyType({v: len(p) for v, p in pred.items()}),
    )

    for n in plan.nodes:
        anc = ancestors(graph, n.node_id)
        for name in n.input_names:
            src = producer.get(name)
            if src is not None and src in anc:
                continue
            if store is not None and name in store:
                continue
            if src is not None:
                raise MissingInput(
                    f"node {n.node_id} reads {name!r} from {src}, which is not upstream of it")
            raise MissingInput(f"node {n.node_id} reads {name!r}: no producer and not in store")
    return graph


def ancestors(graph: TaskGraph, node_id: str) -> set[str]:
    seen: set[str] = set()
    stack = list(graph.predecessors[node_id])
    while stack:
        v = stack.pop()
        if v not in seen:
            seen.add(v)
            stack.extend(graph.predecessors[v])
    return seen


def critical_path(graph: TaskGraph, cost: Mapping[str, float] | None = None
                  ) -> tuple[float, list[str]]:
    """Longest total-cost path. Unit costs when ``cost`` is None."""
    if not graph.nodes:
        return 0.0, []
    best: dict[str, float] = {}
    via: dict[str, str | None] = {}
    for wave in graph.waves():
        for v in wave:
            c = 1.0 if cost is None else float(cost[v])
            prev = None
            top = 0.0
            for p in graph.predecessors[v]:
                if prev is None or best[p] > top:
                    top, prev = best[p], p
            best[v] = top + c
            via[v] = prev
    end = max(sorted(best), key=lambda v: best[v])
    path = [end]
    while via[path[-1]] is not None:
        path.append(via[path[-1]])
    return best[end], path[::-1]


# -- execution ---------------------------------------------------------------


class NodeStatus(str, enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    DONE = "done"
    FAILED = "failed"
    SKIPPED = "skipped"


def _now() -> datetime:
    return datetime.now(timezone.utc)


@dataclass
class NodeRun:
    node_id: str
    status: NodeStatus = NodeStatus.PENDING
    wave: int = -1
    start: datetime | None = None
    end: datetime | None = None
    error: str = ""
    outputs: tuple[str, ...] = ()
    crashed: bool = False

    @property
    def duration(self) -> float:
        if self.start is None or self.end is None:
            return 0.0
        return (self.end - self.start).total_seconds()


@dataclass
class RunRecord:
    nodes: dict[str, NodeRun]
    events: list[dict] = field(default_factory=list)
    outcome: str = "pending"
    wall_time: float = 0.0
    decrements: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def log(self, node_id: str, event: str, **extra) -> None:
        rec = {"timestamp": _now().isoformat(), "node_id": node_id, "event": event, **extra}
        with self._lock:
            self.events.append(rec)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    def failed(self) -> list[str]:
        return sorted(n for n, r in self.nodes.items() if r.status == NodeStatus.FAILED)

    def summary_lines(self) -> list[str]:
        lines = []
        for nid in sorted(self.nodes, key=lambda n: (self.nodes[n].wave, n)):
            r = self.nodes[nid]
            line = f"{nid}\t{r.status.value}\twave={r.wave}\t{r.duration:.3f}s"
            if r.error:
                line += f"\t{r.error}"
            lines.append(line)
        return lines


class InlineExecutor:
    """Runs wave members one after another in the calling thread."""

    workers = 1

    def map(self, fn: Callable, items: list) -> list:
        return [fn(x) for x in items]

    def close(self) -> None:
        pass


class PoolExecutor:
    """Runs wave members concurrently on a bounded thread pool."""

    def __init__(self, workers: int = 4):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        self.workers = workers
        self._pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="tf-node")

    def map(self, fn: Callable, items: list) -> list:
        return list(self._pool.map(fn, items))

    def close(self) -> None:
        self._pool.shutdown(wait=True)


class RemoteExecutor:
    """Placeholder for multi-server dispatch; not implemented."""

    def __init__(self, endpoints: list[str]):
        self.endpoints = endpoints

    def map(self, fn: Callable, items: list) -> list:
        raise NotImplementedError("remote execution is not supported")

    def close(self) -> None:
        pass


def make_executor(spec: str):
    """Parse ``inline`` or ``pool=K``."""
    if spec == "inline":
        return InlineExecutor()
    if spec.startswith("pool"):
        _, _, k = spec.partition("=")
        return PoolExecutor(int(k) if k else 4)
    raise ValueError(f"unknown executor {spec!r}; use inline or pool=K")


NodeRunner = Callable[[TaskNode, object], Iterable[str]]


def execute_plan(graph: TaskGraph, executor, store, runner: NodeRunner) -> RunRecord:
    """Execute ``graph`` wave by wave.

    ``runner(node, store)`` runs one node and returns the dataset names it
    wrote. A raised exception fails that node; its descendants are skipped and
    unrelated branches continue. Store errors abort the run.
    """
    if store is None:
        raise StoreUnavailable("execute_plan needs an open store")
    record = RunRecord(nodes={v: NodeRun(v) for v in graph.nodes})
    t0 = time.perf_counter()
    cursor = graph.cursor()
    blocked: set[str] = set()
    wave_idx = 0
    while not cursor.exhausted:
        wave = sorted(next_wave(cursor))
        to_run = []
        for v in wave:
            rec = record.nodes[v]
            rec.wave = wave_idx
            if v in blocked:
                rec.status = NodeStatus.SKIPPED
                rec.error = "upstream failure"
                record.log(v, "skipped")
                blocked.update(graph.successors[v])
            else:
                to_run.append(v)

        def run_one(v: str):
            rec = record.nodes[v]
            rec.status = NodeStatus.RUNNING
            rec.start = _now()
            record.log(v, "start", wave=rec.wave)
            try:
                written = tuple(runner(graph.nodes[v], store) or ())
            except StoreError as exc:
                rec.end = _now()
                rec.status = NodeStatus.FAILED
                rec.error = str(exc)
                return exc
            except Exception as exc:  # noqa: BLE001 - node failures are data, not control flow
                rec.end = _now()
                rec.status = NodeStatus.FAILED
                rec.error = f"{type(exc).__name__}: {exc}"
                rec.crashed = getattr(exc, "exit_code", 0) == 5
                record.log(v, "failed", error=rec.error)
                logger.warning("node %s failed: %s", v, rec.error)
                return NodeExecutionFailed(v, rec.error)
            rec.end = _now()
            rec.outputs = written
            rec.status = NodeStatus.DONE
            record.log(v, "done", outputs=list(written))
            return None

        results = executor.map(run_one, to_run)
        for v, res in zip(to_run, results):
            if isinstance(res, StoreError):
                record.outcome = "aborted"
                record.wall_time = time.perf_counter() - t0
                raise res
            if res is not None:
                blocked.update(graph.successors[v])
        wave_idx += 1

    record.wall_time = time.perf_counter() - t0
    record.decrements = cursor.decrements
    statuses = [r.status for r in record.nodes.values()]
    if all(s == NodeStatus.DONE for s in statuses):
        record.outcome = "success"
    elif any(s == NodeStatus.DONE for s in statuses):
        record.outcome = "partial"
    else:
        record.outcome = "failed"
    return record
