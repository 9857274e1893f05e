"""Plan documents: JSON files declaring tools, task nodes, edges and criteria imports.

A plan is what a planner (a person today) hands to the scheduler::

    {
      "tools":    [ <tool card>, ... ],
      "nodes":    [ {"id", "tool", "params", "inputs", "outputs"}, ... ],
      "edges":    [ ["upstream_id", "downstream_id"], ... ],
      "criteria": [ "criteria.tsv", ... ]
    }

Only ``nodes`` is required. Unknown keys are errors. Every builtin runner is
pre-registered under its own name at version 1.0.0, so plans only list
extra tools. In a tool ``runner``, ``{python}`` expands to the current
interpreter and ``{plan_dir}`` to the plan's directory. Edges implied by
tool ``depends_on`` declarations are added to the explicit ones.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, replace
from pathlib import Path

from tissueflow import guidelines
from tissueflow.errors import InvalidCard, InvalidPlan
from tissueflow.plugins import BUILTIN_CAPABILITY, BUILTINS
from tissueflow.registry import Capability, ToolCard, ToolRegistry, dependency_edges
from tissueflow.scheduler import TaskNode, WorkflowPlan

PLAN_KEYS = {"tools", "nodes", "edges", "criteria"}
NODE_KEYS = {"id", "tool", "params", "inputs", "outputs"}


def builtin_registry() -> ToolRegistry:
    reg = ToolRegistry()
    for name in sorted(BUILTINS):
        reg.register_tool(ToolCard(tool_id=name, version="1.0.0",
                                   capability=Capability(BUILTIN_CAPABILITY[name]),
                                   runner=f"builtin:{name}"))
    return reg


@dataclass(frozen=True)
class PlanDocument:
    tools: tuple[ToolCard, ...]
    nodes: tuple[TaskNode, ...]
    edges: tuple[tuple[str, str], ...]
    criteria: tuple[Path, ...]

    def registry(self) -> ToolRegistry:
        reg = builtin_registry()
        for card in self.tools:
            reg.register_tool(card)
        return reg

    def workflow(self, registry: ToolRegistry) -> WorkflowPlan:
        """Nodes plus explicit edges plus edges lifted from tool dependencies."""
        edges = set(self.edges)
        used = sorted({n.tool_id for n in self.nodes if n.tool_id in registry})
        if used:
            users: dict[str, list[str]] = {}
            for n in self.nodes:
                users.setdefault(n.tool_id, []).append(n.node_id)
            for provider, dependent in dependency_edges(registry.get(t) for t in used):
                for u in users[provider]:
                    for v in users[dependent]:
                        edges.add((u, v))
        return WorkflowPlan(self.nodes, tuple(sorted(edges)))

    def load_criteria(self) -> list[guidelines.Criterion]:
        out = []
        for path in self.criteria:
            out.extend(guidelines.load_criteria_file(path))
        return out


def _names(value, where: str) -> tuple[str, ...]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise InvalidPlan(f"{where} must be a list of strings")
    return tuple(value)


def parse_plan(doc: dict, base_dir: Path = Path(".")) -> PlanDocument:
    if not isinstance(doc, dict):
        raise InvalidPlan("plan must be a JSON object")
    unknown = set(doc) - PLAN_KEYS
    if unknown:
        raise InvalidPlan(f"unknown plan keys: {sorted(unknown)}")
    if "nodes" not in doc:
        raise InvalidPlan("plan has no nodes")

    tools = []
    for d in doc.get("tools", []):
        if not isinstance(d, dict):
            raise InvalidPlan("each tool must be an object")
        try:
            card = ToolCard.from_dict(d)
        except InvalidCard as exc:
            raise InvalidPlan(str(exc)) from exc
        runner = card.runner.replace("{python}", sys.executable)
        runner = runner.replace("{plan_dir}", str(base_dir))
        tools.append(replace(card, runner=runner))

    nodes = []
    for d in doc["nodes"]:
        if not isinstance(d, dict):
            raise InvalidPlan("each node must be an object")
        unknown = set(d) - NODE_KEYS
        if unknown:
            raise InvalidPlan(f"node {d.get('id', '?')!r}: unknown keys {sorted(unknown)}")
        if not isinstance(d.get("id"), str) or not isinstance(d.get("tool"), str):
            raise InvalidPlan("every node needs string 'id' and 'tool'")
        params = d.get("params", {})
        if not isinstance(params, dict):
            raise InvalidPlan(f"node {d['id']}: params must be an object")
        nodes.append(TaskNode(d["id"], d["tool"], params,
                              _names(d.get("inputs", []), f"node {d['id']} inputs"),
                              _names(d.get("outputs", []), f"node {d['id']} outputs")))

    edges = []
    for e in doc.get("edges", []):
        if not (isinstance(e, list) and len(e) == 2 and all(isinstance(v, str) for v in e)):
            raise InvalidPlan(f"edge {e!r} must be a pair of node ids")
        edges.append((e[0], e[1]))

    criteria = tuple(base_dir / p for p in _names(doc.get("criteria", []), "criteria"))
    return PlanDocument(tuple(tools), tuple(nodes), tuple(edges), criteria)


def load_plan(path) -> PlanDocument:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise InvalidPlan(f"cannot read plan {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidPlan(f"{path}: invalid JSON: {exc}") from exc
    return parse_plan(doc, path.resolve().parent)
