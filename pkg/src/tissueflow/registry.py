"""Tool factory: model cards, capability lookup and pairwise dependency edges."""

from __future__ import annotations

import enum
import json
import re
import shlex
import shutil
import threading
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from typing import Callable, Iterable

from tissueflow.errors import (
    DuplicateTool,
    InvalidCard,
    NoCandidates,
    NotFound,
    UnknownTool,
    UnsatisfiedDependency,
)

REGISTRY_DATASET = "registry_toolcards"

_SEMVER = re.compile(r"(\d+)\.(\d+)\.(\d+)(?:[-+].*)?")


class Capability(str, enum.Enum):
    SEGMENTATION = "segmentation"
    CLASSIFICATION = "classification"
    MEASUREMENT = "measurement"
    ANALYSIS = "analysis"


class Modality(str, enum.Enum):
    PATHOLOGY = "pathology"
    RADIOLOGY = "radiology"
    OMICS = "omics"
    GENERIC = "generic"


def _semver_key(version: str) -> tuple[int, int, int]:
    m = _SEMVER.fullmatch(version)
    return (int(m.group(1)), int(m.group(2)), int(m.group(3))) if m else (-1, -1, -1)


@dataclass(frozen=True)
class ToolCard:
    """Declarative description of a tool.

    ``inputs``/``outputs`` are ``(dataset name pattern, rank)`` pairs.
    ``runner`` is either ``"builtin:<name>"`` or an external command line.
    """

    tool_id: str
    version: str
    capability: Capability
    modality: Modality = Modality.GENERIC
    inputs: tuple[tuple[str, int], ...] = ()
    outputs: tuple[tuple[str, int], ...] = ()
    depends_on: tuple[Capability, ...] = ()
    perf_score: float = 0.5
    runner: str = ""

    @property
    def key(self) -> tuple[str, str]:
        return (self.tool_id, self.version)

    @property
    def is_builtin(self) -> bool:
        return self.runner.startswith("builtin:")

    @property
    def builtin_name(self) -> str:
        return self.runner.split(":", 1)[1]

    def command(self) -> list[str]:
        return shlex.split(self.runner)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["capability"] = self.capability.value
        d["modality"] = self.modality.value
        d["depends_on"] = [c.value for c in self.depends_on]
        d["inputs"] = [list(p) for p in self.inputs]
        d["outputs"] = [list(p) for p in self.outputs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToolCard":
        known = {"tool_id", "version", "capability", "modality", "inputs", "outputs",
                 "depends_on", "perf_score", "runner"}
        extra = set(d) - known
        if extra:
            raise InvalidCard(f"unknown tool card keys: {sorted(extra)}")
        try:
            return cls(
                tool_id=d["tool_id"],
                version=d.get("version", "0.1.0"),
                capability=Capability(d["capability"]),
                modality=Modality(d.get("modality", "generic")),
                inputs=tuple((str(p), int(r)) for p, r in d.get("inputs", ())),
                outputs=tuple((str(p), int(r)) for p, r in d.get("outputs", ())),
                depends_on=tuple(Capability(c) for c in d.get("depends_on", ())),
                perf_score=float(d.get("perf_score", 0.5)),
                runner=d.get("runner", ""),
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidCard(f"bad tool card {d.get('tool_id', '?')!r}: {exc}") from exc


@dataclass(frozen=True)
class CandidatePool:
    capability: Capability
    modality: Modality
    members: tuple[str, ...]
    retrieved_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    @property
    def context(self) -> str:
        return f"{self.capability.value}/{self.modality.value}"


def default_runner_check(runner: str) -> bool:
    if runner.startswith("builtin:"):
        from tissueflow.plugins import BUILTINS
        return runner.split(":", 1)[1] in BUILTINS
    argv = shlex.split(runner)
    return bool(argv) and shutil.which(argv[0]) is not None


class ToolRegistry:
    """In-memory tool factory. Lookups are lock-free; registrations are serialized."""

    def __init__(self, runner_check: Callable[[str], bool] = default_runner_check):
        self._cards: dict[tuple[str, str], ToolCard] = {}
        self._lock = threading.Lock()
        self._runner_check = runner_check

    def __len__(self) -> int:
        return len(self._cards)

    def __iter__(self):
        return iter(sorted(self._cards.values(), key=lambda c: (c.tool_id, _semver_key(c.version))))

    def validate(self, card: ToolCard) -> None:
        if not card.tool_id:
            raise InvalidCard("empty tool_id")
        if not _SEMVER.fullmatch(card.version):
            raise InvalidCard(f"{card.tool_id}: version {card.version!r} is not semver")
        if not isinstance(card.capability, Capability):
            raise InvalidCard(f"{card.tool_id}: capability must be a Capability")
        if not all(isinstance(c, Capability) for c in card.depends_on):
            raise InvalidCard(f"{card.tool_id}: depends_on must name capability kinds")
        if not (0.0 <= card.perf_score <= 1.0):
            raise InvalidCard(f"{card.tool_id}: perf_score {card.perf_score} outside [0, 1]")
        if not self._runner_check(card.runner):
            raise InvalidCard(f"{card.tool_id}: runner {card.runner!r} not resolvable")

    def register_tool(self, card: ToolCard) -> tuple[str, str]:
        self.validate(card)
        with self._lock:
            if card.key in self._cards:
                raise DuplicateTool(f"{card.tool_id} {card.version} already registered")
            self._cards[card.key] = card
        return card.key

    def get(self, tool_id: str, version: str | None = None) -> ToolCard:
        if version is not None:
            try:
                return self._cards[(tool_id, version)]
            except KeyError:
                raise UnknownTool(f"{tool_id} {version} not registered") from None
        matches = [c for c in self._cards.values() if c.tool_id == tool_id]
        if not matches:
            raise UnknownTool(f"{tool_id} not registered")
        return max(matches, key=lambda c: _semver_key(c.version))

    def __contains__(self, tool_id: str) -> bool:
        return any(c.tool_id == tool_id for c in self._cards.values())

    def lookup_candidates(self, capability: Capability, modality: Modality = Modality.GENERIC
                          ) -> CandidatePool:
        capability = Capability(capability)
        modality = Modality(modality)
        best: dict[str, ToolCard] = {}
        for card in self._cards.values():
            if card.capability != capability:
                continue
            if not (modality == Modality.GENERIC or card.modality in (Modality.GENERIC, modality)):
                continue
            cur = best.get(card.tool_id)
            if cur is None or _semver_key(card.version) > _semver_key(cur.version):
                best[card.tool_id] = card
        if not best:
            raise NoCandidates(f"no {capability.value} tools for {modality.value}")
        ordered = sorted(best.values(), key=lambda c: (-c.perf_score, c.tool_id))
        return CandidatePool(capability, modality, tuple(c.tool_id for c in ordered))

    def aggregate_capability(self) -> float:
        return sum(c.perf_score for c in self._cards.values())

    def update_score(self, tool_id: str, score: float) -> None:
        """Set the perf score of every registered version of ``tool_id``."""
        if not 0.0 <= score <= 1.0:
            raise InvalidCard(f"perf_score {score} outside [0, 1]")
        with self._lock:
            hits = [k for k in self._cards if k[0] == tool_id]
            if not hits:
                raise UnknownTool(f"{tool_id} not registered")
            for k in hits:
                self._cards[k] = replace(self._cards[k], perf_score=score)

    # -- persistence -----------------------------------------------------

    def save(self, store, actor: str = "registry") -> None:
        doc = json.dumps([c.to_dict() for c in self], sort_keys=True).encode()
        store.write_dataset(REGISTRY_DATASET, "u8", (len(doc),), doc,
                            attrs={"format": "json"}, actor=actor)

    @classmethod
    def load(cls, store, runner_check: Callable[[str], bool] = default_runner_check
             ) -> "ToolRegistry":
        reg = cls(runner_check=runner_check)
        try:
            doc = store.read_dataset(REGISTRY_DATASET).payload
        except NotFound:
            return reg
        for d in json.loads(doc):
            reg.register_tool(ToolCard.from_dict(d))
        return reg


def dependency_edges(selected: Iterable[ToolCard]) -> list[tuple[str, str]]:
    """Edges ``(provider -> dependent)`` implied by capability-kind dependencies."""
    selected = list(selected)
    if not selected:
        raise ValueError("selected must be nonempty")
    edges = set()
    for card in selected:
        for kind in card.depends_on:
            providers = [d for d in selected if d.capability == kind and d.tool_id != card.tool_id]
            if not providers:
                raise UnsatisfiedDependency(
                    f"{card.tool_id} needs a {kind.value} tool, none selected")
            edges.update((d.tool_id, card.tool_id) for d in providers)
    return sorted(edges)
