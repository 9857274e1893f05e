"""Versioned diagnostic criteria and threshold classification.

Criteria live in the dataset store (one Table dataset per version, full
record in the ``criterion`` attribute) so any workflow citing a criterion is
self-contained. Retrieval goes through a small :class:`CriteriaRetriever`
protocol; the local store is one implementation, a networked source could be
another.

Criteria fixture files are tab-separated with columns
``id, version, kind, rule, source_ref``. ``rule`` is
``[lo,hi]label;(lo,hi]label;...`` for banded criteria (``inf`` allowed),
``>=15`` style comparator+threshold for binary ones, and the same with a
``diff`` prefix (``diff<-10``) for comparative ones, whose input is a pair
``(a, b)`` compared as ``a - b``. Lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import json
import math
import operator
import re
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from tissueflow.errors import (
    CriterionError,
    DuplicateVersion,
    KindMismatch,
    NegativeInput,
    NotFound,
    OverlappingBands,
)

KINDS = ("banded", "binary_threshold", "comparative")
COMPARATORS = {">=": operator.ge, ">": operator.gt, "<=": operator.le, "<": operator.lt}


@dataclass(frozen=True)
class Band:
    lower: float
    upper: float
    lower_closed: bool
    upper_closed: bool
    label: str

    def contains(self, x: float) -> bool:
        above = x >= self.lower if self.lower_closed else x > self.lower
        below = x <= self.upper if self.upper_closed else x < self.upper
        return above and below


@dataclass(frozen=True)
class Criterion:
    criterion_id: str
    version: str
    source_ref: str
    kind: str
    bands: tuple[Band, ...] = ()
    threshold: float | None = None
    comparator: str = ">="
    positive_label: str = "yes"
    negative_label: str = "no"
    retrieved_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise CriterionError(f"unknown criterion kind {self.kind!r}")
        if not self.source_ref:
            raise CriterionError(f"{self.criterion_id}: source_ref is required")
        if self.kind == "banded":
            check_bands(self.bands)
        else:
            if self.threshold is None or not math.isfinite(self.threshold):
                raise CriterionError(f"{self.criterion_id}: threshold must be finite")
            if self.comparator not in COMPARATORS:
                raise CriterionError(f"{self.criterion_id}: bad comparator {self.comparator!r}")

    def to_json(self) -> str:
        """JSON of the rule itself; ``retrieved_at`` is kept out so equal rules serialize equally."""
        d = asdict(self)
        del d["retrieved_at"]
        d["bands"] = [[b.lower, b.upper, b.lower_closed, b.upper_closed, b.label]
                      for b in self.bands]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str, retrieved_at: str = "") -> "Criterion":
        d = json.loads(text)
        d["bands"] = tuple(Band(float(lo), float(hi), bool(lc), bool(uc), lab)
                           for lo, hi, lc, uc, lab in d.get("bands", ()))
        if retrieved_at:
            d["retrieved_at"] = retrieved_at
        return cls(**d)


@dataclass(frozen=True)
class Classification:
    label: str
    value: object
    criterion_id: str
    criterion_version: str
    source_ref: str
    flag: bool | None = None
    threshold: float | None = None


def check_bands(bands: Sequence[Band]) -> None:
    """Bands must be non-empty intervals, sorted and pairwise disjoint."""
    if not bands:
        raise CriterionError("banded criterion needs at least one band")
    for b in bands:
        if math.isnan(b.lower) or math.isnan(b.upper) or b.lower > b.upper:
            raise CriterionError(f"band {b.label!r} has bad bounds")
        if b.lower == b.upper and not (b.lower_closed and b.upper_closed):
            raise CriterionError(f"band {b.label!r} is empty")
    for a, b in zip(bands, bands[1:]):
        if b.lower < a.upper or (b.lower == a.upper and a.upper_closed and b.lower_closed):
            raise OverlappingBands(f"bands {a.label!r} and {b.label!r} overlap")
        if b.lower < a.lower:
            raise OverlappingBands("bands must be sorted by lower bound")


def classify_banded(value: float, criterion: Criterion) -> Classification:
    if criterion.kind != "banded":
        raise KindMismatch(f"{criterion.criterion_id} is {criterion.kind}, not banded")
    for band in criterion.bands:
        if band.contains(value):
            return Classification(band.label, value, criterion.criterion_id, criterion.version,
                                  criterion.source_ref)
    raise CriterionError(f"{value} falls outside every band of {criterion.criterion_id}")


def classify_binary_threshold(value, criterion: Criterion) -> Classification:
    """Apply a binary or comparative criterion; the result records its rationale."""
    if criterion.kind == "binary_threshold":
        x = float(value)
    elif criterion.kind == "comparative":
        a, b = value
        x = float(a) - float(b)
    else:
        raise KindMismatch(f"{criterion.criterion_id} is {criterion.kind}")
    flag = bool(COMPARATORS[criterion.comparator](x, criterion.threshold))
    label = criterion.positive_label if flag else criterion.negative_label
    return Classification(label, value, criterion.criterion_id, criterion.version,
                          criterion.source_ref, flag=flag, threshold=criterion.threshold)


# -- bundled criteria ------------------------------------------------------

METASTASIS = Criterion(
    criterion_id="ln_metastasis_size",
    version="1",
    source_ref="AJCC Cancer Staging Manual, 9th ed. (2024): nodal deposit size classes",
    kind="banded",
    bands=(
        Band(0.0, 0.0, True, True, "negative"),
        Band(0.0, 0.2, False, False, "isolated tumor cells"),
        Band(0.2, 2.0, True, True, "micrometastasis"),
        Band(2.0, math.inf, False, False, "macrometastasis"),
    ),
)

LV_HYPERTROPHY = Criterion(
    criterion_id="lv_hypertrophy_wall_thickness",
    version="1",
    source_ref="ACC/AHA hypertrophic cardiomyopathy guideline: max LV wall thickness >= 15 mm at ED",
    kind="binary_threshold",
    threshold=15.0,
    comparator=">=",
    positive_label="hypertrophy",
    negative_label="no hypertrophy",
)

# Fixture only: the cut-off below is NOT a clinical value.
STEATOSIS_FIXTURE = Criterion(
    criterion_id="liver_spleen_attenuation_fixture",
    version="0",
    source_ref="NON-CLINICAL FIXTURE: liver minus spleen attenuation comparison (test value)",
    kind="comparative",
    threshold=-10.0,
    comparator="<",
    positive_label="steatosis",
    negative_label="no steatosis",
)

BUNDLED = (METASTASIS, LV_HYPERTROPHY, STEATOSIS_FIXTURE)


def classify_metastasis(deposit_mm: float, criterion: Criterion = METASTASIS) -> Classification:
    """Nodal deposit size class: negative / ITC / micro / macro."""
    if deposit_mm < 0:
        raise NegativeInput(f"deposit size {deposit_mm} mm is negative")
    return classify_banded(float(deposit_mm), criterion)


def classify_hypertrophy(wt_max_mm: float, criterion: Criterion = LV_HYPERTROPHY
                         ) -> Classification:
    return classify_binary_threshold(wt_max_mm, criterion)


# -- storage and retrieval -------------------------------------------------


def _version_key(version: str):
    parts = re.split(r"[.\-]", version)
    return tuple((0, int(p), "") if p.isdigit() else (1, 0, p) for p in parts)


def _dataset_name(criterion_id: str, version: str) -> str:
    safe = re.sub(r"[^A-Za-z0-9]", "_", f"{criterion_id}__v{version}")
    return f"table_criterion_{safe}"


class CriteriaRetriever(Protocol):
    def fetch(self, criterion_id: str, version: str | None = None) -> Criterion: ...


class CriteriaStore:
    """Local versioned criteria store on top of a dataset :class:`~tissueflow.memory.Store`."""

    def __init__(self, store):
        self.store = store

    def _records(self) -> list[Criterion]:
        out = []
        for info in self.store.list_datasets("table_criterion_*"):
            if "criterion" in info.attrs:
                out.append(Criterion.from_json(info.attrs["criterion"],
                                               info.attrs.get("timestamp", "")))
        return out

    def versions(self, criterion_id: str) -> list[str]:
        vs = [c.version for c in self._records() if c.criterion_id == criterion_id]
        return sorted(vs, key=_version_key)

    def put_criterion(self, c: Criterion, actor: str = "guidelines") -> str:
        c.validate()
        if c.version in self.versions(c.criterion_id):
            raise DuplicateVersion(f"{c.criterion_id} v{c.version} already stored")
        if c.kind == "banded":
            table = np.array([[b.lower, b.upper, b.lower_closed, b.upper_closed]
                              for b in c.bands], dtype=np.float64)
        else:
            table = np.array([[c.threshold]], dtype=np.float64)
        name = _dataset_name(c.criterion_id, c.version)
        self.store.write_array(name, table, attrs={
            "criterion": c.to_json(),
            "criterion_id": c.criterion_id,
            "version": c.version,
            "source_ref": c.source_ref,
            "timestamp": c.retrieved_at,
        }, actor=actor)
        return name

    def ensure(self, c: Criterion, actor: str = "guidelines") -> str:
        """Insert ``c`` unless an identical rule is already stored under its version."""
        if c.version in self.versions(c.criterion_id):
            if self.get_criterion(c.criterion_id, c.version).to_json() != c.to_json():
                raise DuplicateVersion(
                    f"{c.criterion_id} v{c.version} already stored with a different rule")
            return _dataset_name(c.criterion_id, c.version)
        return self.put_criterion(c, actor)

    def get_criterion(self, criterion_id: str, version: str | None = None) -> Criterion:
        matches = [c for c in self._records() if c.criterion_id == criterion_id]
        if version is not None:
            matches = [c for c in matches if c.version == version]
        if not matches:
            suffix = f" v{version}" if version is not None else ""
            raise NotFound(f"criterion {criterion_id}{suffix} not found")
        return max(matches, key=lambda c: _version_key(c.version))

    fetch = get_criterion


def get_criterion(retriever: CriteriaRetriever, criterion_id: str,
                  version: str | None = None) -> Criterion:
    c = retriever.fetch(criterion_id, version)
    c.validate()
    return c


# -- fixture files ---------------------------------------------------------

_BAND_RE = re.compile(r"\s*([\[(])\s*([^,\s]+)\s*,\s*([^\]\)\s]+)\s*([\])])\s*(.+?)\s*$")
_THRESH_RE = re.compile(r"\s*(diff)?\s*(>=|<=|>|<)\s*([-+0-9.eE]+|inf)\s*$")


def parse_rule(kind: str, rule: str):
    if kind == "banded":
        bands = []
        for part in rule.split(";"):
            m = _BAND_RE.fullmatch(part)
            if not m:
                raise CriterionError(f"bad band {part!r}")
            lo_b, lo, hi, hi_b, label = m.groups()
            bands.append(Band(float(lo), float(hi), lo_b == "[", hi_b == "]", label))
        return {"bands": tuple(bands)}
    m = _THRESH_RE.fullmatch(rule)
    if not m:
        raise CriterionError(f"bad threshold rule {rule!r}")
    diff, comp, thr = m.groups()
    if (kind == "comparative") != bool(diff):
        raise KindMismatch(f"rule {rule!r} does not match kind {kind}")
    return {"comparator": comp, "threshold": float(thr)}


def load_criteria_file(path) -> list[Criterion]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) not in (5, 7):
            raise CriterionError(f"{path}:{lineno}: expected 5 or 7 tab-separated columns")
        cid, version, kind, rule, source = cols[:5]
        if kind not in KINDS:
            raise CriterionError(f"{path}:{lineno}: unknown kind {kind!r}")
        extra = {}
        if len(cols) == 7:
            extra = {"positive_label": cols[5], "negative_label": cols[6]}
        c = Criterion(cid, version, source, kind, **parse_rule(kind, rule), **extra)
        c.validate()
        out.append(c)
    return out
