import dataclasses
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import DATA
from tissueflow.errors import (
    CriterionError,
    DuplicateVersion,
    KindMismatch,
    NegativeInput,
    NotFound,
    OverlappingBands,
)
from tissueflow.guidelines import (
    BUNDLED,
    LV_HYPERTROPHY,
    METASTASIS,
    STEATOSIS_FIXTURE,
    Band,
    CriteriaStore,
    Criterion,
    classify_banded,
    classify_binary_threshold,
    classify_hypertrophy,
    classify_metastasis,
    get_criterion,
    load_criteria_file,
    parse_rule,
)
from tissueflow.memory import open_store

ORDER = ["negative", "isolated tumor cells", "micrometastasis", "macrometastasis"]


def linear_scan(value, bands):
    hits = [b.label for b in bands
            if (value >= b.lower if b.lower_closed else value > b.lower)
            and (value <= b.upper if b.upper_closed else value < b.upper)]
    return hits


@pytest.mark.parametrize("mm,label", [
    (2.5, "macrometastasis"),
    (2.0, "micrometastasis"),
    (0.2, "micrometastasis"),
    (0.1, "isolated tumor cells"),
    (0.0, "negative"),
])
def test_metastasis_thresholds(mm, label):
    c = classify_metastasis(mm)
    assert c.label == label
    assert c.criterion_id == "ln_metastasis_size" and c.criterion_version == "1"
    assert c.source_ref


def test_metastasis_negative_input():
    with pytest.raises(NegativeInput):
        classify_metastasis(-0.01)


@given(st.floats(0, 50, allow_nan=False), st.floats(0, 50, allow_nan=False))
def test_metastasis_monotone(a, b):
    lo, hi = sorted((a, b))
    assert ORDER.index(classify_metastasis(lo).label) <= ORDER.index(classify_metastasis(hi).label)


@given(st.floats(0, 10, allow_nan=False))
def test_banded_matches_linear_scan(x):
    hits = linear_scan(x, METASTASIS.bands)
    assert len(hits) == 1
    assert classify_banded(x, METASTASIS).label == hits[0]


def test_hypertrophy_threshold():
    assert classify_hypertrophy(15.0).flag is True
    assert classify_hypertrophy(14.999).label == "no hypertrophy"
    r = classify_hypertrophy(16.2)
    assert r.label == "hypertrophy" and r.threshold == 15.0 and r.source_ref


def test_comparative_fixture():
    assert classify_binary_threshold((40.0, 55.0), STEATOSIS_FIXTURE).label == "steatosis"
    assert classify_binary_threshold((50.0, 55.0), STEATOSIS_FIXTURE).flag is False
    assert "NON-CLINICAL" in STEATOSIS_FIXTURE.source_ref


def test_kind_mismatch():
    with pytest.raises(KindMismatch):
        classify_binary_threshold(3.0, METASTASIS)
    with pytest.raises(KindMismatch):
        classify_banded(3.0, LV_HYPERTROPHY)


def test_value_outside_every_band():
    c = Criterion("x", "1", "ref", "banded", bands=(Band(0, 1, True, True, "a"),))
    with pytest.raises(CriterionError):
        classify_banded(2.0, c)


@pytest.mark.parametrize("bands,exc", [
    ((), CriterionError),
    ((Band(1, 0, True, True, "a"),), CriterionError),
    ((Band(0, 0, True, False, "a"),), CriterionError),
    ((Band(0, 1, True, True, "a"), Band(1, 2, True, True, "b")), OverlappingBands),
    ((Band(0, 2, True, False, "a"), Band(1, 3, True, True, "b")), OverlappingBands),
    ((Band(5, 6, True, True, "a"), Band(0, 1, True, True, "b")), OverlappingBands),
])
def test_bad_bands(bands, exc):
    with pytest.raises(exc):
        Criterion("x", "1", "ref", "banded", bands=bands).validate()


def test_validation_requires_source_and_threshold():
    with pytest.raises(CriterionError):
        dataclasses.replace(LV_HYPERTROPHY, source_ref="").validate()
    with pytest.raises(CriterionError):
        dataclasses.replace(LV_HYPERTROPHY, threshold=math.nan).validate()
    with pytest.raises(CriterionError):
        dataclasses.replace(LV_HYPERTROPHY, comparator="==").validate()
    with pytest.raises(CriterionError):
        dataclasses.replace(LV_HYPERTROPHY, kind="fuzzy").validate()


def test_every_bundled_criterion_is_valid():
    for c in BUNDLED:
        c.validate()
        assert Criterion.from_json(c.to_json(), c.retrieved_at) == c


def test_store_versions_and_latest(store):
    cs = CriteriaStore(store)
    cs.put_criterion(METASTASIS)
    v2 = dataclasses.replace(METASTASIS, version="2", source_ref="revised")
    cs.put_criterion(v2)
    assert cs.versions("ln_metastasis_size") == ["1", "2"]
    assert cs.get_criterion("ln_metastasis_size").version == "2"
    assert cs.get_criterion("ln_metastasis_size", "1").source_ref == METASTASIS.source_ref
    with pytest.raises(DuplicateVersion):
        cs.put_criterion(METASTASIS)
    with pytest.raises(NotFound):
        cs.get_criterion("ln_metastasis_size", "9")
    with pytest.raises(NotFound):
        cs.get_criterion("nothing")


def test_version_ordering_is_numeric(store):
    cs = CriteriaStore(store)
    for v in ("2", "10", "9"):
        cs.put_criterion(dataclasses.replace(LV_HYPERTROPHY, version=v))
    assert cs.versions(LV_HYPERTROPHY.criterion_id) == ["2", "9", "10"]
    assert cs.get_criterion(LV_HYPERTROPHY.criterion_id).version == "10"


def test_ensure_is_idempotent(store):
    cs = CriteriaStore(store)
    cs.ensure(METASTASIS)
    seq = store.journal_seq
    cs.ensure(dataclasses.replace(METASTASIS, retrieved_at="later"))
    assert store.journal_seq == seq
    with pytest.raises(DuplicateVersion):
        cs.ensure(dataclasses.replace(METASTASIS, source_ref="changed"))


def test_criteria_persist_across_reopen(tmp_path):
    with open_store(tmp_path / "s") as s:
        CriteriaStore(s).put_criterion(METASTASIS)
    with open_store(tmp_path / "s", readonly=True) as s:
        got = CriteriaStore(s).get_criterion("ln_metastasis_size")
    assert got == METASTASIS
    assert classify_metastasis(1.0, got).source_ref == METASTASIS.source_ref


class StubRemote:
    """Stands in for a remote guideline service; same fetch contract as the local store."""

    def __init__(self, criteria):
        self.criteria = {(c.criterion_id, c.version): c for c in criteria}
        self.calls = 0

    def fetch(self, criterion_id, version=None):
        self.calls += 1
        keys = [k for k in self.criteria if k[0] == criterion_id and version in (None, k[1])]
        if not keys:
            raise NotFound(criterion_id)
        return self.criteria[max(keys, key=lambda k: int(k[1]))]


def test_local_and_remote_retrievers_agree(store):
    cs = CriteriaStore(store)
    for c in BUNDLED:
        cs.put_criterion(c)
    remote = StubRemote(BUNDLED)
    for c in BUNDLED:
        assert get_criterion(cs, c.criterion_id) == get_criterion(remote, c.criterion_id)
    assert remote.calls == len(BUNDLED)
    with pytest.raises(NotFound):
        get_criterion(remote, "unknown")


@given(st.floats(0, 100, allow_nan=False))
def test_classification_always_carries_source(x):
    for c in (classify_metastasis(x), classify_hypertrophy(x)):
        assert c.source_ref and c.criterion_id and c.criterion_version


def test_load_bundled_tsv_matches_constants():
    loaded = load_criteria_file(DATA / "criteria.tsv")
    assert [c.to_json() for c in loaded] == [c.to_json() for c in BUNDLED]


def test_parse_rule_errors(tmp_path):
    assert parse_rule("binary_threshold", ">=15") == {"comparator": ">=", "threshold": 15.0}
    with pytest.raises(CriterionError):
        parse_rule("banded", "0-1 small")
    with pytest.raises(KindMismatch):
        parse_rule("comparative", ">=15")
    bad = tmp_path / "c.tsv"
    bad.write_text("a\t1\tbanded\n")
    with pytest.raises(CriterionError):
        load_criteria_file(bad)
