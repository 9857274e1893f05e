import pytest
from hypothesis import given
from hypothesis import strategies as st

from tissueflow.errors import (
    DuplicateTool,
    InvalidCard,
    NoCandidates,
    UnknownTool,
    UnsatisfiedDependency,
)
from tissueflow.registry import (
    Capability,
    Modality,
    ToolCard,
    ToolRegistry,
    dependency_edges,
)

SEG = Capability.SEGMENTATION
CLS = Capability.CLASSIFICATION


def card(tool_id, cap=SEG, score=0.5, version="1.0.0", modality=Modality.GENERIC, deps=()):
    return ToolCard(tool_id, version, cap, modality, depends_on=tuple(deps), perf_score=score,
                    runner="builtin:echo")


def test_register_and_lookup():
    reg = ToolRegistry()
    reg.register_tool(card("seg-mock", score=0.8))
    assert len(reg.lookup_candidates(SEG).members) == 1


def test_duplicate_and_invalid():
    reg = ToolRegistry()
    reg.register_tool(card("a"))
    with pytest.raises(DuplicateTool):
        reg.register_tool(card("a"))
    reg.register_tool(card("a", version="1.1.0"))
    with pytest.raises(InvalidCard):
        reg.register_tool(card("b", score=1.3))
    with pytest.raises(InvalidCard):
        reg.register_tool(card("c", version="one"))
    with pytest.raises(InvalidCard):
        reg.register_tool(ToolCard("d", "1.0.0", SEG, runner="no-such-binary-xyz --flag"))


def test_candidate_order_score_then_id():
    reg = ToolRegistry()
    for tid, s in [("s_c", 0.8), ("s_top", 0.9), ("s_a", 0.8)]:
        reg.register_tool(card(tid, score=s))
    assert reg.lookup_candidates(SEG).members == ("s_top", "s_a", "s_c")


def test_no_candidates():
    with pytest.raises(NoCandidates):
        ToolRegistry().lookup_candidates(CLS)


def test_generic_modality_matches_everything():
    reg = ToolRegistry()
    reg.register_tool(card("gen"))
    reg.register_tool(card("rad", modality=Modality.RADIOLOGY))
    reg.register_tool(card("path", modality=Modality.PATHOLOGY))
    assert set(reg.lookup_candidates(SEG, Modality.PATHOLOGY).members) == {"gen", "path"}
    assert set(reg.lookup_candidates(SEG, Modality.GENERIC).members) == {"gen", "rad", "path"}


def test_latest_version_per_tool():
    reg = ToolRegistry()
    reg.register_tool(card("a", version="1.2.0", score=0.1))
    reg.register_tool(card("a", version="1.10.0", score=0.9))
    assert reg.get("a").version == "1.10.0"
    assert reg.lookup_candidates(SEG).members == ("a",)
    with pytest.raises(UnknownTool):
        reg.get("zzz")


def test_dependency_edges():
    seg = card("seg")
    cls = card("cls", CLS, deps=[SEG])
    assert dependency_edges([seg, cls]) == [("seg", "cls")]
    assert dependency_edges([seg]) == []
    with pytest.raises(UnsatisfiedDependency):
        dependency_edges([cls])


def test_aggregate_capability():
    reg = ToolRegistry()
    assert reg.aggregate_capability() == 0.0
    reg.register_tool(card("a", score=0.8))
    reg.register_tool(card("b", score=0.6))
    assert reg.aggregate_capability() == pytest.approx(1.4)


@given(st.lists(st.tuples(st.sampled_from("abcdef"), st.sampled_from(["1.0.0", "2.0.0"]),
                          st.floats(0, 1)), max_size=15))
def test_capability_monotone(seq):
    reg = ToolRegistry()
    prev = reg.aggregate_capability()
    for tid, ver, score in seq:
        try:
            reg.register_tool(card(tid, version=ver, score=score))
        except DuplicateTool:
            pass
        cur = reg.aggregate_capability()
        assert cur >= prev
        prev = cur


@given(st.lists(st.tuples(st.sampled_from(list(Capability)), st.lists(
    st.sampled_from(list(Capability)), max_size=2)), min_size=1, max_size=8))
def test_dependency_edges_properties(spec):
    cards = [card(f"t{i}", cap, deps=deps) for i, (cap, deps) in enumerate(spec)]
    ids = {c.tool_id for c in cards}
    try:
        edges = dependency_edges(cards)
    except UnsatisfiedDependency:
        return
    assert edges == sorted(edges)
    for u, v in edges:
        assert u != v and u in ids and v in ids


def test_registry_persists(store):
    reg = ToolRegistry()
    reg.register_tool(card("a", score=0.3))
    reg.register_tool(card("b", CLS, deps=[SEG], modality=Modality.OMICS))
    reg.save(store)
    loaded = ToolRegistry.load(store)
    assert [c.to_dict() for c in loaded] == [c.to_dict() for c in reg]


def test_card_round_trip_rejects_unknown_keys():
    c = card("a", deps=[SEG])
    assert ToolCard.from_dict(c.to_dict()) == c
    with pytest.raises(InvalidCard):
        ToolCard.from_dict({**c.to_dict(), "colour": "red"})


def test_update_score():
    reg = ToolRegistry()
    reg.register_tool(card("a", score=0.3))
    reg.update_score("a", 0.7)
    assert reg.get("a").perf_score == 0.7
    with pytest.raises(InvalidCard):
        reg.update_score("a", 2.0)
