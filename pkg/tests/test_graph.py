import json
from collections import Counter
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graph_oracle import oracle_triples
from kgalign.graph import (
    FORWARD_NAMES,
    RELATION_NAMES,
    RELATIONS,
    EntityId,
    GraphParseError,
    KnowledgeGraph,
    Triple,
    batch_triples,
    build_graph,
    read_annotations,
    relation,
    reverse_relation,
)

FIXTURES = Path(__file__).parent / "fixtures"


def rec(vid, action, *moves):
    ms = []
    for m in moves:
        parts = m.split(":")
        d = {"part": parts[0], "state": parts[1]}
        if len(parts) == 3:
            d["object"] = parts[2]
        ms.append(d)
    return json.dumps({"video_id": vid, "action": action, "movements": ms})


def all_train(*vids):
    return {v: "train" for v in vids}


# ---------------------------------------------------------------- relations


def test_six_relations_with_reverse_partners():
    assert len(RELATIONS) == 6
    assert reverse_relation("v-a").name == "a-v"
    assert reverse_relation("b-v").name == "v-b"
    for r in RELATIONS:
        assert reverse_relation(reverse_relation(r)) == r
        assert reverse_relation(r) != r
        assert reverse_relation(r).head_kind == r.tail_kind


def test_unknown_relation_rejected():
    with pytest.raises(ValueError):
        relation("v-v")


def test_triple_kind_discipline():
    with pytest.raises(ValueError):
        Triple(EntityId("action", "x"), relation("v-a"), EntityId("action", "y"))


@pytest.mark.parametrize("label", ["head", "a:b:c:d", ""])
def test_bad_movement_labels(label):
    with pytest.raises(ValueError):
        EntityId("movement", label)


# ---------------------------------------------------------------- build_graph


def test_single_video_example():
    g = build_graph([rec("v1", "belly_dancing", "head:shake")], splits=all_train("v1"))
    fwd = {
        ("video:v1", "v-a", "action:belly_dancing"),
        ("movement:head:shake", "b-v", "video:v1"),
        ("movement:head:shake", "b-a", "action:belly_dancing"),
    }
    rev = {("video:v1", "v-b", "movement:head:shake"), ("action:belly_dancing", "a-v", "video:v1"),
           ("action:belly_dancing", "a-b", "movement:head:shake")}
    assert g.triple_set() == fwd | rev


def test_repeated_video_is_deduplicated():
    line = rec("v1", "salsa", "hip:sway", "foot:step")
    one = build_graph([line], splits=all_train("v1"))
    two = build_graph([line, line], splits=all_train("v1"))
    assert one.triple_set() == two.triple_set()
    assert one.entities == two.entities


def test_duplicate_movement_in_video_collapses():
    g = build_graph([rec("v1", "salsa", "hip:sway", "hip:sway")], splits=all_train("v1"))
    assert len(g.by_relation("b-v")) == 1


def test_min_count_filters_action_edges_only():
    lines = [rec("v1", "a", "m:x"), rec("v2", "a", "n:y"), rec("v3", "a", "n:y")]
    g = build_graph(lines, min_count=2, splits=all_train("v1", "v2", "v3"))
    ba = {(str(t.h), str(t.t)) for t in g.by_relation("b-a")}
    assert ba == {("movement:n:y", "action:a")}
    assert ("movement:m:x", "b-v", "video:v1") in g.triple_set()


def test_min_count_ignores_test_videos():
    lines = [rec("v1", "a", "m:x"), rec("v2", "a", "m:x")]
    g = build_graph(lines, min_count=2, splits={"v1": "train", "v2": "test"})
    assert g.by_relation("b-a") == []


def test_test_videos_have_no_edges_but_remain_entities():
    lines = [rec("v1", "a", "m:x"), rec("v2", "a", "m:x")]
    g = build_graph(lines, splits={"v1": "train", "v2": "test"})
    assert EntityId("video", "v2") in g.entities
    assert not any("video:v2" in (h, t) for h, _, t in g.triple_set())
    assert g.action_of(EntityId("video", "v2")) == EntityId("action", "a")


@pytest.mark.parametrize(
    "line, fragment",
    [
        ("{not json", "invalid JSON"),
        ('{"video_id": "v", "action": "a", "colour": 1}', "unknown kind"),
        ('{"video_id": "v", "action": "  "}', "empty action"),
        ('{"video_id": "v", "action": "a", "movements": [{"part": "arm"}]}', "malformed movement"),
        ('{"video_id": "v", "action": "a", "movements": [{"part": "arm", "state": "x:y"}]}', "malformed movement"),
        ('{"action": "a"}', "missing video_id"),
    ],
)
def test_parse_errors_carry_line_number(line, fragment):
    with pytest.raises(GraphParseError) as err:
        build_graph([rec("ok", "a"), "", line])
    assert err.value.line == 3
    assert fragment in str(err.value)


def test_conflicting_action_for_same_video():
    with pytest.raises(GraphParseError, match="line 2"):
        build_graph([rec("v1", "a"), rec("v1", "b")])


def test_split_is_stratified_and_seeded():
    lines = [rec(f"v{i}", f"act{i % 3}", "m:x") for i in range(30)]
    g1 = build_graph(lines, train_ratio=0.8, seed=3)
    g2 = build_graph(lines, train_ratio=0.8, seed=3)
    g3 = build_graph(lines, train_ratio=0.8, seed=4)
    assert g1.splits == g2.splits
    assert g1.splits != g3.splits
    per_action = Counter(f"act{int(v[1:]) % 3}" for v, s in g1.splits.items() if s == "train")
    assert per_action == {"act0": 8, "act1": 8, "act2": 8}


def test_every_action_keeps_a_train_video_at_low_ratio():
    lines = [rec(f"v{i}", f"act{i % 4}") for i in range(8)]
    g = build_graph(lines, train_ratio=0.05, seed=0)
    assert {g.video_actions[v] for v, s in g.splits.items() if s == "train"} == {f"act{i}" for i in range(4)}


def test_save_load_round_trip(tmp_path):
    g = build_graph(read_annotations(FIXTURES / "annotations_50.jsonl"), min_count=2, seed=7)
    g.save(tmp_path / "g.jsonl")
    h = KnowledgeGraph.load(tmp_path / "g.jsonl")
    assert h.triple_set() == g.triple_set()
    assert h.entities == g.entities and h.splits == g.splits and h.video_actions == g.video_actions


# ---------------------------------------------------------------- golden fixture


@pytest.fixture(scope="module")
def fixture_graph():
    lines = read_annotations(FIXTURES / "annotations_50.jsonl")
    return lines, build_graph(lines, min_count=2, train_ratio=0.8, seed=7)


def load_golden():
    rows = [json.loads(s) for s in (FIXTURES / "golden_50.jsonl").read_text().splitlines() if s]
    return {(r["h"], r["r"], r["t"]) for r in rows}


def test_golden_triple_set(fixture_graph):
    _, g = fixture_graph
    assert g.splits == json.loads((FIXTURES / "golden_50_splits.json").read_text())
    assert g.triple_set() == load_golden()


def test_golden_agrees_with_counting_oracle(fixture_graph):
    lines, g = fixture_graph
    assert oracle_triples(lines, g.splits, 2) == g.triple_set()


def test_reverse_closure(fixture_graph):
    _, g = fixture_graph
    triples = g.triple_set()
    assert len(triples) % 2 == 0
    mapped = {(t, reverse_relation(r).name, h) for h, r, t in triples}
    assert mapped == triples


def test_split_hygiene(fixture_graph):
    _, g = fixture_graph
    test_videos = {f"video:{v}" for v, s in g.splits.items() if s == "test"}
    assert test_videos
    for r in ("v-a", "b-v", "a-v", "v-b"):
        for t in g.by_relation(r):
            assert str(t.h) not in test_videos and str(t.t) not in test_videos


def test_min_count_in_fixture(fixture_graph):
    lines, g = fixture_graph
    one = build_graph(lines, min_count=1, splits=g.splits)
    assert len(one.by_relation("b-a")) > len(g.by_relation("b-a"))
    assert one.by_relation("b-v") == g.by_relation("b-v")


def test_build_is_deterministic(fixture_graph):
    lines, g = fixture_graph
    again = build_graph(list(lines), min_count=2, train_ratio=0.8, seed=7)
    assert again.triple_set() == g.triple_set() and again.splits == g.splits


# ---------------------------------------------------------------- batching


def ten_triple_graph():
    lines = [rec(f"v{i}", "a") for i in range(10)]
    return build_graph(lines, splits=all_train(*[f"v{i}" for i in range(10)]))


def test_batch_sizes_keep_final_short_batch():
    g = ten_triple_graph()
    assert [len(b) for b in batch_triples(g, "v-a", 4, seed=0)] == [4, 4, 2]


def test_batches_are_deterministic():
    g = ten_triple_graph()
    assert list(batch_triples(g, "v-a", 4, 5)) == list(batch_triples(g, "v-a", 4, 5))


def test_seeds_permute_same_multiset():
    g = ten_triple_graph()
    a = [t for b in batch_triples(g, "v-a", 3, 0) for t in b]
    b = [t for b in batch_triples(g, "v-a", 3, 1) for t in b]
    assert a != b
    assert Counter(a) == Counter(b) == Counter(g.by_relation("v-a"))


def test_empty_relation_gives_empty_stream():
    g = build_graph([rec("v1", "a")], splits=all_train("v1"))
    assert list(batch_triples(g, "b-a", 4, 0)) == []


def test_batch_size_below_two_rejected():
    with pytest.raises(ValueError):
        list(batch_triples(ten_triple_graph(), "v-a", 1, 0))


# ---------------------------------------------------------------- properties

labels = st.sampled_from(["arm", "leg", "head", "hip"])
states = st.sampled_from(["up", "down", "shake"])
records = st.lists(
    st.tuples(st.integers(0, 9), st.sampled_from(["a0", "a1", "a2"]), st.lists(st.tuples(labels, states), max_size=3)),
    min_size=1,
    max_size=25,
)


@settings(max_examples=60, deadline=None)
@given(records, st.integers(1, 3), st.integers(0, 5))
def test_random_streams_match_oracle(rows, min_count, seed):
    action_of = {}
    lines = []
    for vid, action, moves in rows:
        action = action_of.setdefault(vid, action)
        lines.append(rec(f"v{vid}", action, *(f"{p}:{s}" for p, s in moves)))
    g = build_graph(lines, min_count=min_count, train_ratio=0.6, seed=seed)
    assert g.triple_set() == oracle_triples(lines, g.splits, min_count)
    for t in g.triples:
        assert t.h.kind == t.r.head_kind and t.t.kind == t.r.tail_kind
    counts = Counter(r for _, r, _ in g.triple_set())
    for name in FORWARD_NAMES:
        assert counts[name] == counts[reverse_relation(name).name]
    assert set(counts) <= set(RELATION_NAMES)
