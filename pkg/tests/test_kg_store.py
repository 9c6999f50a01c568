import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgqa.errors import ParseError, ReferentialError
from kgqa.kg_store import KnowledgeGraph, load_graph, write_graph

from conftest import movie_graph, random_graph


def write_files(tmp_path, triples, entities):
    tp, ep = tmp_path / "triples.tsv", tmp_path / "entities.tsv"
    tp.write_text("".join(line + "\n" for line in triples))
    ep.write_text("".join(line + "\n" for line in entities))
    return tp, ep


ENTITY_LINES = ["m1\tfirst thing\t1", "m2\tsecond thing\t0", "m3\tthird\t0"]


def test_duplicate_triples_collapse(tmp_path):
    g = load_graph(*write_files(tmp_path, ["m1\tr1\tm2", "m1\tr1\tm2"], ENTITY_LINES))
    assert len(g.triples) == 1
    assert g.duplicate_count == 1


def test_empty_triples_file(tmp_path):
    g = load_graph(*write_files(tmp_path, [], ENTITY_LINES))
    assert g.num_entities == 3
    assert g.triples == ()
    assert [e.relation_degree for e in g.entities] == [0, 0, 0]


def test_adjacency_matches_regroup(tmp_path):
    lines = ["m1\tr1\tm2", "m2\tr2\tm3", "m1\tr2\tm3", "m3\tr1\tm1", "m1\tr1\tm3"]
    g = load_graph(*write_files(tmp_path, lines, ENTITY_LINES))
    expected = {}
    for line in lines:
        h, r, t = line.split("\t")
        expected.setdefault(g.entity_index[h], []).append((g.relation_index[r], g.entity_index[t]))
    for e in range(g.num_entities):
        assert g.adjacency(e) == tuple(sorted(expected.get(e, [])))


def test_bad_row_reports_line(tmp_path):
    with pytest.raises(ParseError) as info:
        load_graph(*write_files(tmp_path, ["m1\tr1\tm2", "m1\tr1"], ENTITY_LINES))
    assert info.value.lineno == 2


def test_unknown_entity_is_referential_error(tmp_path):
    with pytest.raises(ReferentialError):
        load_graph(*write_files(tmp_path, ["m1\tr1\tm9"], ENTITY_LINES))


def test_write_and_reload_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    g = random_graph(rng, 12, 4, 30)
    write_graph(g, tmp_path / "t.tsv", tmp_path / "e.tsv")
    h = load_graph(tmp_path / "t.tsv", tmp_path / "e.tsv")
    assert h.triples == g.triples
    assert h.relations == g.relations
    assert [e.label for e in h.entities] == [e.label for e in g.entities]
    assert [e.has_wiki_link for e in h.entities] == [e.has_wiki_link for e in g.entities]


def test_outgoing_relations_collapse_multiplicity():
    g = KnowledgeGraph(["e", "a", "b", "c"], ["e", "a", "b", "c"], [0] * 4, ["r1", "r2"],
                       [(0, 0, 1), (0, 0, 2), (0, 1, 3)])
    assert g.outgoing_relations(0) == (0, 1)
    assert g.outgoing_relations(1) == ()
    assert g.entities[0].relation_degree == 2


def test_outgoing_relations_full_scan():
    rng = np.random.default_rng(0)
    g = random_graph(rng, 8, 5, 20)
    for e in range(g.num_entities):
        assert g.outgoing_relations(e) == tuple(sorted({t.relation for t in g.triples if t.head == e}))


def test_connected_1hop_exhaustive():
    rng = np.random.default_rng(1)
    g = random_graph(rng, 10, 4, 25)
    for e in range(g.num_entities):
        for r in range(g.num_relations):
            assert g.connected_1hop(e, r) == any(t.head == e and t.relation == r for t in g.triples)


def test_movie_answer():
    g = movie_graph()
    ans = g.answer_lookup(g.entity_index["m.movie"], g.relation_index["film.produced_by"])
    assert [g.label(a) for a in ans] == ["brian grazer"]
    assert g.answer_lookup(g.entity_index["m.book"], g.relation_index["film.produced_by"]) == []


def test_fan_out_three():
    g = KnowledgeGraph(list("eabc"), list("eabc"), [0] * 4, ["r"], [(0, 0, 3), (0, 0, 1), (0, 0, 2)])
    assert g.answer_lookup(0, 0) == sorted(t.tail for t in g.triples if t.head == 0 and t.relation == 0)
    assert len(g.answer_lookup(0, 0)) == 3


def test_invalid_ids_raise():
    g = movie_graph()
    with pytest.raises(IndexError):
        g.outgoing_relations(99)
    with pytest.raises(IndexError):
        g.connected_1hop(0, 17)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 2), st.integers(0, 5)), max_size=40))
def test_degree_counts_distinct_relations(triples):
    g = KnowledgeGraph([f"e{i}" for i in range(6)], ["x"] * 6, [0] * 6, ["a", "b", "c"], triples)
    assert len(g.triples) == len(set(triples))
    assert g.duplicate_count == len(triples) - len(set(triples))
    for e in g.entities:
        assert e.relation_degree == len({r for h, r, _ in triples if h == e.id})
    assert list(g.triples) == sorted(g.triples)
