import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgqa.candidates import (DEFAULT_RERANK_WEIGHTS, TFIDF_ONLY_WEIGHTS, Candidate, CandidateSet,
                             build_tfidf_index, candidate_pipeline, generate_candidates, inject_gold,
                             relation_candidates, rerank)
from kgqa.kg_store import KnowledgeGraph, tokenize

from conftest import movie_graph, random_graph


def dense_scores(g: KnowledgeGraph, tokens) -> np.ndarray:
    """Cosine of raw-tf * ln(1 + N/df) vectors, built as a full term-by-document matrix."""
    terms = sorted({t for e in g.entities for t in e.label})
    col = {t: j for j, t in enumerate(terms)}
    N = g.num_entities
    tf = np.zeros((N, len(terms)))
    for e in g.entities:
        for t in e.label:
            tf[e.id, col[t]] += 1
    idf = np.log(1 + N / (tf > 0).sum(axis=0))
    docs = tf * idf
    docs /= np.linalg.norm(docs, axis=1, keepdims=True)
    q = np.zeros(len(terms))
    for t in tokens:
        if t in col:
            q[col[t]] += 1
    q *= idf
    if not q.any():
        return np.zeros(N)
    return docs @ (q / np.linalg.norm(q))


def test_single_entity_index():
    g = KnowledgeGraph(["m"], ["a beautiful mind"], [1], [], [])
    idx = build_tfidf_index(g)
    assert sorted(idx.df) == ["a", "beautiful", "mind"]
    assert set(idx.df.values()) == {1}


def test_identical_labels_identical_documents():
    g = movie_graph()
    idx = build_tfidf_index(g)
    assert idx.document_vector(0) == idx.document_vector(1)


def test_scores_match_dense_matrix():
    rng = np.random.default_rng(11)
    for trial in range(100):
        g = random_graph(rng, 10, 3, 5, label_words=6)
        tokens = [f"w{int(i)}" for i in rng.integers(0, 9, size=int(rng.integers(1, 6)))]
        dense = dense_scores(g, tokens)
        sparse = build_tfidf_index(g).scores(tokens)
        for e in range(g.num_entities):
            assert abs(sparse.get(e, 0.0) - dense[e]) <= 1e-10


def test_exhaustive_top_n():
    rng = np.random.default_rng(12)
    for trial in range(100):
        g = random_graph(rng, 10, 3, 5, label_words=6)
        tokens = [f"w{int(i)}" for i in rng.integers(0, 6, size=3)]
        dense = dense_scores(g, tokens)
        # rounding keeps float-identical ties (duplicate labels) tied in the oracle
        ranked = sorted((e for e in range(10) if dense[e] > 0), key=lambda e: (-round(dense[e], 12), e))[:5]
        assert generate_candidates(build_tfidf_index(g), tokens, 5).entity_ids == ranked


def test_movie_and_book_both_retrieved():
    g = movie_graph()
    cands = generate_candidates(build_tfidf_index(g), tokenize("who produced a beautiful mind"), 5)
    assert {0, 1} <= set(cands.entity_ids)


def test_no_shared_term_is_empty():
    g = movie_graph()
    cands = generate_candidates(build_tfidf_index(g), ["zzz", "qqq"], 5)
    assert cands.entries == []
    assert cands.status == "no_match"
    assert cands.mask == [False] * 5


def test_wiki_flag_breaks_tie():
    g = KnowledgeGraph(["a", "b"], ["same label", "same label"], [False, True], ["r"], [])
    cands = generate_candidates(build_tfidf_index(g), ["same", "label"], 2)
    assert rerank(cands, ["same", "label"], g).entity_ids == [1, 0]


def test_tfidf_only_weights_keep_order():
    rng = np.random.default_rng(5)
    for _ in range(50):
        g = random_graph(rng, 12, 3, 20)
        tokens = ["w1", "w2", "w3"]
        cands = generate_candidates(build_tfidf_index(g), tokens, 8)
        assert rerank(cands, tokens, g, TFIDF_ONLY_WEIGHTS).entity_ids == cands.entity_ids


def test_rerank_hand_computed():
    # e0: label in question, degree 0, no wiki; e1: degree 2, wiki; e2: degree 1
    g = KnowledgeGraph(["e0", "e1", "e2", "t"], ["red house", "red", "house red barn", "t"],
                       [False, True, False, False], ["r1", "r2"],
                       [(1, 0, 3), (1, 1, 3), (2, 0, 3)])
    tokens = ["the", "red", "house"]
    cands = generate_candidates(build_tfidf_index(g), tokens, 3)
    tf = {c.entity_id: c.tfidf_score for c in cands.entries}
    expect = {
        0: tf[0] + 2.0 * 1 + 0.5 * math.log(1) + 0.5 * 0,
        1: tf[1] + 2.0 * 1 + 0.5 * math.log(3) + 0.5 * 1,
        2: tf[2] + 2.0 * 0 + 0.5 * math.log(2) + 0.5 * 0,
    }
    out = rerank(cands, tokens, g)
    assert out.entity_ids == sorted(expect, key=lambda e: (-expect[e], e))
    for c in out.entries:
        assert c.rerank_score == pytest.approx(expect[c.entity_id], abs=1e-12)


def test_relation_lists():
    g = KnowledgeGraph(["e", "x", "y", "z"], ["e", "x", "y", "z"], [0] * 4, ["a", "b", "c"],
                       [(0, 0, 1), (0, 1, 2), (0, 2, 3)])
    cs = relation_candidates(g, CandidateSet("q", 2, [Candidate(0, 1.0), Candidate(3, 0.5)]))
    assert cs.entries[0].relation_candidates == (0, 1, 2)
    assert cs.entries[1].relation_candidates == ()
    assert cs.entries[1].isolated


def test_relation_lists_full_scan():
    rng = np.random.default_rng(9)
    g = random_graph(rng, 15, 4, 40)
    cs = CandidateSet("q", 15, [Candidate(e, 0.0) for e in range(15)])
    for c in relation_candidates(g, cs).entries:
        assert c.relation_candidates == tuple(sorted({t.relation for t in g.triples if t.head == c.entity_id}))


def test_inject_gold_evicts_last():
    g = movie_graph()
    idx = build_tfidf_index(g)
    tokens = tokenize("a beautiful mind ron")
    cands = generate_candidates(idx, tokens, 2)
    missing = next(e for e in range(g.num_entities) if e not in cands.entity_ids)
    out = inject_gold(cands, missing, idx, tokens)
    assert len(out) == 2
    assert out.entity_ids == [cands.entity_ids[0], missing]
    assert out.entries[1].injected
    assert inject_gold(cands, cands.entity_ids[0], idx, tokens) is cands


def test_pipeline_attaches_features():
    g = movie_graph()
    cs = candidate_pipeline(build_tfidf_index(g), tokenize("who produced a beautiful mind"), 3)
    top = cs.entries[0]
    assert top.entity_id == 0  # wiki-linked movie outranks the book
    assert top.label_in_question and top.has_wiki_link
    assert top.relation_candidates == (0, 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10**6), st.lists(st.integers(0, 7), min_size=1, max_size=6))
def test_candidate_present_monotone_in_n(seed, word_ids):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 20, 3, 10)
    idx = build_tfidf_index(g)
    tokens = [f"w{i}" for i in word_ids]
    sets = {n: set(candidate_pipeline(idx, tokens, n, DEFAULT_RERANK_WEIGHTS).entity_ids) for n in (1, 3, 7, 20)}
    assert sets[1] <= sets[3] <= sets[7] <= sets[20]
