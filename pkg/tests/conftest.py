from __future__ import annotations

import numpy as np
import pytest
import torch

from kgqa.candidates import build_tfidf_index, candidate_pipeline
from kgqa.dataset import Example, derive_span_labels
from kgqa.embeddings import KgEmbeddingTable, TranseConfig, WordEmbeddingTable, synth_word_vectors, train_transe
from kgqa.kg_store import KnowledgeGraph, tokenize
from kgqa.model import ModelConfig, QAModel
from kgqa.training import TrainConfig, prepare_split, train

# acceptance lines collected by tests/test_acceptance.py, printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


MOVIE_KG = {
    "entities": [
        ("m.movie", "a beautiful mind", True),
        ("m.book", "a beautiful mind", False),
        ("m.grazer", "brian grazer", True),
        ("m.howard", "ron howard", True),
        ("m.nasar", "sylvia nasar", False),
        ("m.norton", "ww norton", False),
    ],
    "relations": ["film.produced_by", "film.directed_by", "book.author", "book.publisher"],
    "triples": [(0, 0, 2), (0, 1, 3), (1, 2, 4), (1, 3, 5)],
}


def movie_graph() -> KnowledgeGraph:
    ents = MOVIE_KG["entities"]
    return KnowledgeGraph([e[0] for e in ents], [e[1] for e in ents], [e[2] for e in ents],
                          MOVIE_KG["relations"], MOVIE_KG["triples"])


@pytest.fixture
def movie_kg() -> KnowledgeGraph:
    return movie_graph()


def make_example(g: KnowledgeGraph, qid: str, text: str, entity: int, relation: int) -> Example:
    tokens = tokenize(text)
    labels, ok = derive_span_labels(tokens, g.entities[entity].label)
    tails = g.answer_lookup(entity, relation)
    return Example(qid, tokens, entity, relation, tails[0] if tails else None, labels, ok)


def random_graph(rng: np.random.Generator, n_ent: int, n_rel: int, n_triples: int,
                 label_words: int = 8) -> KnowledgeGraph:
    words = [f"w{i}" for i in range(label_words)]
    labels = [" ".join(rng.choice(words, size=int(rng.integers(1, 4)))) for _ in range(n_ent)]
    triples = [(int(rng.integers(n_ent)), int(rng.integers(n_rel)), int(rng.integers(n_ent)))
               for _ in range(n_triples)]
    return KnowledgeGraph([f"e{i}" for i in range(n_ent)], labels, rng.random(n_ent) < 0.5,
                          [f"r{i}" for i in range(n_rel)], triples)


def tiny_tables(g: KnowledgeGraph, vocab, word_dim=6, kg_dim=4, seed=0):
    rng = np.random.default_rng(seed)
    words = synth_word_vectors(vocab, word_dim, seed)
    kg = KgEmbeddingTable(rng.normal(size=(g.num_entities, kg_dim)), rng.normal(size=(g.num_relations, kg_dim)),
                          seed=seed)
    return words, kg


def tiny_model(g: KnowledgeGraph, vocab, n=3, hidden=3, word_dim=6, kg_dim=4, seed=0,
               dtype=torch.float64) -> QAModel:
    words, kg = tiny_tables(g, vocab, word_dim, kg_dim, seed)
    cfg = ModelConfig(n=n, relation_count=g.num_relations, word_dim=word_dim, kg_dim=kg_dim,
                      hidden_dim=hidden, seed=seed)
    return QAModel.build(cfg, words, kg, dtype)


def candidates_for(g: KnowledgeGraph, tokens, n, gold=None):
    return candidate_pipeline(build_tfidf_index(g), tokens, n, gold=gold)


MOVIE_QUESTIONS = [
    ("who produced a beautiful mind", 0, 0),
    ("who is the producer of a beautiful mind", 0, 0),
    ("who directed a beautiful mind", 0, 1),
    ("who is the director of a beautiful mind", 0, 1),
    ("who wrote a beautiful mind", 1, 2),
    ("who is the author of a beautiful mind", 1, 2),
    ("who published a beautiful mind", 1, 3),
    ("who is the publisher of a beautiful mind", 1, 3),
]


def movie_examples(g: KnowledgeGraph) -> list[Example]:
    return [make_example(g, f"q{i}", q, e, r) for i, (q, e, r) in enumerate(MOVIE_QUESTIONS)]


@pytest.fixture(scope="session")
def movie_model():
    """Small model trained to memorize the eight movie/book questions."""
    g = movie_graph()
    exs = movie_examples(g)
    vocab = {tok for ex in exs for tok in ex.tokens} | {tok for e in g.entities for tok in e.label}
    words = synth_word_vectors(vocab, 16, 0)
    kg = train_transe(g, TranseConfig(dim=8, epochs=200, batch_size=2))
    cfg = TrainConfig(n=3, epochs=150, learning_rate=1e-2, batch_size=8, hidden_dim=8, dtype="float64")
    idx = build_tfidf_index(g)
    res = train(prepare_split(exs, idx, 3, inject_gold=True), prepare_split(exs, idx, 3), g, words, kg, cfg)
    return g, idx, res.model
