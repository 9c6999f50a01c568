"""Entity candidate retrieval (tf-idf over labels), re-ranking and 1-hop relation lists."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .kg_store import KnowledgeGraph

logger = logging.getLogger(__name__)

DEFAULT_RERANK_WEIGHTS = (1.0, 2.0, 0.5, 0.5)
TFIDF_ONLY_WEIGHTS = (1.0, 0.0, 0.0, 0.0)
TIE_DECIMALS = 12


@dataclass(frozen=True)
class Posting:
    entity_id: int
    tf: int


class TfIdfIndex:
    """Inverted index with raw term counts, ``idf = ln(1 + N/df)`` and cosine-normalized documents."""

    def __init__(self, graph: KnowledgeGraph):
        self.graph = graph
        self.document_count = graph.num_entities
        postings: dict[str, list[Posting]] = {}
        for rec in graph.entities:
            for term, tf in sorted(Counter(rec.label).items()):
                postings.setdefault(term, []).append(Posting(rec.id, tf))
        self.postings = {t: tuple(sorted(p, key=lambda x: x.entity_id)) for t, p in postings.items()}
        self.df = {t: len(p) for t, p in self.postings.items()}
        self.idf = {t: math.log(1.0 + self.document_count / df) for t, df in self.df.items()}
        # summed in sorted term order so equal bags of words get bitwise-equal norms
        self.norms = [
            math.sqrt(sum((tf * self.idf[t]) ** 2 for t, tf in sorted(Counter(rec.label).items())))
            for rec in graph.entities
        ]

    def query_vector(self, tokens: Sequence[str]) -> dict[str, float]:
        counts = Counter(tok for tok in tokens if tok in self.idf)
        return {t: c * self.idf[t] for t, c in counts.items()}

    def document_vector(self, entity_id: int) -> dict[str, float]:
        label = self.graph.entities[entity_id].label
        norm = self.norms[entity_id]
        return {t: c * self.idf[t] / norm for t, c in Counter(label).items()}

    def scores(self, tokens: Sequence[str]) -> dict[int, float]:
        """Cosine similarity of the question to every entity sharing at least one term."""
        q = self.query_vector(tokens)
        qnorm = math.sqrt(sum(v * v for v in q.values()))
        if qnorm == 0.0:
            return {}
        acc: dict[int, float] = {}
        for t in sorted(q):
            w = q[t]
            idf = self.idf[t]
            for p in self.postings[t]:
                acc[p.entity_id] = acc.get(p.entity_id, 0.0) + w * p.tf * idf
        return {e: s / (qnorm * self.norms[e]) for e, s in acc.items()}


def build_tfidf_index(g: KnowledgeGraph) -> TfIdfIndex:
    return TfIdfIndex(g)


@dataclass(frozen=True)
class Candidate:
    entity_id: int
    tfidf_score: float
    label_in_question: bool = False
    relation_degree: int = 0
    has_wiki_link: bool = False
    rerank_score: float = 0.0
    relation_candidates: tuple[int, ...] = ()
    injected: bool = False

    @property
    def isolated(self) -> bool:
        return not self.relation_candidates


@dataclass
class CandidateSet:
    question_id: str
    n: int
    entries: list[Candidate] = field(default_factory=list)
    status: str = "ok"

    @property
    def mask(self) -> list[bool]:
        return [True] * len(self.entries) + [False] * (self.n - len(self.entries))

    @property
    def entity_ids(self) -> list[int]:
        return [c.entity_id for c in self.entries]

    def index_of(self, entity_id: int) -> int | None:
        for i, c in enumerate(self.entries):
            if c.entity_id == entity_id:
                return i
        return None

    def __len__(self) -> int:
        return len(self.entries)


def generate_candidates(index: TfIdfIndex, tokens: Sequence[str], n: int, question_id: str = "") -> CandidateSet:
    """Top-``n`` entities by tf-idf cosine; ties go to the lower entity id."""
    if n < 1:
        raise ValueError("n must be >= 1")
    scores = index.scores(tokens)
    if not scores:
        logger.warning("question %r shares no indexed term with any entity label", question_id)
        return CandidateSet(question_id, n, [], status="no_match")
    # rounding makes ties under exact arithmetic (e.g. "x" vs "x x") resolve by id, not by last-ulp noise
    ranked = sorted(scores.items(), key=lambda kv: (-round(kv[1], TIE_DECIMALS), kv[0]))[:n]
    return CandidateSet(question_id, n, [Candidate(e, s) for e, s in ranked])


def contains_run(haystack: Sequence[str], needle: Sequence[str]) -> bool:
    k = len(needle)
    if k == 0 or k > len(haystack):
        return False
    needle = tuple(needle)
    return any(tuple(haystack[i:i + k]) == needle for i in range(len(haystack) - k + 1))


def rerank(
    cands: CandidateSet,
    tokens: Sequence[str],
    g: KnowledgeGraph,
    weights: Sequence[float] = DEFAULT_RERANK_WEIGHTS,
) -> CandidateSet:
    """Linear combination of tf-idf score, exact label mention, log relation degree and wiki flag."""
    w1, w2, w3, w4 = weights
    out = []
    for c in cands.entries:
        rec = g.entities[c.entity_id]
        in_q = contains_run(tokens, rec.label)
        score = (
            w1 * c.tfidf_score
            + w2 * float(in_q)
            + w3 * math.log1p(rec.relation_degree)
            + w4 * float(rec.has_wiki_link)
        )
        out.append(replace(c, label_in_question=in_q, relation_degree=rec.relation_degree,
                           has_wiki_link=rec.has_wiki_link, rerank_score=score))
    out.sort(key=lambda c: (-round(c.rerank_score, TIE_DECIMALS), c.entity_id))
    return replace(cands, entries=out)


def relation_candidates(g: KnowledgeGraph, cands: CandidateSet) -> CandidateSet:
    entries = [replace(c, relation_candidates=g.outgoing_relations(c.entity_id)) for c in cands.entries]
    return replace(cands, entries=entries)


def inject_gold(cands: CandidateSet, gold: int, index: TfIdfIndex, tokens: Sequence[str]) -> CandidateSet:
    """Training-time only: make sure ``gold`` occupies a slot, evicting the last one if full."""
    if cands.index_of(gold) is not None:
        return cands
    score = index.scores(tokens).get(gold, 0.0)
    entries = list(cands.entries)
    if len(entries) >= cands.n:
        entries = entries[: cands.n - 1]
    entries.append(Candidate(gold, score, injected=True))
    return replace(cands, entries=entries, status="ok")


def candidate_pipeline(
    index: TfIdfIndex,
    tokens: Sequence[str],
    n: int,
    weights: Sequence[float] = DEFAULT_RERANK_WEIGHTS,
    gold: int | None = None,
    question_id: str = "",
) -> CandidateSet:
    """generate -> (optional gold injection) -> rerank -> relation lists."""
    g = index.graph
    cands = generate_candidates(index, tokens, n, question_id)
    if gold is not None:
        cands = inject_gold(cands, gold, index, tokens)
    cands = rerank(cands, tokens, g, weights)
    return relation_candidates(g, cands)


def write_candidate_dump(path: str | Path, sets: Iterable[CandidateSet]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for cs in sets:
            for rank, c in enumerate(cs.entries):
                fh.write(f"{cs.question_id}\t{rank}\t{c.entity_id}\t{c.rerank_score!r}\n")
