"""Read-only knowledge graph with dense integer ids and a head-side adjacency index."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError, ParseError, ReferentialError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class Triple:
    head: int
    relation: int
    tail: int


@dataclass(frozen=True)
class EntityRecord:
    id: int
    key: str
    label: tuple[str, ...]
    relation_degree: int
    has_wiki_link: bool

    @property
    def label_text(self) -> str:
        return " ".join(self.label)


def tokenize(text: str) -> tuple[str, ...]:
    return tuple(text.lower().split())


class KnowledgeGraph:
    """Immutable triple store.

    Entities keep the order in which they were declared; relations are
    interned in the order they are passed in (or first seen in the triples).
    ``adjacency[e]`` holds the sorted ``(relation, tail)`` pairs with head ``e``.
    """

    def __init__(
        self,
        entity_keys: Sequence[str],
        entity_labels: Sequence[str | Sequence[str]],
        wiki_flags: Sequence[bool],
        relation_keys: Sequence[str],
        triples: Iterable[tuple[int, int, int]],
    ):
        if not (len(entity_keys) == len(entity_labels) == len(wiki_flags)):
            raise DataError("entity keys, labels and wiki flags differ in length")
        if len(set(entity_keys)) != len(entity_keys):
            raise DataError("duplicate entity key")
        if len(set(relation_keys)) != len(relation_keys):
            raise DataError("duplicate relation key")
        n_ent, n_rel = len(entity_keys), len(relation_keys)

        unique: set[Triple] = set()
        seen = 0
        for h, r, t in triples:
            seen += 1
            if not (0 <= h < n_ent and 0 <= t < n_ent):
                raise ReferentialError(f"triple ({h}, {r}, {t}) references an unknown entity")
            if not 0 <= r < n_rel:
                raise ReferentialError(f"triple ({h}, {r}, {t}) references an unknown relation")
            unique.add(Triple(int(h), int(r), int(t)))
        self.duplicate_count = seen - len(unique)
        if self.duplicate_count:
            logger.info("collapsed %d duplicate triples", self.duplicate_count)

        self.triples: tuple[Triple, ...] = tuple(sorted(unique))
        adj: dict[int, list[tuple[int, int]]] = {}
        for tr in self.triples:
            adj.setdefault(tr.head, []).append((tr.relation, tr.tail))
        self._adjacency = {h: tuple(pairs) for h, pairs in adj.items()}
        self._out_relations = {
            h: tuple(sorted({r for r, _ in pairs})) for h, pairs in self._adjacency.items()
        }

        records = []
        for i, (key, label, wiki) in enumerate(zip(entity_keys, entity_labels, wiki_flags)):
            tokens = tokenize(label) if isinstance(label, str) else tuple(t.lower() for t in label)
            if not tokens:
                raise DataError(f"entity {key!r} has an empty label")
            records.append(EntityRecord(i, key, tokens, len(self._out_relations.get(i, ())), bool(wiki)))
        self.entities: tuple[EntityRecord, ...] = tuple(records)
        self.relations: tuple[str, ...] = tuple(relation_keys)
        self.entity_index = {k: i for i, k in enumerate(entity_keys)}
        self.relation_index = {k: i for i, k in enumerate(relation_keys)}

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    def adjacency(self, e: int) -> tuple[tuple[int, int], ...]:
        self._check_entity(e)
        return self._adjacency.get(e, ())

    def _check_entity(self, e: int) -> None:
        if not 0 <= e < len(self.entities):
            raise IndexError(f"entity id {e} out of range")

    def _check_relation(self, r: int) -> None:
        if not 0 <= r < len(self.relations):
            raise IndexError(f"relation id {r} out of range")

    def outgoing_relations(self, e: int) -> tuple[int, ...]:
        """Distinct relations leaving ``e``, ascending."""
        self._check_entity(e)
        return self._out_relations.get(e, ())

    def connected_1hop(self, e: int, r: int) -> bool:
        self._check_relation(r)
        return r in self.outgoing_relations(e)

    def answer_lookup(self, e: int, r: int) -> list[int]:
        self._check_entity(e)
        self._check_relation(r)
        return sorted(t for rel, t in self._adjacency.get(e, ()) if rel == r)

    def label(self, e: int) -> str:
        self._check_entity(e)
        return self.entities[e].label_text

    def entities_with_label(self) -> dict[tuple[str, ...], list[int]]:
        groups: dict[tuple[str, ...], list[int]] = {}
        for rec in self.entities:
            groups.setdefault(rec.label, []).append(rec.id)
        return groups


def load_graph(triples_path: str | Path, entities_path: str | Path) -> KnowledgeGraph:
    """Parse the entities TSV (``id<TAB>label<TAB>wiki_flag``) and triples TSV."""
    keys, labels, flags = [], [], []
    with open(entities_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise ParseError(entities_path, lineno, f"expected 3 columns, got {len(cols)}")
            key, label, flag = (c.strip() for c in cols)
            if flag not in ("0", "1"):
                raise ParseError(entities_path, lineno, f"wiki flag must be 0 or 1, got {flag!r}")
            if not label.split():
                raise ParseError(entities_path, lineno, "empty label")
            keys.append(key)
            labels.append(label)
            flags.append(flag == "1")
    entity_index = {k: i for i, k in enumerate(keys)}
    if len(entity_index) != len(keys):
        raise DataError(f"{entities_path}: duplicate entity id")

    relation_index: dict[str, int] = {}
    triples = []
    with open(triples_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = [c.strip() for c in line.split("\t")]
            if len(cols) != 3:
                raise ParseError(triples_path, lineno, f"expected 3 columns, got {len(cols)}")
            h, r, t = cols
            for ent in (h, t):
                if ent not in entity_index:
                    raise ReferentialError(f"{triples_path}:{lineno}: unknown entity {ent!r}")
            rid = relation_index.setdefault(r, len(relation_index))
            triples.append((entity_index[h], rid, entity_index[t]))
    return KnowledgeGraph(keys, labels, flags, list(relation_index), triples)


def write_graph(g: KnowledgeGraph, triples_path: str | Path, entities_path: str | Path) -> None:
    """Serialize ``g`` in the TSV formats read by ``load_graph``.

    Triples are written grouped so that relations are first seen in id order,
    which makes load(write(g)) reproduce the same relation ids.
    """
    with open(entities_path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in g.entities:
            fh.write(f"{rec.key}\t{rec.label_text}\t{int(rec.has_wiki_link)}\n")
    by_rel: dict[int, list[Triple]] = {}
    for tr in g.triples:
        by_rel.setdefault(tr.relation, []).append(tr)
    unused = [r for r in range(g.num_relations) if r not in by_rel]
    if unused:
        raise DataError(f"relations {unused} have no triples and cannot round-trip through TSV")
    with open(triples_path, "w", encoding="utf-8", newline="\n") as fh:
        for r in range(g.num_relations):
            for tr in by_rel[r]:
                fh.write(f"{g.entities[tr.head].key}\t{g.relations[r]}\t{g.entities[tr.tail].key}\n")
