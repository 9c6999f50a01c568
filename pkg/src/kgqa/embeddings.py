"""Word vectors and TransE knowledge-graph embeddings."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, DataError, ParseError, ShapeError
from .kg_store import KnowledgeGraph

logger = logging.getLogger(__name__)

WORD_DIM = 300
KG_DIM = 50
# norm of synthesized word vectors, in the range of common pretrained 300-d tables; unit
# vectors are small enough that fine-tuning at the default learning rate overwrites them
SYNTH_WORD_NORM = 6.0
KG_FORMAT = "kgqa-kg-embeddings"
KG_FORMAT_VERSION = 1


def transe_score(h, r, t) -> float:
    """TransE plausibility ``-||h + r - t||_2``; 0 only for an exact translation."""
    h, r, t = (np.asarray(v, dtype=np.float64) for v in (h, r, t))
    if not (h.shape == r.shape == t.shape) or h.ndim != 1:
        raise ShapeError(f"transe_score needs equal 1-d shapes, got {h.shape}, {r.shape}, {t.shape}")
    return -float(np.linalg.norm(h + r - t))


@dataclass
class TranseConfig:
    dim: int = KG_DIM
    margin: float = 1.0
    epochs: int = 200
    batch_size: int = 100
    learning_rate: float = 0.01
    negative_samples_per_positive: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.margin <= 0:
            raise ConfigError("TransE margin must be positive")
        if self.dim < 1:
            raise ConfigError("TransE dim must be >= 1")
        if self.epochs < 0 or self.batch_size < 1 or self.negative_samples_per_positive < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1, negatives >= 1 required")
        if self.learning_rate <= 0:
            raise ConfigError("learning rate must be positive")


@dataclass
class KgEmbeddingTable:
    entity_vectors: np.ndarray
    relation_vectors: np.ndarray
    seed: int = 0
    loss_history: list[float] = field(default_factory=list)
    trainable: bool = False

    @property
    def dim(self) -> int:
        return self.entity_vectors.shape[1]

    def score(self, h: int, r: int, t: int) -> float:
        return transe_score(self.entity_vectors[h], self.relation_vectors[r], self.entity_vectors[t])

    def save(self, path: str | Path) -> None:
        payload = {
            "format": KG_FORMAT,
            "version": KG_FORMAT_VERSION,
            "dim": self.dim,
            "entity_count": int(self.entity_vectors.shape[0]),
            "relation_count": int(self.relation_vectors.shape[0]),
            "seed": self.seed,
            "loss_history": self.loss_history,
            "entity_vectors": self.entity_vectors.tolist(),
            "relation_vectors": self.relation_vectors.tolist(),
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def load(cls, path: str | Path) -> "KgEmbeddingTable":
        payload = json.loads(Path(path).read_text())
        if payload.get("format") != KG_FORMAT or payload.get("version") != KG_FORMAT_VERSION:
            raise DataError(f"{path}: not a version-{KG_FORMAT_VERSION} KG embedding file")
        ent = np.asarray(payload["entity_vectors"], dtype=np.float64).reshape(payload["entity_count"], payload["dim"])
        rel = np.asarray(payload["relation_vectors"], dtype=np.float64).reshape(payload["relation_count"], payload["dim"])
        return cls(ent, rel, payload["seed"], list(payload.get("loss_history", [])))


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.maximum(norms, 1e-12)


def train_transe(g: KnowledgeGraph, cfg: TranseConfig | None = None) -> KgEmbeddingTable:
    """Margin-ranking TransE with uniform head-or-tail corruption and plain SGD.

    Entity rows are projected back onto the unit sphere after every update;
    relation rows are normalized once at initialization.
    """
    cfg = cfg or TranseConfig()
    if not g.triples:
        raise DataError("cannot train TransE on a graph without triples")
    rng = np.random.default_rng(cfg.seed)
    bound = 6.0 / np.sqrt(cfg.dim)
    ent = _normalize_rows(rng.uniform(-bound, bound, size=(g.num_entities, cfg.dim)))
    rel = _normalize_rows(rng.uniform(-bound, bound, size=(g.num_relations, cfg.dim)))

    pos = np.array([(t.head, t.relation, t.tail) for t in g.triples], dtype=np.int64)
    k = cfg.negative_samples_per_positive
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(pos))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = np.repeat(pos[order[start:start + cfg.batch_size]], k, axis=0)
            neg = batch.copy()
            corrupt_head = rng.random(len(batch)) < 0.5
            # draw from the other E-1 entities so a corruption always changes the triple
            col = np.where(corrupt_head, 0, 2)
            orig = batch[np.arange(len(batch)), col]
            draw = rng.integers(0, g.num_entities - 1, size=len(batch)) if g.num_entities > 1 else orig
            if g.num_entities > 1:
                draw = draw + (draw >= orig)
            neg[np.arange(len(batch)), col] = draw

            d_pos = ent[batch[:, 0]] + rel[batch[:, 1]] - ent[batch[:, 2]]
            d_neg = ent[neg[:, 0]] + rel[neg[:, 1]] - ent[neg[:, 2]]
            n_pos = np.linalg.norm(d_pos, axis=1)
            n_neg = np.linalg.norm(d_neg, axis=1)
            losses = cfg.margin + n_pos - n_neg
            active = losses > 0
            epoch_loss += float(np.sum(losses[active]))
            if not active.any():
                continue
            u_pos = d_pos[active] / np.maximum(n_pos[active], 1e-12)[:, None]
            u_neg = d_neg[active] / np.maximum(n_neg[active], 1e-12)[:, None]
            bp, bn = batch[active], neg[active]
            g_ent = np.zeros_like(ent)
            g_rel = np.zeros_like(rel)
            np.add.at(g_ent, bp[:, 0], u_pos)
            np.add.at(g_ent, bp[:, 2], -u_pos)
            np.add.at(g_rel, bp[:, 1], u_pos)
            np.add.at(g_ent, bn[:, 0], -u_neg)
            np.add.at(g_ent, bn[:, 2], u_neg)
            np.add.at(g_rel, bn[:, 1], -u_neg)
            ent = _normalize_rows(ent - cfg.learning_rate * g_ent)
            rel = rel - cfg.learning_rate * g_rel
        history.append(epoch_loss / (len(pos) * k))
    return KgEmbeddingTable(ent, rel, cfg.seed, history)


@dataclass
class WordEmbeddingTable:
    vocab: dict[str, int]
    vectors: np.ndarray
    seed: int = 0
    oov_count: int = 0
    trainable: bool = True

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.vocab)

    def vector(self, token: str) -> np.ndarray:
        """Row for ``token``; tokens outside the table get their seeded synthetic vector."""
        idx = self.vocab.get(token)
        if idx is not None:
            return self.vectors[idx]
        return token_vector(token, self.dim, self.seed)

    def tokens(self) -> list[str]:
        return sorted(self.vocab, key=self.vocab.__getitem__)


def _token_seed(token: str) -> int:
    return int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")


def token_vector(token: str, d: int, seed: int, norm: float = SYNTH_WORD_NORM) -> np.ndarray:
    """Vector of length ``norm`` drawn from a stream keyed by (seed, stable hash of token)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, _token_seed(token)]))
    v = rng.standard_normal(d)
    return norm * v / np.linalg.norm(v)


def synth_word_vectors(vocab: Iterable[str], d: int = WORD_DIM, seed: int = 0) -> WordEmbeddingTable:
    if d < 1:
        raise ConfigError("embedding dimension must be >= 1")
    tokens = sorted(set(vocab))
    vectors = np.zeros((len(tokens), d))
    for i, tok in enumerate(tokens):
        vectors[i] = token_vector(tok, d, seed)
    return WordEmbeddingTable({t: i for i, t in enumerate(tokens)}, vectors, seed)


def load_word_vectors(path: str | Path, vocab: Iterable[str], seed: int = 0) -> WordEmbeddingTable:
    """Read ``token v1 ... vd`` lines, keeping rows for ``vocab``; missing tokens are synthesized."""
    wanted = set(vocab)
    found: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                if line.strip():
                    raise ParseError(path, lineno, "expected a token followed by floats")
                continue
            if dim is None:
                dim = len(parts) - 1
            elif len(parts) - 1 != dim:
                raise ParseError(path, lineno, f"dimension {len(parts) - 1} differs from {dim}")
            if parts[0] in wanted:
                try:
                    found[parts[0]] = np.array([float(x) for x in parts[1:]])
                except ValueError as exc:
                    raise ParseError(path, lineno, str(exc)) from None
    if dim is None:
        dim = WORD_DIM
    tokens = sorted(wanted)
    vectors = np.zeros((len(tokens), dim))
    oov = 0
    for i, tok in enumerate(tokens):
        if tok in found:
            vectors[i] = found[tok]
        else:
            vectors[i] = token_vector(tok, dim, seed)
            oov += 1
    if oov:
        logger.info("%d of %d vocabulary tokens missing from %s; synthesized", oov, len(tokens), path)
    return WordEmbeddingTable({t: i for i, t in enumerate(tokens)}, vectors, seed, oov)

