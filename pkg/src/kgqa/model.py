"""Joint span detection, relation prediction and gated entity disambiguation."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .candidates import CandidateSet
from .embeddings import KgEmbeddingTable, WordEmbeddingTable, token_vector
from .errors import ConfigError, DataError, NoCandidateError, ShapeError
from .kg_store import KnowledgeGraph
from .neural import BiLSTM, cosine, gumbel_softmax, maxpool, one_hot_argmax, self_attention

CHECKPOINT_FORMAT = "kgqa-model"
CHECKPOINT_VERSION = 1
SPAN_THRESHOLD = 0.5
TOP_RELATIONS = 5
MASKED_SIMILARITY = -1.0


@dataclass
class ModelConfig:
    n: int
    relation_count: int
    word_dim: int = 300
    kg_dim: int = 50
    hidden_dim: int = 300
    tau: float = 1.0
    seed: int = 0
    word_seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.relation_count < 1:
            raise ConfigError("n and relation_count must be >= 1")
        if self.tau <= 0:
            raise ConfigError("gumbel temperature must be positive")


class QAModel(nn.Module):
    def __init__(
        self,
        cfg: ModelConfig,
        vocab: Sequence[str],
        word_vectors: np.ndarray | torch.Tensor,
        kg_relation_vectors: np.ndarray | torch.Tensor,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        word_vectors = torch.as_tensor(np.asarray(word_vectors), dtype=dtype)
        kg_rel = torch.as_tensor(np.asarray(kg_relation_vectors), dtype=dtype)
        if word_vectors.shape != (len(vocab), cfg.word_dim):
            raise ShapeError(f"word table {tuple(word_vectors.shape)} vs vocab {len(vocab)} x {cfg.word_dim}")
        if kg_rel.shape != (cfg.relation_count, cfg.kg_dim):
            raise ShapeError(f"KG relation table {tuple(kg_rel.shape)} vs {cfg.relation_count} x {cfg.kg_dim}")
        self.cfg = cfg
        self.vocab = {tok: i for i, tok in enumerate(vocab)}
        h2 = 2 * cfg.hidden_dim
        self.word_emb = nn.Parameter(word_vectors.clone())
        self.span_lstm = BiLSTM(cfg.word_dim, cfg.hidden_dim)
        self.span_out = nn.Parameter(torch.empty(h2, dtype=dtype))
        self.rel_lstm = BiLSTM(cfg.word_dim, cfg.hidden_dim)
        self.rel_att = nn.Parameter(torch.empty(h2, dtype=dtype))
        self.rel_out = nn.Parameter(torch.empty(h2, cfg.relation_count, dtype=dtype))
        self.gate_weight = nn.Parameter(torch.zeros(cfg.n, dtype=dtype))
        self.register_buffer("kg_relations", kg_rel.clone())
        self.to(dtype)
        self.reset_parameters()

    @classmethod
    def build(cls, cfg: ModelConfig, words: WordEmbeddingTable, kg: KgEmbeddingTable,
              dtype: torch.dtype = torch.float32) -> "QAModel":
        return cls(cfg, words.tokens(), words.vectors, kg.relation_vectors, dtype)

    def reset_parameters(self) -> None:
        gen = torch.Generator().manual_seed(self.cfg.seed)
        self.span_lstm.reset_parameters(gen)
        # both encoders start from the same point, so the sharing penalty starts at 0
        self.rel_lstm.load_state_dict(self.span_lstm.state_dict())
        bound = 1.0 / math.sqrt(2 * self.cfg.hidden_dim)
        with torch.no_grad():
            for p in (self.span_out, self.rel_att, self.rel_out):
                p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
            self.gate_weight.zero_()

    @property
    def dtype(self) -> torch.dtype:
        return self.word_emb.dtype

    def token_ids(self, tokens: Sequence[str], extra: dict[str, int]) -> list[int]:
        """Row ids for ``tokens``; unseen tokens get ids past the table, recorded in ``extra``."""
        out = []
        base = len(self.vocab)
        for tok in tokens:
            idx = self.vocab.get(tok)
            if idx is None:
                idx = base + extra.setdefault(tok, len(extra))
            out.append(idx)
        return out

    def extra_vectors(self, extra: dict[str, int]) -> torch.Tensor | None:
        if not extra:
            return None
        rows = sorted(extra, key=extra.__getitem__)
        vecs = np.stack([token_vector(t, self.cfg.word_dim, self.cfg.word_seed) for t in rows])
        return torch.as_tensor(vecs, dtype=self.dtype)

    def embed(self, ids: torch.Tensor, extra: torch.Tensor | None = None) -> torch.Tensor:
        table = self.word_emb if extra is None else torch.cat([self.word_emb, extra], dim=0)
        return table[ids]

    def forward(self, batch: "Batch", mode: str = "argmax", generator: torch.Generator | None = None,
                noise: torch.Tensor | None = None, use_gate: bool = True,
                gate_stop_grad: bool = False) -> "Outputs":
        tmask = batch.token_mask
        emb = self.embed(batch.token_ids, batch.extra)
        span_logits = span_scores(self, emb, batch.lengths)
        span_probs = torch.sigmoid(span_logits)
        rel_logits = predict_relation(self, emb, batch.lengths)
        e_q = question_entity_embedding(span_probs, emb, batch.lengths, tmask)

        cand_emb = label_embeddings(self.embed(batch.cand_token_ids, batch.extra), batch.cand_token_mask)
        sim_c = word_similarity(e_q, cand_emb, batch.cand_mask)
        r_q = relation_query_embedding(rel_logits, self.kg_relations, self.cfg.tau, mode, generator, noise)
        sim_kg = kg_similarity(r_q, self.kg_relations[batch.cand_rels], batch.cand_rel_mask, batch.cand_mask)
        if use_gate:
            gate = disambiguation_gate(self.gate_weight, sim_c)
            gate_for_loss = disambiguation_gate(self.gate_weight, sim_c.detach()) if gate_stop_grad else gate
        else:
            gate = torch.ones(sim_c.shape[0], dtype=sim_c.dtype)
            gate_for_loss = gate
        scores = entity_scores(sim_c, sim_kg, gate)
        return Outputs(span_logits, span_probs, rel_logits, e_q, r_q, sim_c, sim_kg, gate, gate_for_loss, scores)

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.cfg),
            "dtype": str(self.dtype).replace("torch.", ""),
            "vocab": sorted(self.vocab, key=self.vocab.__getitem__),
            "state": {k: v.detach().clone() for k, v in self.state_dict().items()},
            "extra": extra or {},
        }
        torch.save(payload, str(path))

    @classmethod
    def load(cls, path: str | Path, n: int | None = None, relation_count: int | None = None) -> "QAModel":
        payload = torch.load(str(path), weights_only=False)
        if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: not a version-{CHECKPOINT_VERSION} model checkpoint")
        cfg = ModelConfig(**payload["config"])
        if n is not None and cfg.n != n:
            raise ConfigError(f"checkpoint was trained with n={cfg.n}, got n={n}")
        if relation_count is not None and cfg.relation_count != relation_count:
            raise ConfigError(f"checkpoint has r_n={cfg.relation_count}, graph has {relation_count}")
        state = payload["state"]
        dtype = getattr(torch, payload["dtype"])
        model = cls(cfg, payload["vocab"], state["word_emb"], state["kg_relations"], dtype)
        model.load_state_dict(state)
        model.checkpoint_extra = payload.get("extra", {})
        return model


@dataclass
class Outputs:
    span_logits: torch.Tensor
    span_probs: torch.Tensor
    relation_logits: torch.Tensor
    e_q: torch.Tensor
    r_q: torch.Tensor
    sim_c: torch.Tensor
    sim_kg: torch.Tensor
    gate: torch.Tensor
    gate_for_loss: torch.Tensor
    scores: torch.Tensor


# --- submodel operations; all accept an optional leading batch axis -------------------------


def span_scores(model: QAModel, emb: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
    """Pre-sigmoid span logits ``W h_t``."""
    H = model.span_lstm(emb, lengths)
    return H @ model.span_out


def detect_span(model: QAModel, emb: torch.Tensor) -> torch.Tensor:
    """Per-token entity probabilities ``sigmoid(W h_t)`` for one question, emb of shape [T, d]."""
    if emb.dim() != 2:
        raise ShapeError(f"detect_span expects [T, d], got {tuple(emb.shape)}")
    return torch.sigmoid(span_scores(model, emb.unsqueeze(0)))[0]


def span_tags(probs: torch.Tensor) -> list[str]:
    return ["I" if p >= SPAN_THRESHOLD else "O" for p in probs.tolist()]


def predict_relation(model: QAModel, emb: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
    """``tanh(W_r^T context)`` with context the attention-pooled BiLSTM states."""
    single = emb.dim() == 2
    if single:
        emb = emb.unsqueeze(0)
    H = model.rel_lstm(emb, lengths)
    mask = None
    if lengths is not None:
        mask = torch.arange(H.shape[1]).expand(H.shape[0], -1) < lengths.view(-1, 1)
    context, _ = self_attention(model.rel_att, H, mask)
    logits = torch.tanh(context @ model.rel_out)
    return logits[0] if single else logits


def question_entity_embedding(span_probs: torch.Tensor, emb: torch.Tensor,
                              lengths: torch.Tensor | None = None,
                              token_mask: torch.Tensor | None = None) -> torch.Tensor:
    """``(1/T) sum_t o_t w_t`` over the real (unpadded) tokens."""
    weights = span_probs if token_mask is None else span_probs * token_mask
    total = (weights.unsqueeze(-1) * emb).sum(dim=-2)
    if lengths is None:
        return total / emb.shape[-2]
    return total / lengths.to(emb.dtype).unsqueeze(-1)


def label_embeddings(token_emb: torch.Tensor, token_mask: torch.Tensor) -> torch.Tensor:
    """Mean of each candidate's label-token vectors: [..., n, L, d] -> [..., n, d]."""
    w = token_mask.to(token_emb.dtype)
    count = w.sum(dim=-1, keepdim=True).clamp_min(1.0)
    return (w.unsqueeze(-1) * token_emb).sum(dim=-2) / count


def word_similarity(e_q: torch.Tensor, cand_emb: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    sim = cosine(e_q.unsqueeze(-2), cand_emb)
    return torch.where(mask, sim, torch.full_like(sim, MASKED_SIMILARITY))


def relation_query_embedding(logits: torch.Tensor, kg_relations: torch.Tensor, tau: float = 1.0,
                             mode: str = "argmax", generator: torch.Generator | None = None,
                             noise: torch.Tensor | None = None) -> torch.Tensor:
    """Categorical relation draw times the KG relation table.

    ``soft``/``hard`` use Gumbel noise; ``argmax`` is the noise-free one-hot used at inference.
    """
    if logits.shape[-1] != kg_relations.shape[0]:
        raise ShapeError(f"{logits.shape[-1]} relation logits vs {kg_relations.shape[0]} KG relations")
    if mode == "argmax":
        sample = one_hot_argmax(logits.detach())
    else:
        sample = gumbel_softmax(logits, tau, mode, generator, noise)
    return sample @ kg_relations


def kg_similarity(r_q: torch.Tensor, cand_rel_emb: torch.Tensor, rel_mask: torch.Tensor,
                  slot_mask: torch.Tensor) -> torch.Tensor:
    """Max cosine between the query relation and each candidate's relations; -1 if none."""
    cos = cosine(r_q.unsqueeze(-2).unsqueeze(-2), cand_rel_emb)
    pooled = maxpool(cos, rel_mask, dim=-1, empty_value=MASKED_SIMILARITY)
    return torch.where(slot_mask, pooled, torch.full_like(pooled, MASKED_SIMILARITY))


def disambiguation_gate(gate_weight: torch.Tensor, sim_c: torch.Tensor) -> torch.Tensor:
    if sim_c.shape[-1] != gate_weight.shape[0]:
        raise ShapeError(f"gate weight has {gate_weight.shape[0]} slots, sim_c has {sim_c.shape[-1]}")
    return torch.sigmoid(sim_c @ gate_weight)


def entity_scores(sim_c: torch.Tensor, sim_kg: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
    g = gate.unsqueeze(-1) if gate.dim() else gate
    return torch.sigmoid(g * (sim_kg + sim_c) / 2 + (1 - g) * sim_c)


def masked_argmax(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if not mask.any(dim=-1).all():
        raise NoCandidateError("every candidate slot is masked")
    return scores.masked_fill(~mask, float("-inf")).argmax(dim=-1)


def predict_entity(sim_c, sim_kg, gate, mask):
    """Blend word and KG similarity under the gate; returns (scores, best unmasked slot)."""
    sim_c = sim_c if torch.is_tensor(sim_c) else torch.as_tensor(sim_c, dtype=torch.float64)
    sim_kg = torch.as_tensor(sim_kg, dtype=sim_c.dtype)
    gate = torch.as_tensor(gate, dtype=sim_c.dtype)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    scores = entity_scores(sim_c, sim_kg, gate)
    return scores, masked_argmax(scores, mask)


def top_relations(logits: Sequence[float], k: int = TOP_RELATIONS) -> list[int]:
    """Indices of the ``k`` largest logits, ties to the lower index."""
    return sorted(range(len(logits)), key=lambda r: (-logits[r], r))[:k]


def consistent_relation(logits: Sequence[float], entity: int, g: KnowledgeGraph, k: int = TOP_RELATIONS) -> int:
    """Best of the top-``k`` relations attached to ``entity``; the top-1 if none is."""
    ranked = top_relations(logits, k)
    for r in ranked:
        if g.connected_1hop(entity, r):
            return r
    return ranked[0]


# --- batching ------------------------------------------------------------------------------


@dataclass
class Batch:
    token_ids: torch.Tensor
    lengths: torch.Tensor
    token_mask: torch.Tensor
    span_labels: torch.Tensor
    span_valid: torch.Tensor
    cand_token_ids: torch.Tensor
    cand_token_mask: torch.Tensor
    cand_mask: torch.Tensor
    cand_rels: torch.Tensor
    cand_rel_mask: torch.Tensor
    gold_slot: torch.Tensor
    gold_relation: torch.Tensor
    gate_label: torch.Tensor
    candidate_ids: list[list[int]] = field(default_factory=list)
    extra: torch.Tensor | None = None

    def __len__(self) -> int:
        return self.token_ids.shape[0]

    def select(self, idx: Sequence[int]) -> "Batch":
        """Rows ``idx`` of an encoded split, trimmed to the longest row present."""
        sel = torch.as_tensor(list(idx), dtype=torch.long)
        T = int(self.lengths[sel].max())
        cmask = self.cand_token_mask[sel]
        L = max(1, int(cmask.any(dim=(0, 1)).nonzero().max()) + 1 if cmask.any() else 1)
        rmask = self.cand_rel_mask[sel]
        K = max(1, int(rmask.any(dim=(0, 1)).nonzero().max()) + 1 if rmask.any() else 1)
        return Batch(
            token_ids=self.token_ids[sel, :T],
            lengths=self.lengths[sel],
            token_mask=self.token_mask[sel, :T],
            span_labels=self.span_labels[sel, :T],
            span_valid=self.span_valid[sel],
            cand_token_ids=self.cand_token_ids[sel, :, :L],
            cand_token_mask=cmask[:, :, :L],
            cand_mask=self.cand_mask[sel],
            cand_rels=self.cand_rels[sel, :, :K],
            cand_rel_mask=rmask[:, :, :K],
            gold_slot=self.gold_slot[sel],
            gold_relation=self.gold_relation[sel],
            gate_label=self.gate_label[sel],
            candidate_ids=[self.candidate_ids[i] for i in sel.tolist()],
            extra=self.extra,
        )


def make_batch(model: QAModel, g: KnowledgeGraph, questions: Sequence[Sequence[str]],
               cand_sets: Sequence[CandidateSet], span_labels: Sequence[Sequence[int]] | None = None,
               span_valid: Sequence[bool] | None = None, gold_entities: Sequence[int] | None = None,
               gold_relations: Sequence[int] | None = None, gate_labels: Sequence[int] | None = None) -> Batch:
    n = model.cfg.n
    B = len(questions)
    extra: dict[str, int] = {}
    T = max(len(q) for q in questions)
    for cs in cand_sets:
        if cs.n != n or len(cs.entries) > n:
            raise ConfigError(f"candidate set sized for n={cs.n}, model expects n={n}")
    L = max([1] + [len(g.entities[c.entity_id].label) for cs in cand_sets for c in cs.entries])
    K = max([1] + [len(c.relation_candidates) for cs in cand_sets for c in cs.entries])

    tok = torch.zeros(B, T, dtype=torch.long)
    lengths = torch.zeros(B, dtype=torch.long)
    labels = torch.zeros(B, T, dtype=model.dtype)
    ctok = torch.zeros(B, n, L, dtype=torch.long)
    ctok_mask = torch.zeros(B, n, L, dtype=torch.bool)
    cmask = torch.zeros(B, n, dtype=torch.bool)
    crel = torch.zeros(B, n, K, dtype=torch.long)
    crel_mask = torch.zeros(B, n, K, dtype=torch.bool)
    gold_slot = torch.full((B,), -1, dtype=torch.long)
    cand_ids = []
    for b, (q, cs) in enumerate(zip(questions, cand_sets)):
        ids = model.token_ids(q, extra)
        tok[b, : len(ids)] = torch.tensor(ids)
        lengths[b] = len(ids)
        if span_labels is not None:
            labels[b, : len(ids)] = torch.tensor(span_labels[b], dtype=model.dtype)
        for j, c in enumerate(cs.entries):
            lab = model.token_ids(g.entities[c.entity_id].label, extra)
            ctok[b, j, : len(lab)] = torch.tensor(lab)
            ctok_mask[b, j, : len(lab)] = True
            cmask[b, j] = True
            rels = c.relation_candidates
            if rels:
                crel[b, j, : len(rels)] = torch.tensor(rels)
                crel_mask[b, j, : len(rels)] = True
        cand_ids.append(cs.entity_ids)
        if gold_entities is not None:
            slot = cs.index_of(gold_entities[b])
            gold_slot[b] = -1 if slot is None else slot
    token_mask = torch.arange(T).expand(B, T) < lengths.view(-1, 1)
    return Batch(
        token_ids=tok,
        lengths=lengths,
        token_mask=token_mask,
        span_labels=labels,
        span_valid=torch.tensor(span_valid if span_valid is not None else [span_labels is not None] * B),
        cand_token_ids=ctok,
        cand_token_mask=ctok_mask,
        cand_mask=cmask,
        cand_rels=crel,
        cand_rel_mask=crel_mask,
        gold_slot=gold_slot,
        gold_relation=torch.tensor(gold_relations if gold_relations is not None else [0] * B, dtype=torch.long),
        gate_label=torch.tensor(gate_labels if gate_labels is not None else [0] * B, dtype=model.dtype),
        candidate_ids=cand_ids,
        extra=model.extra_vectors(extra),
    )


# --- inference -----------------------------------------------------------------------------


@dataclass
class Prediction:
    status: str
    entity: int | None = None
    relation: int | None = None
    answers: list[int] = field(default_factory=list)
    top1_relation: int | None = None
    top_relations: list[int] = field(default_factory=list)
    entity_slot: int | None = None
    gate: float | None = None
    sim_c: list[float] = field(default_factory=list)
    sim_kg: list[float] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    span_probs: list[float] = field(default_factory=list)


def predictions_from_outputs(out: Outputs, batch: Batch, g: KnowledgeGraph) -> list[Prediction]:
    preds = []
    for b in range(len(batch)):
        cand_ids = batch.candidate_ids[b]
        T = int(batch.lengths[b])
        if not cand_ids:
            preds.append(Prediction("abstain", span_probs=out.span_probs[b, :T].tolist()))
            continue
        slot = int(masked_argmax(out.scores[b], batch.cand_mask[b]))
        entity = cand_ids[slot]
        logits = out.relation_logits[b].tolist()
        ranked = top_relations(logits)
        relation = consistent_relation(logits, entity, g)
        k = len(cand_ids)
        preds.append(Prediction(
            status="ok",
            entity=entity,
            relation=relation,
            answers=g.answer_lookup(entity, relation),
            top1_relation=ranked[0],
            top_relations=ranked,
            entity_slot=slot,
            gate=float(out.gate[b]),
            sim_c=out.sim_c[b, :k].tolist(),
            sim_kg=out.sim_kg[b, :k].tolist(),
            scores=out.scores[b, :k].tolist(),
            span_probs=out.span_probs[b, :T].tolist(),
        ))
    return preds


@torch.no_grad()
def infer(model: QAModel, question: Sequence[str], g: KnowledgeGraph, cands: CandidateSet,
          use_gate: bool = True) -> Prediction:
    """Full deterministic pipeline for one tokenized question."""
    if not cands.entries:
        return Prediction("abstain")
    batch = make_batch(model, g, [list(question)], [cands])
    out = model(batch, mode="argmax", use_gate=use_gate)
    return predictions_from_outputs(out, batch, g)[0]
