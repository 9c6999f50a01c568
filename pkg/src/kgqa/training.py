"""Multi-task objective and the training loop."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from .candidates import DEFAULT_RERANK_WEIGHTS, TFIDF_ONLY_WEIGHTS, CandidateSet, TfIdfIndex, candidate_pipeline
from .dataset import Example, with_gate_label
from .embeddings import KgEmbeddingTable, WordEmbeddingTable
from .errors import ConfigError, DataError, NumericError, ShapeError
from .kg_store import KnowledgeGraph
from .model import Batch, ModelConfig, Outputs, QAModel, make_batch, masked_argmax
from .neural import BiLSTM

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
LOSS_COMPONENTS = ("L_span", "L_rel", "L_ent", "L_amb", "penalty")


@dataclass
class TrainConfig:
    n: int = 50
    batch_size: int = 100
    epochs: int = 100
    learning_rate: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    tau: float = 1.0
    soft_sharing_coefficient: float = 1.0
    use_rel_loss: bool = True
    use_gate: bool = True
    use_soft_sharing: bool = True
    use_rerank: bool = True
    gate_stop_grad: bool = False
    hidden_dim: int = 300
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.n < 1 or self.epochs < 0:
            raise ConfigError("n >= 1 and epochs >= 0 required")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def rerank_weights(self) -> tuple[float, ...]:
        return DEFAULT_RERANK_WEIGHTS if self.use_rerank else TFIDF_ONLY_WEIGHTS

    @property
    def torch_dtype(self) -> torch.dtype:
        return getattr(torch, self.dtype)


# --- loss components -----------------------------------------------------------------------


def span_loss(probs: torch.Tensor, labels: torch.Tensor, token_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean token binary cross-entropy; batched input averages per question first."""
    if probs.shape != labels.shape:
        raise ShapeError(f"span probs {tuple(probs.shape)} vs labels {tuple(labels.shape)}")
    p = probs.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    bce = -(labels * torch.log(p) + (1 - labels) * torch.log(1 - p))
    if token_mask is None:
        return bce.mean(dim=-1)
    m = token_mask.to(bce.dtype)
    return (bce * m).sum(dim=-1) / m.sum(dim=-1)


def compute_class_weights(examples: Sequence[Example], r_n: int) -> torch.Tensor:
    """Inverse relation frequency, scaled so a balanced training set gives all ones."""
    if not examples:
        raise DataError("class weights need at least one example")
    counts = [0] * r_n
    for ex in examples:
        counts[ex.relation] += 1
    total = len(examples)
    return torch.tensor([total / (r_n * c) if c else 1.0 for c in counts], dtype=torch.float64)


def relation_loss(logits: torch.Tensor, gold: torch.Tensor | int, weights: torch.Tensor) -> torch.Tensor:
    gold = torch.as_tensor(gold, dtype=torch.long)
    r_n = logits.shape[-1]
    if ((gold < 0) | (gold >= r_n)).any():
        raise IndexError(f"gold relation out of range for {r_n} relations")
    logp = torch.log_softmax(logits, dim=-1)
    picked = logp.gather(-1, gold.unsqueeze(-1)).squeeze(-1)
    return -weights.to(logits.dtype)[gold] * picked


def entity_loss(scores: torch.Tensor, gold: torch.Tensor | int, mask: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of a softmax over the unmasked entity scores."""
    gold = torch.as_tensor(gold, dtype=torch.long)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    gold_ok = (gold >= 0) & mask.gather(-1, gold.clamp_min(0).unsqueeze(-1)).squeeze(-1)
    if not bool(gold_ok.all()):
        raise DataError("gold candidate slot is masked or missing")
    logits = scores.masked_fill(~mask, float("-inf"))
    logp = torch.log_softmax(logits, dim=-1)
    return -logp.gather(-1, gold.unsqueeze(-1)).squeeze(-1)


def gate_loss(gate: torch.Tensor, label: torch.Tensor | float) -> torch.Tensor:
    label = torch.as_tensor(label, dtype=gate.dtype)
    g = gate.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -(label * torch.log(g) + (1 - label) * torch.log(1 - g))


def soft_sharing_penalty(span: BiLSTM | Sequence[torch.Tensor], rel: BiLSTM | Sequence[torch.Tensor],
                         coefficient: float = 1.0) -> torch.Tensor:
    """coefficient * sum of squared Frobenius distances between first-layer LSTM weights.

    Either encoder may be given as its list of ``[W_fwd, U_fwd, W_bwd, U_bwd]`` tensors.
    """
    a = span.first_layer_weights() if isinstance(span, BiLSTM) else list(span)
    b = rel.first_layer_weights() if isinstance(rel, BiLSTM) else list(rel)
    total = a[0].new_zeros(())
    for wa, wb in zip(a, b):
        if wa.shape != wb.shape:
            raise ShapeError(f"sharing penalty needs equal shapes, got {tuple(wa.shape)} and {tuple(wb.shape)}")
        total = total + ((wa - wb) ** 2).sum()
    return coefficient * total


def total_loss(components: dict[str, torch.Tensor], cfg: TrainConfig) -> torch.Tensor:
    """Unweighted sum of the enabled components."""
    enabled = {
        "L_span": True,
        "L_rel": cfg.use_rel_loss,
        "L_ent": True,
        "L_amb": cfg.use_gate,
        "penalty": cfg.use_soft_sharing,
    }
    total = None
    for name in LOSS_COMPONENTS:
        if not enabled[name] or name not in components:
            continue
        value = components[name]
        if not torch.isfinite(value).all():
            raise NumericError(f"loss component {name} is not finite")
        total = value if total is None else total + value
    if total is None:
        return torch.zeros(())
    return total


def loss_components(model: QAModel, out: Outputs, batch: Batch, weights: torch.Tensor,
                    cfg: TrainConfig) -> dict[str, torch.Tensor]:
    comps = {}
    valid = batch.span_valid
    per_q = span_loss(out.span_probs, batch.span_labels, batch.token_mask)
    comps["L_span"] = per_q[valid].mean() if bool(valid.any()) else per_q.new_zeros(())
    comps["L_rel"] = relation_loss(out.relation_logits, batch.gold_relation, weights).mean()
    comps["L_ent"] = entity_loss(out.scores, batch.gold_slot, batch.cand_mask).mean()
    if cfg.use_gate:
        comps["L_amb"] = gate_loss(out.gate_for_loss, batch.gate_label).mean()
    if cfg.use_soft_sharing:
        comps["penalty"] = soft_sharing_penalty(model.span_lstm, model.rel_lstm, cfg.soft_sharing_coefficient)
    return comps


# --- data preparation ----------------------------------------------------------------------


@dataclass
class PreparedSplit:
    examples: list[Example]
    candidates: list[CandidateSet]

    def __len__(self) -> int:
        return len(self.examples)


def prepare_split(examples: Sequence[Example], index: TfIdfIndex, n: int,
                  weights: Sequence[float] = DEFAULT_RERANK_WEIGHTS, inject_gold: bool = False) -> PreparedSplit:
    """Candidate sets and gate labels for every question; gold injection only for training."""
    g = index.graph
    exs, sets = [], []
    for ex in examples:
        cs = candidate_pipeline(index, ex.tokens, n, weights, gold=ex.entity if inject_gold else None,
                                question_id=ex.qid)
        exs.append(with_gate_label(ex, cs, g))
        sets.append(cs)
    return PreparedSplit(exs, sets)


def batch_for(model: QAModel, g: KnowledgeGraph, split: PreparedSplit, idx: Sequence[int]) -> Batch:
    exs = [split.examples[i] for i in idx]
    return make_batch(
        model, g,
        [ex.tokens for ex in exs],
        [split.candidates[i] for i in idx],
        span_labels=[ex.span_labels for ex in exs],
        span_valid=[ex.span_ok for ex in exs],
        gold_entities=[ex.entity for ex in exs],
        gold_relations=[ex.relation for ex in exs],
        gate_labels=[ex.gate_label or 0 for ex in exs],
    )


@torch.no_grad()
def entity_accuracy(model: QAModel, g: KnowledgeGraph, split: PreparedSplit, use_gate: bool = True,
                    batch_size: int = 200, encoded: Batch | None = None) -> float:
    if not len(split):
        return 0.0
    if encoded is None:
        encoded = batch_for(model, g, split, range(len(split)))
    correct = 0
    for start in range(0, len(split), batch_size):
        idx = [i for i in range(start, min(start + batch_size, len(split))) if split.candidates[i].entries]
        if not idx:
            continue
        batch = encoded.select(idx)
        out = model(batch, mode="argmax", use_gate=use_gate)
        slots = masked_argmax(out.scores, batch.cand_mask)
        for b, i in enumerate(idx):
            correct += batch.candidate_ids[b][int(slots[b])] == split.examples[i].entity
    return correct / len(split)


# --- training loop -------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: QAModel
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_valid_accuracy: float = -1.0
    config: TrainConfig | None = None


def build_model(cfg: TrainConfig, g: KnowledgeGraph, words: WordEmbeddingTable, kg: KgEmbeddingTable) -> QAModel:
    mcfg = ModelConfig(n=cfg.n, relation_count=g.num_relations, word_dim=words.dim, kg_dim=kg.dim,
                       hidden_dim=cfg.hidden_dim, tau=cfg.tau, seed=cfg.seed, word_seed=words.seed)
    return QAModel.build(mcfg, words, kg, cfg.torch_dtype)


def train(train_split: PreparedSplit, valid_split: PreparedSplit, g: KnowledgeGraph,
          words: WordEmbeddingTable, kg: KgEmbeddingTable, cfg: TrainConfig,
          out_dir: str | Path | None = None) -> TrainResult:
    """Adam on mini-batches; keeps the parameters with the best validation entity accuracy.

    The latest epoch wins among equally accurate ones.
    """
    if not len(train_split) or not len(valid_split):
        raise DataError("train and validation splits must be non-empty")
    torch.manual_seed(cfg.seed)
    model = build_model(cfg, g, words, kg)
    trainable = [p for name, p in model.named_parameters()
                 if cfg.use_gate or name != "gate_weight"]
    opt = torch.optim.Adam(trainable, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps)
    weights = compute_class_weights(train_split.examples, g.num_relations)
    gen = torch.Generator().manual_seed(cfg.seed)
    usable = [i for i in range(len(train_split)) if train_split.candidates[i].entries]
    train_enc = batch_for(model, g, train_split, range(len(train_split)))
    valid_enc = batch_for(model, g, valid_split, range(len(valid_split)))

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
    result = TrainResult(model, config=cfg)
    best_state = copy.deepcopy(model.state_dict())
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        perm = torch.randperm(len(usable), generator=gen).tolist()
        sums = {k: 0.0 for k in LOSS_COMPONENTS}
        sums["total"] = 0.0
        n_batches = 0
        for bi, start in enumerate(range(0, len(perm), cfg.batch_size)):
            idx = [usable[j] for j in perm[start:start + cfg.batch_size]]
            batch = train_enc.select(idx)
            out = model(batch, mode="soft", generator=gen, use_gate=cfg.use_gate,
                        gate_stop_grad=cfg.gate_stop_grad)
            comps = loss_components(model, out, batch, weights, cfg)
            try:
                loss = total_loss(comps, cfg)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}, batch {bi}: {exc}") from None
            opt.zero_grad()
            loss.backward()
            opt.step()
            for k, v in comps.items():
                sums[k] += float(v.detach())
            sums["total"] += float(loss.detach())
            n_batches += 1
        model.eval()
        acc = entity_accuracy(model, g, valid_split, use_gate=cfg.use_gate, encoded=valid_enc)
        record = {"epoch": epoch, **{k: v / max(n_batches, 1) for k, v in sums.items()}, "valid_entity_acc": acc}
        result.log.append(record)
        logger.info("epoch %d total %.4f (%s) valid_entity_acc %.4f", epoch, record["total"],
                    " ".join(f"{k} {record[k]:.4f}" for k in LOSS_COMPONENTS), acc)
        # ties go to the later epoch: same validation accuracy, more training on the other heads
        if acc >= result.best_valid_accuracy:
            result.best_valid_accuracy = acc
            result.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
            if out_path is not None:
                model.save(out_path / "model.pt", extra={"train_config": config_dict(cfg), "epoch": epoch})
    model.load_state_dict(best_state)
    if out_path is not None:
        write_log(out_path / "train_log.jsonl", result.log)
    return result


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(cfg.betas)
    return d


def write_log(path: str | Path, records: Sequence[dict]) -> None:
    """One JSON object per line: epoch, the five loss components, total, valid_entity_acc."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

