"""Evaluation metrics, ablation runs, the ambiguity breakdown and single-question inference."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import torch

from .candidates import DEFAULT_RERANK_WEIGHTS, TFIDF_ONLY_WEIGHTS, CandidateSet, TfIdfIndex, candidate_pipeline
from .dataset import Example
from .embeddings import KgEmbeddingTable, WordEmbeddingTable
from .errors import ConfigError
from .kg_store import KnowledgeGraph, tokenize
from .model import SPAN_THRESHOLD, Prediction, QAModel, infer, predictions_from_outputs
from .training import PreparedSplit, TrainConfig, batch_for, prepare_split, train

logger = logging.getLogger(__name__)

REPORT_FORMAT = "kgqa-eval"
REPORT_VERSION = 1
CLASSES = ("none", "soft", "hard")


# --- ambiguity classes ---------------------------------------------------------------------


def ambiguity_class(cands: CandidateSet, gold: int, gold_relation: int, g: KnowledgeGraph) -> str:
    """``none`` if the gold label is unique among the candidates.

    Otherwise ``soft`` when the gold relation is attached to the gold entity
    and to none of its same-label rivals, ``hard`` when it is not.
    """
    target = g.entities[gold].label
    rivals = [c.entity_id for c in cands.entries
              if c.entity_id != gold and g.entities[c.entity_id].label == target]
    present = cands.index_of(gold) is not None
    if len(rivals) + present < 2:
        return "none"
    if g.connected_1hop(gold, gold_relation) and not any(g.connected_1hop(r, gold_relation) for r in rivals):
        return "soft"
    return "hard"


# --- metrics -------------------------------------------------------------------------------


@dataclass
class QuestionRecord:
    qid: str
    gold_entity: int
    gold_relation: int
    status: str
    predicted_entity: int | None
    predicted_relation: int | None
    top1_relation: int | None
    candidate_present: bool
    ambiguity: str
    span_correct: int
    span_total: int

    @property
    def entity_correct(self) -> bool:
        return self.predicted_entity == self.gold_entity

    @property
    def relation_correct(self) -> bool:
        return self.predicted_relation == self.gold_relation


@dataclass
class Metrics:
    questions: int
    entity_linking_accuracy: float
    qa_accuracy: float
    candidate_present_rate: float
    relation_accuracy: float
    top1_relation_accuracy: float
    span_token_accuracy: float
    class_counts: dict[str, int] = field(default_factory=dict)
    class_entity_accuracy: dict[str, float] = field(default_factory=dict)
    soft_correct: int = 0
    rescued: int = 0
    rescue_fraction: float = 0.0
    abstained: int = 0


def check_bounds(m: Metrics) -> None:
    """qa <= entity linking <= candidate present, and every rate in [0, 1]."""
    rates = [m.entity_linking_accuracy, m.qa_accuracy, m.candidate_present_rate, m.relation_accuracy,
             m.top1_relation_accuracy, m.span_token_accuracy, m.rescue_fraction,
             *m.class_entity_accuracy.values()]
    if any(not 0.0 <= r <= 1.0 for r in rates):
        raise AssertionError(f"rate outside [0, 1]: {rates}")
    if not m.qa_accuracy <= m.entity_linking_accuracy <= m.candidate_present_rate:
        raise AssertionError(
            f"bound chain violated: qa {m.qa_accuracy} <= entity {m.entity_linking_accuracy}"
            f" <= present {m.candidate_present_rate}")


def _rate(num: int, den: int) -> float:
    return num / den if den else 0.0


def compute_metrics(records: Sequence[QuestionRecord]) -> Metrics:
    total = len(records)
    ent = sum(r.entity_correct for r in records)
    qa = sum(r.entity_correct and r.relation_correct for r in records)
    present = sum(r.candidate_present for r in records)
    rel = sum(r.relation_correct for r in records)
    top1 = sum(r.top1_relation == r.gold_relation for r in records)
    span_ok = sum(r.span_correct for r in records)
    span_all = sum(r.span_total for r in records)
    counts = {c: sum(r.ambiguity == c for r in records) for c in CLASSES}
    per_class = {c: _rate(sum(r.entity_correct for r in records if r.ambiguity == c), counts[c]) for c in CLASSES}
    soft_ok = [r for r in records if r.ambiguity == "soft" and r.entity_correct]
    rescued = sum(r.top1_relation != r.gold_relation for r in soft_ok)
    m = Metrics(
        questions=total,
        entity_linking_accuracy=_rate(ent, total),
        qa_accuracy=_rate(qa, total),
        candidate_present_rate=_rate(present, total),
        relation_accuracy=_rate(rel, total),
        top1_relation_accuracy=_rate(top1, total),
        span_token_accuracy=_rate(span_ok, span_all),
        class_counts=counts,
        class_entity_accuracy=per_class,
        soft_correct=len(soft_ok),
        rescued=rescued,
        rescue_fraction=_rate(rescued, len(soft_ok)),
        abstained=sum(r.status == "abstain" for r in records),
    )
    check_bounds(m)
    return m


def question_record(ex: Example, cands: CandidateSet, pred: Prediction, g: KnowledgeGraph) -> QuestionRecord:
    span_correct = span_total = 0
    if ex.span_ok and pred.span_probs:
        tags = [int(p > SPAN_THRESHOLD) for p in pred.span_probs]
        span_correct = sum(int(a == b) for a, b in zip(tags, ex.span_labels))
        span_total = len(ex.span_labels)
    return QuestionRecord(
        qid=ex.qid,
        gold_entity=ex.entity,
        gold_relation=ex.relation,
        status=pred.status,
        predicted_entity=pred.entity,
        predicted_relation=pred.relation,
        top1_relation=pred.top1_relation,
        candidate_present=cands.index_of(ex.entity) is not None,
        ambiguity=ambiguity_class(cands, ex.entity, ex.relation, g),
        span_correct=span_correct,
        span_total=span_total,
    )


# --- evaluate ------------------------------------------------------------------------------


@dataclass
class EvalReport:
    metrics: Metrics
    records: list[QuestionRecord]
    n: int
    split: str = "test"
    variant: str = "full"

    def to_dict(self, include_questions: bool = True) -> dict:
        d = {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "n": self.n,
            "split": self.split,
            "variant": self.variant,
            "metrics": asdict(self.metrics),
        }
        if include_questions:
            d["questions"] = [asdict(r) for r in self.records]
        return d

    def to_json(self, include_questions: bool = True) -> str:
        return json.dumps(self.to_dict(include_questions), sort_keys=True, indent=1)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


@torch.no_grad()
def predict_split(model: QAModel, split: PreparedSplit, g: KnowledgeGraph, use_gate: bool = True,
                  batch_size: int = 200) -> list[Prediction]:
    """Noise-free inference for every question, in split order."""
    preds: list[Prediction | None] = [None] * len(split)
    live = [i for i in range(len(split)) if split.candidates[i].entries]
    for i in range(len(split)):
        if not split.candidates[i].entries:
            preds[i] = Prediction("abstain")
    if live:
        encoded = batch_for(model, g, split, live)
        for start in range(0, len(live), batch_size):
            rows = list(range(start, min(start + batch_size, len(live))))
            batch = encoded.select(rows)
            out = model(batch, mode="argmax", use_gate=use_gate)
            for j, p in zip(rows, predictions_from_outputs(out, batch, g)):
                preds[live[j]] = p
    return preds


def evaluate(model: QAModel, split: PreparedSplit, g: KnowledgeGraph, n: int | None = None,
             use_gate: bool = True, split_name: str = "test", variant: str = "full") -> EvalReport:
    n = model.cfg.n if n is None else n
    if model.cfg.n != n:
        raise ConfigError(f"model was trained with n={model.cfg.n}, evaluation asked for n={n}")
    for cs in split.candidates:
        if cs.n != n:
            raise ConfigError(f"candidate set {cs.question_id!r} was generated with n={cs.n}, expected {n}")
    preds = predict_split(model, split, g, use_gate=use_gate)
    records = [question_record(ex, cs, p, g) for ex, cs, p in zip(split.examples, split.candidates, preds)]
    return EvalReport(compute_metrics(records), records, n, split_name, variant)


def format_metrics(m: Metrics, title: str = "") -> str:
    lines = [title] if title else []
    rows = [
        ("questions", str(m.questions)),
        ("entity linking accuracy", f"{m.entity_linking_accuracy:.4f}"),
        ("QA accuracy", f"{m.qa_accuracy:.4f}"),
        ("candidate present rate", f"{m.candidate_present_rate:.4f}"),
        ("relation accuracy", f"{m.relation_accuracy:.4f}"),
        ("top-1 relation accuracy", f"{m.top1_relation_accuracy:.4f}"),
        ("span token accuracy", f"{m.span_token_accuracy:.4f}"),
    ]
    for c in CLASSES:
        rows.append((f"{c} questions (entity acc)", f"{m.class_counts.get(c, 0)} ({m.class_entity_accuracy.get(c, 0.0):.4f})"))
    rows.append(("soft rescued by KG similarity", f"{m.rescued}/{m.soft_correct} ({m.rescue_fraction:.4f})"))
    width = max(len(k) for k, _ in rows)
    lines += [f"{k:<{width}}  {v}" for k, v in rows]
    return "\n".join(lines)


# --- ablation ------------------------------------------------------------------------------

VARIANTS = {
    "full": {},
    "no_relation_loss": {"use_rel_loss": False},
    "no_gate": {"use_gate": False},
    "no_soft_sharing": {"use_soft_sharing": False},
    "no_rerank": {"use_rerank": False},
}


@dataclass
class AblationRow:
    variant: str
    config: TrainConfig
    report: EvalReport
    best_epoch: int
    best_valid_accuracy: float


def run_variant(variant: str, base: TrainConfig, splits: dict[str, Sequence[Example]], index: TfIdfIndex,
                words: WordEmbeddingTable, kg: KgEmbeddingTable, out_dir: str | Path | None = None,
                eval_split: str = "test") -> AblationRow:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    cfg = replace(base, **VARIANTS[variant])
    g = index.graph
    w = cfg.rerank_weights
    tr = prepare_split(splits["train"], index, cfg.n, w, inject_gold=True)
    va = prepare_split(splits["valid"], index, cfg.n, w)
    ev = prepare_split(splits[eval_split], index, cfg.n, w)
    res = train(tr, va, g, words, kg, cfg, out_dir)
    report = evaluate(res.model, ev, g, cfg.n, use_gate=cfg.use_gate, split_name=eval_split, variant=variant)
    return AblationRow(variant, cfg, report, res.best_epoch, res.best_valid_accuracy)


def ablate(base: TrainConfig, splits: dict[str, Sequence[Example]], index: TfIdfIndex,
           words: WordEmbeddingTable, kg: KgEmbeddingTable, variants: Sequence[str] | None = None,
           out_dir: str | Path | None = None) -> list[AblationRow]:
    """Full model plus one-component-removed variants, all from the same seed."""
    rows = []
    for v in variants or list(VARIANTS):
        sub = Path(out_dir) / v if out_dir is not None else None
        logger.info("ablation variant %s", v)
        rows.append(run_variant(v, base, splits, index, words, kg, sub))
    return rows


def format_ablation(rows: Sequence[AblationRow]) -> str:
    head = f"{'variant':<18} {'entity':>8} {'qa':>8} {'present':>8} {'soft':>8} {'hard':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        m = r.report.metrics
        lines.append(f"{r.variant:<18} {m.entity_linking_accuracy:>8.4f} {m.qa_accuracy:>8.4f} "
                     f"{m.candidate_present_rate:>8.4f} {m.class_entity_accuracy['soft']:>8.4f} "
                     f"{m.class_entity_accuracy['hard']:>8.4f}")
    return "\n".join(lines)


def ablation_dict(rows: Sequence[AblationRow]) -> dict:
    return {
        "format": "kgqa-ablation",
        "version": REPORT_VERSION,
        "rows": [{"variant": r.variant, "best_epoch": r.best_epoch, "best_valid_accuracy": r.best_valid_accuracy,
                  "metrics": asdict(r.report.metrics)} for r in rows],
    }


# --- analysis ------------------------------------------------------------------------------


def analysis_report(report: EvalReport) -> dict:
    """Ambiguity breakdown of an evaluated split."""
    m = report.metrics
    total = max(m.questions, 1)
    return {
        "questions": m.questions,
        "class_counts": dict(m.class_counts),
        "class_fraction": {c: m.class_counts[c] / total for c in CLASSES},
        "class_entity_accuracy": dict(m.class_entity_accuracy),
        "soft_correct": m.soft_correct,
        "soft_correct_wrong_relation": m.rescued,
        "rescue_fraction": m.rescue_fraction,
    }


def format_analysis(a: dict) -> str:
    lines = [f"{'class':<6} {'count':>6} {'share':>7} {'entity acc':>11}"]
    for c in CLASSES:
        lines.append(f"{c:<6} {a['class_counts'][c]:>6} {a['class_fraction'][c]:>7.3f} {a['class_entity_accuracy'][c]:>11.4f}")
    lines.append(f"correct soft questions with a wrong top-1 relation: "
                 f"{a['soft_correct_wrong_relation']}/{a['soft_correct']} ({a['rescue_fraction']:.4f})")
    return "\n".join(lines)


# --- ask -----------------------------------------------------------------------------------


def ask(model: QAModel, index: TfIdfIndex, question: str, use_rerank: bool = True) -> dict:
    """Answer one free-text question and expose the scores behind the decision."""
    g = index.graph
    tokens = tokenize(question)
    weights = DEFAULT_RERANK_WEIGHTS if use_rerank else TFIDF_ONLY_WEIGHTS
    cands = candidate_pipeline(index, tokens, model.cfg.n, weights)
    pred = infer(model, tokens, g, cands)
    if pred.status != "ok":
        return {"status": "abstain", "question": " ".join(tokens),
                "reason": "no entity label shares a term with the question"}
    order = sorted(range(len(pred.scores)), key=lambda j: (-pred.scores[j], j))[:5]
    return {
        "status": "ok",
        "question": " ".join(tokens),
        "entity": {"id": pred.entity, "key": g.entities[pred.entity].key, "label": g.label(pred.entity)},
        "relation": {"id": pred.relation, "key": g.relations[pred.relation]},
        "top1_relation": {"id": pred.top1_relation, "key": g.relations[pred.top1_relation]},
        "answers": [{"id": a, "key": g.entities[a].key, "label": g.label(a)} for a in pred.answers],
        "gate": pred.gate,
        "top_candidates": [
            {"id": cands.entries[j].entity_id, "label": g.label(cands.entries[j].entity_id),
             "sim_c": pred.sim_c[j], "sim_kg": pred.sim_kg[j], "score": pred.scores[j]}
            for j in order
        ],
    }


def format_answer(rec: dict) -> str:
    if rec["status"] != "ok":
        return f"abstain: {rec['reason']}"
    e, r = rec["entity"], rec["relation"]
    lines = [
        f"entity   {e['id']} {e['label']!r}",
        f"relation {r['id']} {r['key']}",
        "answers  " + (", ".join(f"{a['id']} {a['label']!r}" for a in rec["answers"]) or "(none)"),
        f"g_amb    {rec['gate']:.4f}",
        f"{'cand':>6} {'sim_c':>8} {'sim_kg':>8} {'score':>8}  label",
    ]
    for c in rec["top_candidates"]:
        lines.append(f"{c['id']:>6} {c['sim_c']:>8.4f} {c['sim_kg']:>8.4f} {c['score']:>8.4f}  {c['label']}")
    return "\n".join(lines)
