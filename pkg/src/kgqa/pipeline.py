"""On-disk layout and end-to-end runs shared by the CLI and the tests.

A data directory holds ``triples.tsv``, ``entities.tsv`` and one question
file per split (``train.tsv``, ``valid.tsv``, ``test.tsv``). Training
artifacts go to a separate run directory.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .candidates import TfIdfIndex, build_tfidf_index
from .dataset import Example, SyntheticConfig, corpus_vocabulary, generate_synthetic, load_simplequestions, write_questions
from .embeddings import KgEmbeddingTable, TranseConfig, WordEmbeddingTable, load_word_vectors, synth_word_vectors, train_transe
from .errors import ConfigError, DataError
from .evaluation import EvalReport, evaluate
from .kg_store import KnowledgeGraph, load_graph, write_graph
from .model import QAModel
from .training import TrainConfig, TrainResult, prepare_split, train

SPLITS = ("train", "valid", "test")
TRIPLES_FILE = "triples.tsv"
ENTITIES_FILE = "entities.tsv"
KG_EMBEDDINGS_FILE = "kg_embeddings.json"
MODEL_FILE = "model.pt"
REPORT_FILE = "report.json"


@dataclass
class RunConfig:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    transe: TranseConfig = field(default_factory=TranseConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    word_seed: int = 0


def _build(cls, values: dict | None, section: str):
    values = dict(values or {})
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    for k in ("split", "betas"):
        if k in values:
            values[k] = tuple(values[k])
    return cls(**values)


def load_config(path: str | Path | None) -> RunConfig:
    """YAML with optional top-level sections ``synthetic``, ``transe``, ``train`` and key ``word_seed``."""
    if path is None:
        return RunConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    unknown = sorted(set(raw) - {"synthetic", "transe", "train", "word_seed"})
    if unknown:
        raise ConfigError(f"{path}: unknown section(s): {', '.join(unknown)}")
    try:
        return RunConfig(
            synthetic=_build(SyntheticConfig, raw.get("synthetic"), "synthetic"),
            transe=_build(TranseConfig, raw.get("transe"), "transe"),
            train=_build(TrainConfig, raw.get("train"), "train"),
            word_seed=int(raw.get("word_seed", 0)),
        )
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def config_to_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["synthetic"].pop("templates", None)
    return json.loads(json.dumps(d))


# --- data directories ----------------------------------------------------------------------


def write_data_dir(out: str | Path, g: KnowledgeGraph, splits: dict[str, list[Example]]) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_graph(g, out / TRIPLES_FILE, out / ENTITIES_FILE)
    for name, exs in splits.items():
        write_questions(out / f"{name}.tsv", exs, g)
    return out


def load_data_dir(path: str | Path, splits=SPLITS) -> tuple[KnowledgeGraph, dict[str, list[Example]]]:
    path = Path(path)
    for f in (TRIPLES_FILE, ENTITIES_FILE):
        if not (path / f).is_file():
            raise DataError(f"{path}: missing {f}")
    g = load_graph(path / TRIPLES_FILE, path / ENTITIES_FILE)
    out = {}
    for name in splits:
        p = path / f"{name}.tsv"
        if p.is_file():
            out[name], _ = load_simplequestions(p, g)
    return g, out


def word_table(g: KnowledgeGraph, splits: dict[str, list[Example]], seed: int = 0,
               vectors_path: str | Path | None = None) -> WordEmbeddingTable:
    vocab = corpus_vocabulary(g, *splits.values())
    if vectors_path is not None:
        return load_word_vectors(vectors_path, vocab, seed)
    return synth_word_vectors(vocab, seed=seed)


# --- end to end ----------------------------------------------------------------------------


@dataclass
class PipelineResult:
    graph: KnowledgeGraph
    index: TfIdfIndex
    kg: KgEmbeddingTable
    words: WordEmbeddingTable
    training: TrainResult
    report: EvalReport


def train_and_evaluate(g: KnowledgeGraph, splits: dict[str, list[Example]], kg: KgEmbeddingTable,
                       words: WordEmbeddingTable, cfg: TrainConfig, out_dir: str | Path | None = None,
                       eval_split: str = "test") -> tuple[TrainResult, EvalReport, TfIdfIndex]:
    index = build_tfidf_index(g)
    w = cfg.rerank_weights
    tr = prepare_split(splits["train"], index, cfg.n, w, inject_gold=True)
    va = prepare_split(splits["valid"], index, cfg.n, w)
    ev = prepare_split(splits[eval_split], index, cfg.n, w)
    res = train(tr, va, g, words, kg, cfg, out_dir)
    report = evaluate(res.model, ev, g, cfg.n, use_gate=cfg.use_gate, split_name=eval_split)
    if out_dir is not None:
        report.save(Path(out_dir) / REPORT_FILE)
    return res, report, index


def run_synthetic(cfg: RunConfig, out_dir: str | Path | None = None) -> PipelineResult:
    """Generate the corpus, fit TransE, train the QA model and evaluate on the test split."""
    corpus = generate_synthetic(cfg.synthetic)
    g = corpus.graph
    kg = train_transe(g, cfg.transe)
    words = word_table(g, corpus.splits, cfg.word_seed)
    if out_dir is not None:
        out = Path(out_dir)
        write_data_dir(out / "data", g, corpus.splits)
        kg.save(out / KG_EMBEDDINGS_FILE)
    res, report, index = train_and_evaluate(g, corpus.splits, kg, words, cfg.train,
                                            None if out_dir is None else Path(out_dir) / "run")
    return PipelineResult(g, index, kg, words, res, report)


def load_checkpoint(path: str | Path, g: KnowledgeGraph, n: int | None = None) -> tuple[QAModel, TrainConfig]:
    model = QAModel.load(path, n=n, relation_count=g.num_relations)
    raw = dict(getattr(model, "checkpoint_extra", {}).get("train_config", {}))
    if "betas" in raw:
        raw["betas"] = tuple(raw["betas"])
    cfg = TrainConfig(**raw) if raw else TrainConfig(n=model.cfg.n)
    return model, cfg
