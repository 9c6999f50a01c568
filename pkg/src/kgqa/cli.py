"""``kgqa`` command line.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
failure, 4 abstained (``ask`` found no candidate entity).
"""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import click

from . import pipeline as pl
from .candidates import build_tfidf_index
from .dataset import generate_synthetic
from .embeddings import KgEmbeddingTable, train_transe
from .errors import ConfigError, DataError, NoCandidateError, NumericError, ShapeError
from .evaluation import (ablate, ablation_dict, analysis_report, ask, evaluate, format_ablation,
                         format_analysis, format_answer, format_metrics)
from .training import prepare_split

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_ABSTAIN = 0, 1, 2, 3, 4


def _run(fn):
    try:
        fn()
    except (ConfigError, click.UsageError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_USAGE)
    except (DataError, ShapeError, FileNotFoundError) as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(EXIT_DATA)
    except NumericError as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    except NoCandidateError as exc:
        click.echo(f"abstain: {exc}", err=True)
        sys.exit(EXIT_ABSTAIN)


def _config(ctx_cfg, seed, n):
    cfg = pl.load_config(ctx_cfg)
    if seed is not None:
        cfg = replace(cfg, synthetic=replace(cfg.synthetic, seed=seed), transe=replace(cfg.transe, seed=seed),
                      train=replace(cfg.train, seed=seed), word_seed=seed)
    if n is not None:
        cfg = replace(cfg, train=replace(cfg.train, n=n))
    return cfg


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n", encoding="utf-8")


seed_opt = click.option("--seed", type=int, default=None, help="Overrides every seed in the config.")
n_opt = click.option("--n", "n", type=click.IntRange(min=1), default=None,
                     help="Candidate set size (e.g. 100, 200, 300).")
config_opt = click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
                          help="YAML config with sections synthetic / transe / train.")
out_opt = click.option("--out", "out", type=click.Path(file_okay=False), default=None, help="Output directory.")
data_opt = click.option("--data", "data", type=click.Path(file_okay=False, exists=True), required=True,
                        help="Data directory (triples.tsv, entities.tsv, split TSVs).")


class _Group(click.Group):
    """Reports click's own usage errors with the usage exit code instead of click's default 2."""

    def make_context(self, *args, **kwargs):
        try:
            return super().make_context(*args, **kwargs)
        except click.UsageError as exc:
            exc.exit_code = EXIT_USAGE
            raise

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.UsageError as exc:
            exc.exit_code = EXIT_USAGE
            raise


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose):
    """Simple-question answering over a knowledge graph."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@main.command("build-kg")
@click.option("--triples", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("--entities", type=click.Path(dir_okay=False, exists=True), required=True)
@out_opt
def build_kg(triples, entities, out):
    """Validate a triple/entity TSV pair and write the normalized graph."""
    def go():
        g = pl.load_graph(triples, entities)
        summary = {"entities": g.num_entities, "relations": g.num_relations, "triples": len(g.triples),
                   "duplicates_dropped": g.duplicate_count}
        if out:
            d = Path(out)
            d.mkdir(parents=True, exist_ok=True)
            pl.write_graph(g, d / pl.TRIPLES_FILE, d / pl.ENTITIES_FILE)
            _write_json(d / "graph_summary.json", summary)
        for k, v in summary.items():
            click.echo(f"{k:<20} {v}")
    _run(go)


@main.command("gen-synthetic")
@seed_opt
@config_opt
@out_opt
def gen_synthetic(seed, config_path, out):
    """Write the deterministic synthetic graph and question splits."""
    def go():
        if not out:
            raise ConfigError("--out is required")
        cfg = _config(config_path, seed, None)
        corpus = generate_synthetic(cfg.synthetic)
        pl.write_data_dir(out, corpus.graph, corpus.splits)
        meta = {"config": pl.config_to_dict(cfg)["synthetic"], "groups": corpus.groups,
                "hard_groups": corpus.hard_groups}
        _write_json(Path(out) / "synthetic.json", meta)
        click.echo(f"{corpus.graph.num_entities} entities, {corpus.graph.num_relations} relations, "
                   f"{len(corpus.graph.triples)} triples; "
                   + ", ".join(f"{k} {len(v)}" for k, v in corpus.splits.items()))
    _run(go)


@main.command("train-transe")
@data_opt
@seed_opt
@config_opt
@out_opt
def train_transe_cmd(data, seed, config_path, out):
    """Fit TransE on the data directory's graph."""
    def go():
        cfg = _config(config_path, seed, None)
        g, _ = pl.load_data_dir(data, splits=())
        table = train_transe(g, cfg.transe)
        dest = Path(out or data) / pl.KG_EMBEDDINGS_FILE
        dest.parent.mkdir(parents=True, exist_ok=True)
        table.save(dest)
        click.echo(f"final loss {table.loss_history[-1]:.6f} -> {dest}")
    _run(go)


def _kg_table(data, kg_path):
    path = Path(kg_path) if kg_path else Path(data) / pl.KG_EMBEDDINGS_FILE
    if not path.is_file():
        raise DataError(f"no KG embeddings at {path}; run train-transe first")
    return KgEmbeddingTable.load(path)


kg_opt = click.option("--kg-embeddings", "kg_path", type=click.Path(dir_okay=False), default=None,
                      help="TransE table (default: <data>/kg_embeddings.json).")
words_opt = click.option("--word-vectors", "words_path", type=click.Path(dir_okay=False, exists=True),
                         default=None, help="Text word vectors; synthetic vectors when omitted.")


@main.command("train")
@data_opt
@kg_opt
@words_opt
@seed_opt
@n_opt
@config_opt
@out_opt
def train_cmd(data, kg_path, words_path, seed, n, config_path, out):
    """Train the joint model; writes model.pt, train_log.jsonl and report.json."""
    def go():
        if not out:
            raise ConfigError("--out is required")
        cfg = _config(config_path, seed, n)
        g, splits = pl.load_data_dir(data)
        words = pl.word_table(g, splits, cfg.word_seed, words_path)
        res, report, _ = pl.train_and_evaluate(g, splits, _kg_table(data, kg_path), words, cfg.train, out)
        click.echo(f"best epoch {res.best_epoch}, validation entity accuracy {res.best_valid_accuracy:.4f}")
        click.echo(format_metrics(report.metrics, "test split"))
    _run(go)


def _eval_report(data, checkpoint, split, n):
    g, splits = pl.load_data_dir(data)
    if split not in splits:
        raise DataError(f"{data}: no {split}.tsv")
    model, tcfg = pl.load_checkpoint(checkpoint, g, n)
    if n is not None and n != model.cfg.n:
        raise ConfigError(f"checkpoint n={model.cfg.n}, requested n={n}")
    index = build_tfidf_index(g)
    prepared = prepare_split(splits[split], index, model.cfg.n, tcfg.rerank_weights)
    return evaluate(model, prepared, g, n, use_gate=tcfg.use_gate, split_name=split)


ckpt_opt = click.option("--checkpoint", type=click.Path(dir_okay=False, exists=True), required=True)
split_opt = click.option("--split", type=click.Choice(pl.SPLITS), default="test", show_default=True)


@main.command("evaluate")
@data_opt
@ckpt_opt
@split_opt
@n_opt
@out_opt
def evaluate_cmd(data, checkpoint, split, n, out):
    """Score a checkpoint on one split."""
    def go():
        report = _eval_report(data, checkpoint, split, n)
        if out:
            Path(out).mkdir(parents=True, exist_ok=True)
            report.save(Path(out) / pl.REPORT_FILE)
        click.echo(format_metrics(report.metrics, f"{split} split"))
    _run(go)


@main.command("analyze")
@data_opt
@ckpt_opt
@split_opt
@n_opt
@out_opt
def analyze_cmd(data, checkpoint, split, n, out):
    """Break accuracy down by ambiguity class."""
    def go():
        a = analysis_report(_eval_report(data, checkpoint, split, n))
        if out:
            _write_json(Path(out) / "analysis.json", a)
        click.echo(format_analysis(a))
    _run(go)


@main.command("ablate")
@data_opt
@kg_opt
@words_opt
@seed_opt
@n_opt
@config_opt
@out_opt
@click.option("--variant", "variants", multiple=True, help="Restrict to these variants (repeatable).")
def ablate_cmd(data, kg_path, words_path, seed, n, config_path, out, variants):
    """Train the full model and each one-component-removed variant."""
    def go():
        cfg = _config(config_path, seed, n)
        g, splits = pl.load_data_dir(data)
        words = pl.word_table(g, splits, cfg.word_seed, words_path)
        rows = ablate(cfg.train, splits, build_tfidf_index(g), words, _kg_table(data, kg_path),
                      list(variants) or None, out)
        if out:
            _write_json(Path(out) / "ablation.json", ablation_dict(rows))
        click.echo(format_ablation(rows))
    _run(go)


@main.command("ask")
@data_opt
@ckpt_opt
@click.option("--json", "as_json", is_flag=True, help="Print the answer record as JSON.")
@click.argument("question", nargs=-1, required=True)
def ask_cmd(data, checkpoint, as_json, question):
    """Answer a single question."""
    def go():
        g, _ = pl.load_data_dir(data, splits=())
        model, tcfg = pl.load_checkpoint(checkpoint, g)
        rec = ask(model, build_tfidf_index(g), " ".join(question), use_rerank=tcfg.use_rerank)
        click.echo(json.dumps(rec, indent=1, sort_keys=True) if as_json else format_answer(rec))
        if rec["status"] != "ok":
            sys.exit(EXIT_ABSTAIN)
    _run(go)


if __name__ == "__main__":
    main()
