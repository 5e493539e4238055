"""``kestance`` command-line entry point.

    kestance COMMAND [--config FILE] [--section.key=value ...]

Exit codes: 0 success, 1 runtime failure, 2 unknown command or bad usage,
3 invalid configuration.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as dt
import json
import math
import os
import sys
import traceback
from pathlib import Path
from typing import Callable

import torch

from . import evalkit, kgae, pipeline, stance, textenc
from .config import ConfigError, RunConfig, load_config, parse_overrides, validate
from .kgraph import (IngestConfig, KnowledgeGraph, LexiconTagger, extract_seed_terms, extract_subgraph,
                     ingest_triples, read_seed_list, resolve_seeds, write_seed_list)
from .numerics import ParamStore, RngStream, load_archive, load_store, save_store

COMMANDS = ("extract-subgraph", "pretrain-kg", "pretrain-sentiment", "train-stance", "evaluate",
            "analyze-sentiment-stance", "ablate-kg-coverage", "gen-synthetic")
LOG_NAME = "metrics.jsonl"


class MetricsLog:
    """Line-delimited JSON records ``{timestamp, phase, metric, value, step}``.

    ``SOURCE_DATE_EPOCH`` pins the timestamp so repeated runs give identical logs.
    """

    def __init__(self, path: Path):
        self.path = path
        self._fh = open(path, "w", encoding="utf8")

    @staticmethod
    def timestamp() -> str:
        fixed = os.environ.get("SOURCE_DATE_EPOCH")
        when = (dt.datetime.fromtimestamp(int(fixed), dt.timezone.utc) if fixed
                else dt.datetime.now(dt.timezone.utc))
        return when.isoformat(timespec="seconds")

    def record(self, phase: str, metric: str, value, step: int | None = None) -> None:
        if isinstance(value, float) and not math.isfinite(value):
            value = None
        rec = {"timestamp": self.timestamp(), "phase": phase, "metric": metric, "value": value, "step": step}
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self._fh.flush()

    def records(self, phase: str, rec: dict) -> None:
        """Spread one per-epoch dict over several lines keyed by its ``epoch``."""
        step = rec.get("epoch")
        for key, value in rec.items():
            if key != "epoch":
                self.record(phase, key, value, step)

    def close(self) -> None:
        self._fh.close()


# --- config -> module configs -------------------------------------------------

def _apply(obj, cfg: RunConfig, section: str, names: dict[str, str]):
    changes = {attr: cfg.get(f"{section}.{key}") for key, attr in names.items()
               if cfg.get(f"{section}.{key}") is not None}
    try:
        return dataclasses.replace(obj, **changes)
    except ValueError as exc:
        raise ConfigError(section, str(exc)) from None


def pipeline_config(cfg: RunConfig, encoder: textenc.EncoderConfig | None = None) -> pipeline.PipelineConfig:
    """Profile defaults overlaid with whatever the run config sets."""
    base = pipeline.toy_config() if cfg["run.profile"] == "toy" else pipeline.PipelineConfig()
    enc = encoder or _apply(base.stance.encoder, cfg, "model", {
        "d_model": "d_model", "n_blocks": "n_blocks", "n_heads": "n_heads", "d_ff": "d_ff",
        "max_len": "max_len", "dropout": "dropout"})
    st = _apply(base.stance, cfg, "model", {"fusion_heads": "fusion_heads", "fusion_queries": "fusion_queries"})
    st = _apply(st, cfg, "optim", {"lr": "lr", "batch_size": "batch_size", "epochs": "epochs",
                                   "recon_weight": "recon_weight", "encoder_lr_scale": "encoder_lr_scale"})
    if enc.d_model % st.fusion_heads:
        raise ConfigError("model.fusion_heads", "must divide model.d_model")
    st.encoder = enc
    kg = _apply(base.kgae, cfg, "kgae", {k: k for k in ("dim", "epochs", "lr", "edge_keep", "heldout_frac",
                                                        "inverse_relations")})
    se = _apply(base.sentiment, cfg, "sentiment", {k: k for k in ("epochs", "batch_size", "lr", "p_sent", "p_gen")})
    if not 0 <= se.p_gen < se.p_sent <= 1:
        raise ConfigError("sentiment.p_gen", "need 0 <= p_gen < p_sent <= 1")
    return pipeline.PipelineConfig(kgae=kg, sentiment=se, stance=st)


# --- file helpers ---------------------------------------------------------------

def read_graph(path: Path, cfg: RunConfig | None = None) -> KnowledgeGraph:
    """Serialized graph if the file starts with the ``#concepts`` header, else a triple dump."""
    with open(path, encoding="utf8") as fh:
        first = fh.readline()
    if first.startswith("#concepts"):
        return KnowledgeGraph.load(path)
    icfg = IngestConfig()
    if cfg is not None:
        icfg = IngestConfig(format=cfg["extract.format"], language=cfg["extract.language"],
                            strict=cfg["extract.strict"])
    return ingest_triples(path, icfg)[0]


def read_corpus(path: Path) -> list[tuple[str, int]]:
    out = []
    with open(path, encoding="utf8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            text, sep, rating = line.rstrip("\n").rpartition("\t")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected text<TAB>rating")
            out.append((text, int(rating)))
    return out


def write_corpus(path: Path, corpus) -> None:
    path.write_text("".join(f"{t}\t{r}\n" for t, r in corpus), encoding="utf8")


def write_predictions(path: Path, ids, probs, preds) -> None:
    with open(path, "w", encoding="utf8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["example_id", "pro_prob", "con_prob", "neu_prob", "predicted"])
        for i, p, lab in zip(ids, probs, preds):
            w.writerow([i] + [f"{float(x):.6f}" for x in p] + [lab])


def read_predictions(path: Path) -> dict[str, str]:
    with open(path, encoding="utf8", newline="") as fh:
        return {row["example_id"]: row["predicted"] for row in csv.DictReader(fh, delimiter="\t")}


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf8")


def load_kg_context(cfg: RunConfig, dtype) -> stance.KGContext:
    graph = read_graph(cfg.path("kg"), cfg)
    features, _ = load_store(cfg.path("kg_features"), dtype=dtype)
    table = features["features"]
    if table.shape[0] != graph.num_concepts:
        raise ValueError(f"feature table has {table.shape[0]} rows, graph has {graph.num_concepts} concepts")
    (tags,) = cfg.require("pos_tags")
    return stance.KGContext(graph, table, LexiconTagger.load(tags))


def load_sentiment_encoder(path: Path) -> tuple[textenc.SentimentModel, textenc.EncoderConfig]:
    tensors, meta, _ = load_archive(path)
    store = ParamStore(dtype=stance.DTYPES[meta.get("dtype", "float32")])
    for name, arr in tensors.items():
        store.add(name, torch.from_numpy(arr), trainable=False)
    enc = textenc.EncoderConfig(**meta["encoder"])
    return textenc.SentimentModel(store, None, textenc.SentimentConfig(encoder=enc)), enc


def _datasets(cfg: RunConfig, *names: str) -> list[list[evalkit.StanceExample]]:
    return [evalkit.load_dataset(cfg.path(n), split=n) for n in names]


# --- commands -------------------------------------------------------------------

def cmd_gen_synthetic(cfg: RunConfig, out: Path, log: MetricsLog) -> str:
    sc = _apply(evalkit.SyntheticConfig(), cfg, "synthetic",
                {k: k for k in ("n_train", "n_dev", "n_test", "n_corpus")})
    suite = evalkit.generate_synthetic_suite(sc, RngStream(cfg.seed))
    suite.graph.save(out / "kg.txt")
    textenc.SentimentLexicon(suite.lexicon).save(out / "lexicon.tsv")
    LexiconTagger(suite.pos_tags).save(out / "pos_tags.tsv")
    write_corpus(out / "corpus.tsv", suite.corpus)
    for split in ("train", "dev", "test"):
        evalkit.write_dataset(out / f"{split}.csv", getattr(suite, split))
    (out / "synthetic.ini").write_text(
        "[run]\nprofile = toy\n\n[paths]\nkg = kg.txt\nlexicon = lexicon.tsv\npos_tags = pos_tags.tsv\n"
        "corpus = corpus.tsv\ntrain = train.csv\ndev = dev.csv\ntest = test.csv\n", encoding="utf8")
    for name, value in (("concepts", suite.graph.num_concepts), ("triples", len(suite.graph)),
                        ("train", len(suite.train)), ("dev", len(suite.dev)), ("test", len(suite.test)),
                        ("corpus", len(suite.corpus))):
        log.record("gen-synthetic", name, value)
    return f"synthetic suite: {len(suite.graph)} triples, {len(suite.train)}/{len(suite.dev)}/{len(suite.test)} examples"


def cmd_extract_subgraph(cfg: RunConfig, out: Path, log: MetricsLog) -> str:
    validate(cfg, ["kg"], ["seeds", "pos_tags", "train", "dev", "test"])
    graph = read_graph(cfg.path("kg"), cfg)
    if cfg.path("seeds") is not None:
        seeds = read_seed_list(cfg.path("seeds"))
    else:
        (tags,) = cfg.require("pos_tags")
        names = [n for n in ("train", "dev", "test") if cfg.path(n) is not None]
        if not names:
            raise ConfigError("paths.seeds", "set a seed list or at least one dataset to draw seeds from")
        docs = [t for split in _datasets(cfg, *names) for e in split for t in (e.document, e.topic)]
        seeds = extract_seed_terms(docs, LexiconTagger.load(tags))
    ids, missing = resolve_seeds(graph, seeds)
    sub = extract_subgraph(graph, ids, cfg["extract.mode"])
    sub.save(out / "subgraph.txt")
    write_seed_list(out / "seeds.txt", seeds)
    for name, value in (("seeds", len(seeds)), ("seeds_unresolved", missing), ("concepts", sub.num_concepts),
                        ("triples", len(sub))):
        log.record("extract-subgraph", name, value)
    return f"subgraph: {sub.num_concepts} concepts, {len(sub)} triples from {len(seeds)} seeds"


def cmd_pretrain_kg(cfg: RunConfig, out: Path, log: MetricsLog) -> str:
    validate(cfg, ["kg"])
    pcfg = pipeline_config(cfg)
    graph = read_graph(cfg.path("kg"), cfg)
    result = kgae.pretrain_kgae(graph, pcfg.kgae, RngStream(cfg.seed).spawn("kgae"),
                                log=lambda rec: log.records("kgae", rec))
    log.record("kgae", "initial_auc", result.initial_auc, 0)
    final_auc = result.metrics[-1]["auc"] if result.metrics else float("nan")
    save_store(out / "kgae_params", result.params, {"dim": pcfg.kgae.dim,
                                                    "inverse_relations": pcfg.kgae.inverse_relations})
    feats = kgae.export_concept_features(graph, result.params, pcfg.kgae.inverse_relations)
    save_store(out / "kg_features", feats, {"num_concepts": graph.num_concepts, "dim": pcfg.kgae.dim})
    return f"autoencoder: held-out AUC {result.initial_auc:.3f} -> {final_auc:.3f} over {pcfg.kgae.epochs} epochs"


def cmd_pretrain_sentiment(cfg: RunConfig, out: Path, log: MetricsLog) -> str:
    validate(cfg, ["corpus", "lexicon"], ["train", "vocab"])
    pcfg = pipeline_config(cfg)
    corpus = read_corpus(cfg.path("corpus"))
    lexicon = textenc.SentimentLexicon.load(cfg.path("lexicon"))
    if cfg.path("vocab") is not None:
        vocab = textenc.Vocabulary.load(cfg.path("vocab"))
    else:
        train = _datasets(cfg, "train")[0] if cfg.path("train") is not None else []
        vocab = pipeline.build_vocab(corpus, train)
    vocab.save(out / "vocab.txt")
    model = textenc.pretrain_sentiment(corpus, lexicon, vocab, pcfg.sentiment, RngStream(cfg.seed).spawn("sentiment"),
                                       log=lambda rec: log.records("sentiment", rec))
    meta = {"encoder": dataclasses.asdict(pcfg.sentiment.encoder),
            "dtype": str(pcfg.sentiment.dtype).removeprefix("torch.")}
    save_store(out / "sentiment_encoder", model.encoder, meta)
    return f"sentiment encoder: loss {model.losses[0]:.3f} -> {model.losses[-1]:.3f}, vocabulary {len(vocab)}"


def cmd_train_stance(cfg: RunConfig, out: Path, log: MetricsLog) -> str:
    variant = cfg.variant
    validate(cfg, ["train", "dev", "vocab"] + (["sentiment_encoder"] if variant.use_sentiment else [])
             + (["pos_tags"] if variant.use_kg else []), kg_branch=True)
    sentiment, enc = (load_sentiment_encoder(cfg.path("sentiment_encoder")) if variant.use_sentiment
                      else (None, None))
    pcfg = pipeline_config(cfg, encoder=enc)
    vocab = textenc.Vocabulary.load(cfg.path("vocab"))
    train, dev = _datasets(cfg, "train", "dev")
    kg = load_kg_context(cfg, pcfg.stance.dtype) if variant.use_kg else None
    if kg is not None:
        pcfg.kgae = dataclasses.replace(pcfg.kgae, dim=kg.dim)
        pcfg.sync()
    model = stance.train_stance(train, dev, vocab, kg, pcfg.stance, variant, RngStream(cfg.seed).spawn("stance"),
                                sentiment.encoder if sentiment else None,
                                log=lambda rec: log.records("stance", rec))
    stance.save_model(out / "model", model)
    probs, preds = stance.model_predict(model, dev, kg)
    write_predictions(out / "dev_predictions.tsv", [e.id for e in dev], probs, preds)
    log.record("stance", "best_dev_macro_f1", model.best_dev_f1, model.best_epoch)
    return f"{variant.name}: best dev macro-F1 {model.best_dev_f1:.3f} at epoch {model.best_epoch}"


def _model_variant(path: Path) -> stance.ModelVariant:
    _, meta, _ = load_archive(path)
    return stance.ModelVariant.named(meta["variant"])


def cmd_evaluate(cfg: RunConfig, out: Path, log: MetricsLog) -> str:
    validate(cfg, ["model", "test", "vocab"])
    variant = _model_variant(cfg.path("model"))
    if variant.use_kg:
        for name in ("kg", "kg_features", "pos_tags"):
            if cfg.path(name) is None:
                raise ConfigError(f"paths.{name}", f"model {variant.name} uses the KG branch but no path is set")
        validate(cfg, ["kg", "kg_features", "pos_tags"])
    vocab = textenc.Vocabulary.load(cfg.path("vocab"))
    model = stance.load_model(cfg.path("model"), vocab)
    (test,) = _datasets(cfg, "test")
    kg = load_kg_context(cfg, model.config.dtype) if variant.use_kg else None
    probs, preds = stance.model_predict(model, test, kg)
    write_predictions(out / "predictions.tsv", [e.id for e in test], probs, preds)
    golds = [e.gold for e in test]
    report = evalkit.macro_f1(preds, golds, [e.shot for e in test])
    challenges = evalkit.breakdown_eval(preds, golds, [e.phenomena for e in test])
    write_json(out / "metrics.json", {
        "variant": variant.name,
        "table2": report.table_row(),
        "table3": challenges,
        "report": report.to_json(),
    })
    log.record("evaluate", "macro_f1", report.macro)
    log.record("evaluate", "accuracy", report.accuracy)
    for shot, rep in sorted(report.by_shot.items()):
        log.record("evaluate", f"{shot}_shot_macro_f1", rep.macro)
    for ph, acc in challenges.items():
        log.record("evaluate", f"accuracy_{ph}", acc)
    return f"{variant.name}: test macro-F1 {report.macro:.3f} on {report.n} examples"


def cmd_analyze(cfg: RunConfig, out: Path, log: MetricsLog) -> str:
    validate(cfg, ["predictions", "test", "lexicon"])
    preds = read_predictions(cfg.path("predictions"))
    (test,) = _datasets(cfg, "test")
    missing = [e.id for e in test if e.id not in preds]
    if missing:
        raise ValueError(f"{len(missing)} test examples have no prediction (first: {missing[0]!r})")
    lexicon = textenc.SentimentLexicon.load(cfg.path("lexicon"))
    docs = [e.document for e in test]
    golds = [e.gold for e in test]
    matrix = evalkit.sentiment_stance_matrix([preds[e.id] for e in test], golds, docs, lexicon)
    counts = evalkit.matrix_counts(golds, docs, lexicon)
    write_json(out / "figure4.json", {"rows": list(evalkit.SENTIMENTS), "columns": list(evalkit.LABELS),
                                      "accuracy": matrix, "counts": counts})
    for s, row in matrix.items():
        for lab, acc in row.items():
            log.record("sentiment-stance", f"{s}/{lab}", acc)
    return "sentiment/stance matrix: " + ", ".join(
        f"{s}/{lab}={acc:.2f}" for s, row in matrix.items() for lab, acc in row.items() if acc is not None)


def cmd_ablate(cfg: RunConfig, out: Path, log: MetricsLog) -> str:
    variant = cfg.variant
    if not variant.use_kg:
        raise ConfigError("model.variant", f"{variant.name} has no KG branch to ablate")
    validate(cfg, ["kg", "train", "dev", "test", "pos_tags"] +
             (["corpus", "lexicon"] if variant.use_sentiment and cfg.path("sentiment_encoder") is None else []),
             ["vocab", "sentiment_encoder", "corpus", "lexicon"])
    sentiment, enc = None, None
    if variant.use_sentiment and cfg.path("sentiment_encoder") is not None:
        sentiment, enc = load_sentiment_encoder(cfg.path("sentiment_encoder"))
    pcfg = pipeline_config(cfg, encoder=enc)
    graph = read_graph(cfg.path("kg"), cfg)
    train, dev, test = _datasets(cfg, "train", "dev", "test")
    corpus = read_corpus(cfg.path("corpus")) if cfg.path("corpus") is not None else []
    lexicon = textenc.SentimentLexicon.load(cfg.path("lexicon")) if cfg.path("lexicon") is not None else {}
    data = pipeline.StanceData(train, dev, test, LexiconTagger.load(cfg.path("pos_tags")), corpus, lexicon)
    vocab = textenc.Vocabulary.load(cfg.path("vocab")) if cfg.path("vocab") is not None else None
    points = []

    def log_point(phase: str, rec: dict) -> None:
        points.append(rec)
        for key, value in rec.items():
            log.record(phase, key, value, len(points))

    curve = pipeline.coverage_curve(graph, data, pcfg, cfg.seed, variant, cfg["ablation.percents"], sentiment, vocab,
                                    cfg["ablation.mode"], log=log_point)
    evalkit.write_curve(out / "curve.tsv", curve)
    write_json(out / "figure5.json", {"mode": cfg["ablation.mode"], "variant": variant.name,
                                      "points": [{"percent": p, "zero_shot_macro_f1": None if math.isnan(f) else f}
                                                 for p, f in curve]})
    for p, f in curve:
        log.record("coverage", f"macro_f1@{p:g}", f)
    return "coverage curve: " + ", ".join(f"{p:g}%={f:.3f}" for p, f in curve)


HANDLERS: dict[str, Callable[[RunConfig, Path, MetricsLog], str]] = {
    "extract-subgraph": cmd_extract_subgraph,
    "pretrain-kg": cmd_pretrain_kg,
    "pretrain-sentiment": cmd_pretrain_sentiment,
    "train-stance": cmd_train_stance,
    "evaluate": cmd_evaluate,
    "analyze-sentiment-stance": cmd_analyze,
    "ablate-kg-coverage": cmd_ablate,
    "gen-synthetic": cmd_gen_synthetic,
}


def _module_tag(exc: BaseException) -> str:
    tag = "cli"
    for frame in traceback.extract_tb(exc.__traceback__):
        parts = Path(frame.filename).parts
        if "kestance" in parts and frame.filename.endswith(".py"):
            tag = Path(frame.filename).stem
    return tag


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kestance",
        description="Knowledge-enhanced stance detection: graph and sentiment pretraining, training, evaluation.",
        epilog="Any configuration key can be overridden as --section.key=value; --seed, --variant and "
               "--output-dir are shorthands.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="INI configuration file")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    try:
        cfg = load_config(args.config, parse_overrides(rest))
    except ConfigError as exc:
        print(f"kestance: invalid config: {exc}", file=sys.stderr)
        return 3
    out = cfg.output_dir()
    log = None
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "effective_config.ini").write_text(cfg.dumps(), encoding="utf8")
        log = MetricsLog(out / LOG_NAME)
        summary = HANDLERS[args.command](cfg, out, log)
    except ConfigError as exc:
        print(f"kestance: invalid config: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:
        print(f"kestance: {_module_tag(exc)}: {exc}", file=sys.stderr)
        return 1
    finally:
        if log is not None:
            log.close()
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
