"""End-to-end runs: autoencoder pretraining, sentiment pretraining, stance training, scoring."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch

from . import evalkit, kgae, stance, textenc
from .kgraph import KnowledgeGraph
from .numerics import RngStream


@dataclass
class PipelineConfig:
    kgae: kgae.KGAEConfig = field(default_factory=kgae.KGAEConfig)
    sentiment: textenc.SentimentConfig = field(default_factory=textenc.SentimentConfig)
    stance: stance.StanceConfig = field(default_factory=stance.StanceConfig)

    def __post_init__(self):
        self.sync()

    def sync(self) -> "PipelineConfig":
        """Share one encoder shape and the KG width across stages."""
        self.stance.kg_dim = self.kgae.dim
        self.stance.encoder = dataclasses.replace(self.stance.encoder)
        self.sentiment.encoder = self.stance.encoder
        return self


def toy_config() -> PipelineConfig:
    """Desk-scale dimensions that train in seconds on one CPU core."""
    enc = textenc.EncoderConfig(d_model=32, n_blocks=1, n_heads=2, d_ff=64, max_len=16, dropout=0.1)
    return PipelineConfig(
        kgae=kgae.KGAEConfig(dim=16, epochs=100),
        sentiment=textenc.SentimentConfig(encoder=enc, epochs=40, batch_size=32, lr=2e-3),
        stance=stance.StanceConfig(encoder=enc, fusion_heads=2, lr=1e-3, batch_size=16, epochs=20,
                                    encoder_lr_scale=0.1),
    )


@dataclass
class StanceData:
    """Everything a run reads besides the graph. :class:`evalkit.SyntheticSuite` fits this shape too."""
    train: Sequence[evalkit.StanceExample]
    dev: Sequence[evalkit.StanceExample]
    test: Sequence[evalkit.StanceExample]
    pos_tags: Mapping[str, str]
    corpus: Sequence[tuple[str, int]] = ()
    lexicon: Mapping[str, str] = field(default_factory=dict)


@dataclass
class PipelineResult:
    kg: stance.KGContext | None
    sentiment: textenc.SentimentModel | None
    model: stance.StanceModel
    probabilities: np.ndarray
    predictions: list[str]
    report: evalkit.MetricReport
    kgae_metrics: list[dict] = field(default_factory=list)


def build_vocab(corpus: Sequence[tuple[str, int]], train: Sequence[evalkit.StanceExample]) -> textenc.Vocabulary:
    texts = [t for t, _ in corpus] + [e.document for e in train] + [e.topic for e in train]
    return textenc.Vocabulary.build(texts)


def pretrain_graph(graph: KnowledgeGraph, pos_tags, cfg: PipelineConfig, rng: RngStream, log=None):
    """An empty graph yields an empty feature table, so every document gets a zero KG vector."""
    if len(graph) == 0:
        empty = torch.zeros((0, cfg.kgae.dim), dtype=cfg.stance.dtype)
        return stance.KGContext(graph, empty, pos_tags), None
    result = kgae.pretrain_kgae(graph, cfg.kgae, rng, log=log)
    feats = kgae.export_concept_features(graph, result.params, cfg.kgae.inverse_relations)["features"]
    return stance.KGContext(graph, feats.to(cfg.stance.dtype), pos_tags), result


def _tagged(log, phase):
    return (lambda rec: log(phase, rec)) if log else None


def run_pipeline(graph: KnowledgeGraph | None, data, cfg: PipelineConfig, seed: int,
                 variant: stance.ModelVariant, sentiment_model: textenc.SentimentModel | None = None,
                 evaluate_on: str = "test", log=None, vocab: textenc.Vocabulary | None = None) -> PipelineResult:
    """Every stage draws from a stream derived from ``seed`` by stage name, so
    stages can be skipped or reused without shifting the others."""
    root = RngStream(seed)
    vocab = vocab or build_vocab(data.corpus, data.train)
    kg = None
    kg_metrics = []
    if variant.use_kg:
        kg, res = pretrain_graph(graph, data.pos_tags, cfg, root.spawn("kgae"), log=_tagged(log, "kgae"))
        kg_metrics = res.metrics if res is not None else []
    if variant.use_sentiment and sentiment_model is None:
        sentiment_model = textenc.pretrain_sentiment(data.corpus, data.lexicon, vocab, cfg.sentiment,
                                                     root.spawn("sentiment"), log=_tagged(log, "sentiment"))
    model = stance.train_stance(data.train, data.dev, vocab, kg, cfg.stance, variant, root.spawn("stance"),
                                sentiment_model.encoder if variant.use_sentiment else None,
                                log=_tagged(log, "stance"))
    examples = data.test if evaluate_on == "test" else data.dev
    probs, preds = stance.model_predict(model, examples, kg)
    report = evalkit.macro_f1(preds, [e.gold for e in examples], [e.shot for e in examples])
    return PipelineResult(kg, sentiment_model, model, probs, preds, report, kg_metrics)


def zero_shot_f1(result: PipelineResult) -> float:
    rep = result.report.by_shot.get("zero")
    return rep.macro if rep else float("nan")


def coverage_curve(graph: KnowledgeGraph, data, cfg: PipelineConfig, seed: int, variant: stance.ModelVariant,
                   percents: Sequence[float], sentiment_model: textenc.SentimentModel | None = None,
                   vocab: textenc.Vocabulary | None = None, mode: str = "concepts", log=None):
    """Zero-shot test macro-F1 after retraining on each coverage subsample of ``graph``."""
    if not variant.use_kg:
        raise ValueError("coverage ablation needs a KG-enabled variant")
    vocab = vocab or build_vocab(data.corpus, data.train)
    if variant.use_sentiment and sentiment_model is None:
        sentiment_model = textenc.pretrain_sentiment(data.corpus, data.lexicon, vocab, cfg.sentiment,
                                                     RngStream(seed).spawn("sentiment"))

    def run_point(sub: KnowledgeGraph) -> float:
        res = run_pipeline(sub, data, cfg, seed, variant, sentiment_model, vocab=vocab)
        f1 = zero_shot_f1(res)
        if log is not None:
            log("coverage", {"concepts": sub.num_concepts, "triples": len(sub), "zero_shot_macro_f1": f1,
                             "macro_f1": res.report.macro})
        return f1

    return evalkit.coverage_ablation(graph, percents, run_point, RngStream(seed).spawn("coverage"), mode)
