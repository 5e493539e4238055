"""Stance classifier fusing context, sentiment and commonsense features."""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import kgae
from .evalkit import macro_f1
from .kgraph import KnowledgeGraph, extract_seed_terms, induced, resolve_seeds, select_triples
from .numerics import ParamStore, RngStream, adam_step, backward, load_store, save_store, xavier_uniform
from .textenc import (Batch, EncoderConfig, EncoderOutput, TokenSequence, Vocabulary, add_attention_block,
                      attention_block, encode, init_encoder, tokenize)

logger = logging.getLogger(__name__)

LABELS = ("pro", "con", "neu")
PROB_CLAMP = 1e-12


def label_index(label: str) -> int:
    return LABELS.index(label)


@dataclass(frozen=True)
class ModelVariant:
    use_sentiment: bool = True
    use_context: bool = True
    use_kg: bool = True

    def __post_init__(self):
        if not (self.use_sentiment or self.use_context):
            raise ValueError("at least one of the context and sentiment encoders must be enabled")

    @classmethod
    def named(cls, name: str) -> "ModelVariant":
        table = {
            "bs-rgcn": cls(True, True, True),
            "bs": cls(True, True, False),
            "b-rgcn": cls(False, True, True),
            "s-rgcn": cls(True, False, True),
        }
        try:
            return table[name.lower()]
        except KeyError:
            raise ValueError(f"unknown variant {name!r}; choose from {sorted(table)}") from None

    @property
    def name(self) -> str:
        enc = ("B" if self.use_context else "") + ("S" if self.use_sentiment else "")
        return enc + ("-RGCN" if self.use_kg else "")

    @property
    def sentiment_trainable(self) -> bool:
        # without the context encoder the sentiment encoder is fine-tuned
        return self.use_sentiment and not self.use_context


@dataclass
class CommonsenseFeature:
    h_kg: torch.Tensor
    matched_concept_count: int
    h_k: torch.Tensor | None = None


def vicinity_concepts(document: str, topic: str, kg: KnowledgeGraph, pos_oracle: Mapping[str, str]) -> list[int]:
    """Unique concepts of the radius-1 vicinity subgraph around the doc/topic seed terms."""
    seeds = extract_seed_terms([document, topic], pos_oracle)
    seed_ids, _ = resolve_seeds(kg, seeds)
    triples = select_triples(kg, seed_ids, "vicinity")
    return sorted({t.head for t in triples} | {t.tail for t in triples})


def commonsense_feature(document: str, topic: str, kg: KnowledgeGraph, features: torch.Tensor,
                        pos_oracle: Mapping[str, str], params: Mapping[str, torch.Tensor] | None = None,
                        encoder_params=None) -> CommonsenseFeature:
    """Average concept feature over the document's vicinity subgraph.

    ``features`` is the exported table over ``kg``. With ``encoder_params``
    the subgraph is run through the autoencoder's encoder on its own instead
    of looking rows up in the table. ``params`` (holding ``W_k``/``b_k``)
    adds the projected vector ``h_k``.
    """
    ids = vicinity_concepts(document, topic, kg, pos_oracle)
    d = features.shape[1]
    if not ids:
        h_kg = torch.zeros(d, dtype=features.dtype)
    elif encoder_params is not None:
        keep = set(ids)
        triples = [t for t in select_triples(kg, set(ids), "incident") if t.head in keep and t.tail in keep]
        sub = induced(kg, triples)
        local = dict(encoder_params)
        local["g"] = encoder_params["g"][[old for old in sorted(sub.id_map)]]
        rel_ids = sorted({t.rel for t in triples})
        local["R_diag"] = encoder_params["R_diag"][rel_ids]
        n_rel = kg.num_relations
        for layer in range(1, kgae.NUM_LAYERS + 1):
            W = encoder_params[f"W_rel.{layer}"]
            local[f"W_rel.{layer}"] = W[rel_ids + [r + n_rel for r in rel_ids]] if W.shape[0] == 2 * n_rel else W[rel_ids]
        with torch.no_grad():
            h_kg = kgae.rgcn_forward(sub, local, sub.triples, W.shape[0] == 2 * n_rel).mean(0)
    else:
        h_kg = features[ids].mean(0)
    feat = CommonsenseFeature(h_kg.detach(), len(ids))
    if params is not None:
        feat.h_k = project_kg(h_kg[None].to(params["kg.W_k"].dtype), params)[0]
    return feat


def project_kg(h_kg: torch.Tensor, params: Mapping[str, torch.Tensor]) -> torch.Tensor:
    return h_kg @ params["kg.W_k"].T + params["kg.b_k"]


@dataclass
class StanceConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    kg_dim: int = 100
    fusion_heads: int = 4
    fusion_queries: str = "concat"  # or "context": context rows attend over the concatenation
    recon_weight: float = 1.0
    lr: float = 1e-3
    pretrained_lr: float = 1.5e-5  # suited to full-size pretrained encoders
    encoder_lr_scale: float = 1.0  # multiplier on lr for the text encoders' own weights
    batch_size: int = 4
    epochs: int = 3
    dtype: torch.dtype = torch.float32


def init_stance_params(vocab_size: int, config: StanceConfig, variant: ModelVariant, rng: RngStream,
                       sentiment_encoder: ParamStore | None = None) -> ParamStore:
    """Context encoder, frozen sentiment encoder copy, KG projection, fusion block, classifier, decoder."""
    store = ParamStore(dtype=config.dtype)
    D = config.encoder.d_model
    dt = config.dtype
    if variant.use_context:
        init_encoder(vocab_size, config.encoder, rng.spawn("ctx"), store=store, prefix="ctx.")
    if variant.use_sentiment:
        if sentiment_encoder is None:
            raise ValueError("variant uses the sentiment encoder but none was given")
        if sentiment_encoder["tok_emb"].shape != (vocab_size, D):
            raise ValueError("sentiment encoder does not match vocabulary size / d_model")
        store.absorb(sentiment_encoder, "sent.", trainable=variant.sentiment_trainable)
    frng = rng.spawn("heads")
    if variant.use_context and variant.use_sentiment:
        add_attention_block(store, "fuse.", D, config.encoder.d_ff, frng)
    in_dim = D
    if variant.use_kg:
        store.add("kg.W_k", xavier_uniform(frng, D, config.kg_dim, dt))
        store.add("kg.b_k", torch.zeros(D, dtype=dt))
        store.add("recon.W", xavier_uniform(frng, config.kg_dim, D, dt))
        store.add("recon.b", torch.zeros(config.kg_dim, dtype=dt))
        in_dim += D
    store.add("cls.W", xavier_uniform(frng, len(LABELS), in_dim, dt))
    store.add("cls.b", torch.zeros(len(LABELS), dtype=dt))
    return store


def fuse(h_context: EncoderOutput | None, h_sentiment: EncoderOutput | None,
         params: Mapping[str, torch.Tensor], n_heads: int, queries: str = "concat",
         return_sequence: bool = False) -> torch.Tensor:
    """One attention block over the concatenated hidden sequences, read at the context [CLS] row.

    When one branch is missing the other branch's pooled row is returned.
    """
    if h_context is None and h_sentiment is None:
        raise ValueError("need at least one encoder output")
    if h_sentiment is None:
        return h_context.pooled
    if h_context is None:
        return h_sentiment.pooled
    if h_context.hidden.shape[-1] != h_sentiment.hidden.shape[-1]:
        raise ValueError("context and sentiment encoders disagree on d_model")
    seq = torch.cat([h_context.hidden, h_sentiment.hidden], dim=1)
    mask = torch.cat([h_context.mask, h_sentiment.mask], dim=1)
    p = {k[5:]: v for k, v in params.items() if k.startswith("fuse.")}
    q = seq if queries == "concat" else h_context.hidden
    out = attention_block(q, seq, mask, p, n_heads)
    return out if return_sequence else out[:, h_context.cls_index]


def classify_logits(h_cls: torch.Tensor, h_k: torch.Tensor | None, params: Mapping[str, torch.Tensor],
                    variant: ModelVariant) -> torch.Tensor:
    x = torch.cat([h_cls, h_k], dim=-1) if variant.use_kg else h_cls
    return x @ params["cls.W"].T + params["cls.b"]


def classify(h_cls, h_k, params, variant: ModelVariant) -> torch.Tensor:
    """Probability triple over (pro, con, neu)."""
    return torch.softmax(classify_logits(h_cls, h_k, params, variant), dim=-1)


def stance_loss(p: torch.Tensor, gold) -> torch.Tensor:
    """Batch mean of -log p[gold]."""
    p = torch.atleast_2d(p)
    gold = torch.as_tensor(gold, dtype=torch.long).reshape(-1)
    picked = p[torch.arange(p.shape[0]), gold].clamp_min(PROB_CLAMP)
    return -torch.log(picked).mean()


def recon_loss(h_k: torch.Tensor, h_kg: torch.Tensor, params: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """Batch mean of the squared distance between the decoded projection and h_kg."""
    h_k = torch.atleast_2d(h_k)
    h_kg = torch.atleast_2d(h_kg)
    recon = h_k @ params["recon.W"].T + params["recon.b"]
    return ((recon - h_kg) ** 2).sum(-1).mean()


def total_loss(l_cls: torch.Tensor, l_recon, weight: float = 1.0, variant: ModelVariant | None = None):
    if weight < 0:
        raise ValueError("reconstruction weight must be non-negative")
    if variant is not None and not variant.use_kg:
        return l_cls
    return l_cls + weight * l_recon


@dataclass
class StanceInputs:
    """Pre-tokenized batch plus the frozen per-example commonsense vectors."""
    batch: Batch
    h_kg: torch.Tensor | None
    gold: torch.Tensor | None = None


def forward(inputs: StanceInputs, params: Mapping[str, torch.Tensor], config: StanceConfig,
            variant: ModelVariant, mode: str = "eval", generator: torch.Generator | None = None):
    """Returns (probabilities, h_k, h_kg) for the batch."""
    enc = config.encoder
    h_ctx = None
    if variant.use_context:
        h_ctx = encode(inputs.batch, _prefixed(params, "ctx."), enc, mode, generator)
    h_sent = None
    if variant.use_sentiment:
        sent_mode = mode if variant.sentiment_trainable else "eval"
        h_sent = encode(inputs.batch, _prefixed(params, "sent."), enc, sent_mode, generator)
    h_cls = fuse(h_ctx, h_sent, params, config.fusion_heads, config.fusion_queries)
    h_k = h_kg = None
    if variant.use_kg:
        if inputs.h_kg is None:
            raise ValueError("KG-enabled variant needs commonsense features")
        h_kg = inputs.h_kg.to(h_cls.dtype)
        h_k = project_kg(h_kg, params)
    return classify(h_cls, h_k, params, variant), h_k, h_kg


def _prefixed(params: Mapping[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def batch_loss(inputs: StanceInputs, params, config: StanceConfig, variant: ModelVariant, mode="train",
               generator=None):
    p, h_k, h_kg = forward(inputs, params, config, variant, mode, generator)
    l_cls = stance_loss(p, inputs.gold)
    l_rec = recon_loss(h_k, h_kg, params) if variant.use_kg else torch.zeros((), dtype=p.dtype)
    return total_loss(l_cls, l_rec, config.recon_weight, variant), l_cls, l_rec


@dataclass
class PreparedSet:
    seqs: list[TokenSequence]
    h_kg: torch.Tensor | None
    gold: torch.Tensor | None
    ids: list[str]

    def __len__(self):
        return len(self.seqs)

    def slice(self, idx) -> StanceInputs:
        idx = list(idx)
        return StanceInputs(Batch.collate([self.seqs[i] for i in idx]),
                            None if self.h_kg is None else self.h_kg[idx],
                            None if self.gold is None else self.gold[idx])


class KGContext:
    """A graph, its frozen feature table and the POS oracle for seed extraction."""

    def __init__(self, graph: KnowledgeGraph, features: torch.Tensor, pos_oracle: Mapping[str, str]):
        self.graph = graph
        self.features = features
        self.pos_oracle = pos_oracle

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def feature(self, document: str, topic: str) -> CommonsenseFeature:
        return commonsense_feature(document, topic, self.graph, self.features, self.pos_oracle)


def prepare(examples: Sequence, vocab: Vocabulary, config: StanceConfig, kg: KGContext | None) -> PreparedSet:
    seqs = [tokenize(e.document, e.topic, vocab, config.encoder.max_len) for e in examples]
    h_kg = None
    if kg is not None:
        h_kg = torch.stack([kg.feature(e.document, e.topic).h_kg for e in examples]).to(config.dtype)
    gold = None
    if all(getattr(e, "gold", None) is not None for e in examples):
        gold = torch.tensor([label_index(e.gold) for e in examples])
    return PreparedSet(seqs, h_kg, gold, [e.id for e in examples])


def predict(data: PreparedSet, params, config: StanceConfig, variant: ModelVariant, batch_size: int = 64) -> torch.Tensor:
    out = []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            inputs = data.slice(range(start, min(start + batch_size, len(data))))
            out.append(forward(inputs, params, config, variant, "eval")[0])
    return torch.cat(out) if out else torch.zeros(0, len(LABELS))


@dataclass
class StanceModel:
    params: ParamStore
    config: StanceConfig
    variant: ModelVariant
    vocab: Vocabulary
    logs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_f1: float = float("nan")


def train_stance(train: Sequence, dev: Sequence, vocab: Vocabulary, kg: KGContext | None, config: StanceConfig,
                 variant: ModelVariant, rng: RngStream, sentiment_encoder: ParamStore | None = None,
                 log=None) -> StanceModel:
    """Minibatch Adam; dev macro-F1 each epoch; the best-dev parameters are returned."""
    if not train or not dev:
        raise ValueError("train and dev sets must be non-empty")
    if variant.use_kg and kg is None:
        raise ValueError("KG-enabled variant needs KG features")
    if variant.use_kg and kg.dim != config.kg_dim:
        raise ValueError(f"KG features have width {kg.dim}, config expects {config.kg_dim}")
    kg_ctx = kg if variant.use_kg else None
    tr = prepare(train, vocab, config, kg_ctx)
    dv = prepare(dev, vocab, config, kg_ctx)
    params = init_stance_params(len(vocab), config, variant, rng.spawn("init"), sentiment_encoder)
    model = StanceModel(params, config, variant, vocab)
    best = None
    order_rng = rng.spawn("order")
    dropout_gen = rng.spawn("dropout").torch_generator()
    enc_scale = {"ctx.": config.encoder_lr_scale, "sent.": config.encoder_lr_scale}
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(tr))
        tot = cls_tot = rec_tot = 0.0
        for start in range(0, len(tr), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, l_cls, l_rec = batch_loss(tr.slice(idx), params.subset(""), config, variant, "train",
                                           dropout_gen)
            backward(params, loss)
            adam_step(params, config.lr, lr_scale=enc_scale)
            tot += float(loss.detach()) * len(idx)
            cls_tot += float(l_cls.detach()) * len(idx)
            rec_tot += float(l_rec.detach()) * len(idx)
        probs = predict(dv, params.subset(""), config, variant)
        preds = [LABELS[i] for i in probs.argmax(-1).tolist()]
        golds = [LABELS[i] for i in dv.gold.tolist()]
        f1 = macro_f1(preds, golds).macro
        rec = {"epoch": epoch, "loss": tot / len(tr), "cls_loss": cls_tot / len(tr),
               "recon_loss": rec_tot / len(tr), "dev_macro_f1": f1}
        model.logs.append(rec)
        if log is not None:
            log(rec)
        if best is None or f1 > model.best_dev_f1:
            best = params.clone()
            model.best_dev_f1 = f1
            model.best_epoch = epoch
    best.zero_grad()
    model.params = best
    return model


def model_predict(model: StanceModel, examples: Sequence, kg: KGContext | None) -> tuple[np.ndarray, list[str]]:
    data = prepare(examples, model.vocab, model.config, kg if model.variant.use_kg else None)
    probs = predict(data, model.params.subset(""), model.config, model.variant).numpy()
    return probs, [LABELS[i] for i in probs.argmax(-1)]


DTYPES = {"float32": torch.float32, "float64": torch.float64}


def config_to_dict(config: StanceConfig) -> dict:
    out = dataclasses.asdict(config)
    out["dtype"] = str(config.dtype).removeprefix("torch.")
    return out


def config_from_dict(data: Mapping) -> StanceConfig:
    data = dict(data)
    data["encoder"] = EncoderConfig(**data["encoder"])
    data["dtype"] = DTYPES[data.get("dtype", "float32")]
    return StanceConfig(**data)


def save_model(path, model: StanceModel) -> None:
    """Parameters go to the numerics archive; variant, config and training curve to its manifest."""
    meta = {"variant": model.variant.name.lower(), "config": config_to_dict(model.config),
            "best_epoch": model.best_epoch, "best_dev_f1": model.best_dev_f1, "logs": model.logs}
    save_store(path, model.params, meta)


def load_model(path, vocab: Vocabulary) -> StanceModel:
    store, meta = load_store(path)
    config = config_from_dict(meta["config"])
    params = ParamStore(dtype=config.dtype)
    for name in store.names():
        params.add(name, store[name].to(config.dtype), trainable=store.is_trainable(name))
    if "ctx.tok_emb" in params and params["ctx.tok_emb"].shape[0] != len(vocab):
        raise ValueError(f"model was trained with a {params['ctx.tok_emb'].shape[0]}-token vocabulary, got {len(vocab)}")
    return StanceModel(params, config, ModelVariant.named(meta["variant"]), vocab, list(meta.get("logs", [])),
                       int(meta.get("best_epoch", 0)), float(meta.get("best_dev_f1", float("nan"))))
