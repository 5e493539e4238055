"""Two-layer RGCN encoder with a DistMult decoder, trained by negative sampling."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .kgraph import KnowledgeGraph, Triple
from .numerics import ParamStore, RngStream, adam_step, backward, scaled_normal, xavier_uniform

logger = logging.getLogger(__name__)

NUM_LAYERS = 2
PROB_CLAMP = 1e-12


@dataclass
class KGAEConfig:
    dim: int = 100
    epochs: int = 50
    lr: float = 1e-2
    lr_schedule: str = "constant"
    lr_floor: float = 0.05
    edge_keep: float = 0.5
    heldout_frac: float = 0.1
    inverse_relations: bool = True
    eval_negatives: int = 10
    dtype: torch.dtype = torch.float64


@dataclass
class TripleSample:
    triple: Triple
    label: int


@dataclass
class NegativeSampleSet:
    samples: list[TripleSample]
    source_edge_count: int

    def __len__(self):
        return len(self.samples)

    def arrays(self):
        h = torch.tensor([s.triple.head for s in self.samples], dtype=torch.long)
        r = torch.tensor([s.triple.rel for s in self.samples], dtype=torch.long)
        t = torch.tensor([s.triple.tail for s in self.samples], dtype=torch.long)
        u = torch.tensor([s.label for s in self.samples])
        return h, r, t, u


def message_types(num_relations: int, inverse: bool = True) -> int:
    return 2 * num_relations if inverse else num_relations


def init_params(graph: KnowledgeGraph, dim: int, rng: RngStream, inverse_relations: bool = True,
                dtype=torch.float64) -> ParamStore:
    """Concept features g, per-layer W_rel / W_self, and DistMult diagonals."""
    store = ParamStore(dtype=dtype)
    store.add("g", scaled_normal(rng, graph.num_concepts, dim, dtype))
    n_msg = message_types(graph.num_relations, inverse_relations)
    for layer in range(1, NUM_LAYERS + 1):
        store.add(f"W_rel.{layer}", torch.stack([xavier_uniform(rng, dim, dim, dtype) for _ in range(n_msg)]))
        store.add(f"W_self.{layer}", xavier_uniform(rng, dim, dim, dtype))
    # each diagonal stands for a d x d matrix, hence fan_in = fan_out = d
    bound = math.sqrt(3.0 / dim)
    store.add("R_diag", torch.tensor(rng.uniform(-bound, bound, size=(graph.num_relations, dim)), dtype=dtype))
    return store


def _edge_index(edges: Sequence[Triple], num_relations: int, inverse: bool):
    """(src, dst, message_type) arrays; inverse messages use type rel + |R|."""
    heads = torch.tensor([t.head for t in edges], dtype=torch.long)
    rels = torch.tensor([t.rel for t in edges], dtype=torch.long)
    tails = torch.tensor([t.tail for t in edges], dtype=torch.long)
    if not inverse:
        return heads, tails, rels
    return (torch.cat([heads, tails]), torch.cat([tails, heads]), torch.cat([rels, rels + num_relations]))


def rgcn_layer(x: torch.Tensor, W_rel: torch.Tensor, W_self: torch.Tensor, src, dst, mtype) -> torch.Tensor:
    """ReLU( sum_r sum_{j in N_i^r} W_r x_j / |N_i^r| + W_0 x_i )."""
    n = x.shape[0]
    out = x @ W_self.T
    if src.numel():
        n_types = W_rel.shape[0]
        # degree per (destination, message type)
        key = dst * n_types + mtype
        deg = torch.bincount(key, minlength=n * n_types).to(x.dtype)
        norm = (1.0 / deg[key]).unsqueeze(1)
        for r in torch.unique(mtype).tolist():
            sel = mtype == r
            msg = (x[src[sel]] @ W_rel[r].T) * norm[sel]
            out = out.index_add(0, dst[sel], msg)
    return torch.relu(out)


def rgcn_forward(graph: KnowledgeGraph, params, message_edges: Sequence[Triple] | None = None,
                 inverse_relations: bool = True) -> torch.Tensor:
    """Concept embeddings after both encoder layers, passing messages over ``message_edges`` only."""
    if message_edges is None:
        message_edges = graph.triples
    g = params["g"]
    if g.shape[0] != graph.num_concepts:
        raise ValueError(f"feature table has {g.shape[0]} rows, graph has {graph.num_concepts} concepts")
    expected = message_types(graph.num_relations, inverse_relations)
    for layer in range(1, NUM_LAYERS + 1):
        W = params[f"W_rel.{layer}"]
        if W.shape[0] != expected or W.shape[1:] != (g.shape[1], g.shape[1]) or params[f"W_self.{layer}"].shape != (g.shape[1], g.shape[1]):
            raise ValueError(f"layer {layer} weights do not match graph/dimension")
    src, dst, mtype = _edge_index(message_edges, graph.num_relations, inverse_relations)
    h = g
    for layer in range(1, NUM_LAYERS + 1):
        h = rgcn_layer(h, params[f"W_rel.{layer}"], params[f"W_self.{layer}"], src, dst, mtype)
    return h


def distmult_logits(h: torch.Tensor, R_diag: torch.Tensor, heads, rels, tails) -> torch.Tensor:
    return (h[heads] * h[tails] * R_diag[rels]).sum(-1)  # head*tail first: exactly symmetric


def distmult_score(h_i, rel: int, h_j, params) -> float:
    """logistic(sum_k h_i[k] R_r[k] h_j[k])."""
    R = params["R_diag"]
    if not 0 <= rel < R.shape[0]:
        raise KeyError(f"unknown relation id {rel}")
    h_i = torch.as_tensor(h_i, dtype=R.dtype)
    h_j = torch.as_tensor(h_j, dtype=R.dtype)
    return float(torch.sigmoid((h_i * h_j * R[rel]).sum()))


def corrupt(triple: Triple, graph: KnowledgeGraph, rng: RngStream, max_tries: int = 100) -> Triple:
    """Replace one uniformly chosen slot by a uniform draw that differs from the original."""
    for _ in range(max_tries):
        slot = int(rng.integers(3))
        if slot == 0:
            cand = Triple(int(rng.integers(graph.num_concepts)), triple.rel, triple.tail)
        elif slot == 1:
            cand = Triple(triple.head, int(rng.integers(graph.num_relations)), triple.tail)
        else:
            cand = Triple(triple.head, triple.rel, int(rng.integers(graph.num_concepts)))
        if cand != triple:
            return cand
    raise RuntimeError(f"could not corrupt {triple} after {max_tries} tries")


def sample_negatives(positives: Sequence[Triple], graph: KnowledgeGraph, rng: RngStream) -> NegativeSampleSet:
    """Interleave each positive with one corrupted copy (negatives are unfiltered)."""
    if not positives:
        raise ValueError("need at least one positive triple")
    samples = []
    for t in positives:
        samples.append(TripleSample(t, 1))
        samples.append(TripleSample(corrupt(t, graph, rng), 0))
    return NegativeSampleSet(samples, len(positives))


def autoencoder_loss(samples: NegativeSampleSet, params, embeddings: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy over T with coefficient 1 / (2 |E'|)."""
    h, r, t, u = samples.arrays()
    s = torch.sigmoid(distmult_logits(embeddings, params["R_diag"], h, r, t))
    s = s.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    u = u.to(s.dtype)
    total = (u * torch.log(s) + (1 - u) * torch.log(1 - s)).sum()
    return -total / (2 * samples.source_edge_count)


def auc(pos_scores, neg_scores) -> float:
    """Probability a positive outranks a negative, ties counted half (all pairs)."""
    pos = np.asarray(pos_scores, dtype=float)
    neg = np.asarray(neg_scores, dtype=float)
    if not len(pos) or not len(neg):
        return float("nan")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def all_corruptions(triple: Triple, graph: KnowledgeGraph, exclude=frozenset()) -> list[Triple]:
    out = []
    for c in range(graph.num_concepts):
        out.append(Triple(c, triple.rel, triple.tail))
        out.append(Triple(triple.head, triple.rel, c))
    for r in range(graph.num_relations):
        out.append(Triple(triple.head, r, triple.tail))
    return sorted({t for t in out if t != triple and t not in exclude and tuple((t.head, t.rel, t.tail)) not in graph})


def eval_negatives(heldout: Sequence[Triple], graph: KnowledgeGraph, rng: RngStream, per_positive: int) -> list[Triple]:
    """Corruptions of held-out edges, filtered against the true edge set."""
    out = []
    for t in heldout:
        pool = all_corruptions(t, graph)
        if len(pool) > per_positive:
            idx = rng.choice(len(pool), size=per_positive, replace=False)
            pool = [pool[i] for i in sorted(idx)]
        out.extend(pool)
    return out


def score_triples(embeddings, params, triples: Sequence[Triple]) -> np.ndarray:
    if not triples:
        return np.zeros(0)
    h = torch.tensor([t.head for t in triples])
    r = torch.tensor([t.rel for t in triples])
    t_ = torch.tensor([t.tail for t in triples])
    with torch.no_grad():
        return torch.sigmoid(distmult_logits(embeddings, params["R_diag"], h, r, t_)).numpy()


@dataclass
class PretrainResult:
    params: ParamStore
    metrics: list[dict] = field(default_factory=list)
    heldout: list[Triple] = field(default_factory=list)
    train_edges: list[Triple] = field(default_factory=list)
    eval_negatives: list[Triple] = field(default_factory=list)
    initial_auc: float = float("nan")

    def heldout_auc(self, inverse_relations: bool = True, graph: KnowledgeGraph | None = None) -> float:
        return _heldout_auc(graph, self.params, self.train_edges, self.heldout, self.eval_negatives, inverse_relations)


def _heldout_auc(graph, params, train_edges, heldout, negatives, inverse) -> float:
    if not heldout:
        return float("nan")
    with torch.no_grad():
        emb = rgcn_forward(graph, params, train_edges, inverse)
    return auc(score_triples(emb, params, heldout), score_triples(emb, params, negatives))


def split_heldout(graph: KnowledgeGraph, frac: float, rng: RngStream) -> tuple[list[Triple], list[Triple]]:
    n = len(graph)
    k = int(math.ceil(frac * n)) if frac > 0 and n > 1 else 0
    k = min(k, n - 1)
    order = rng.permutation(n)
    held = sorted(order[:k].tolist())
    held_set = set(held)
    return [graph.triples[i] for i in range(n) if i not in held_set], [graph.triples[i] for i in held]


def _lr_at(config: KGAEConfig, epoch: int) -> float:
    if config.lr_schedule == "cosine" and config.epochs > 1:
        frac = (epoch - 1) / (config.epochs - 1)
        return config.lr * (config.lr_floor + (1 - config.lr_floor) * 0.5 * (1 + math.cos(math.pi * frac)))
    return config.lr


def pretrain_kgae(graph: KnowledgeGraph, config: KGAEConfig, rng: RngStream, log=None) -> PretrainResult:
    """Per epoch: keep each training edge with prob ``edge_keep``, pass messages over
    the kept edges, corrupt them into T and take one Adam step on the loss."""
    if len(graph) == 0:
        raise ValueError("cannot pretrain on an empty graph")
    params = init_params(graph, config.dim, rng.spawn("init"), config.inverse_relations, config.dtype)
    split_rng = rng.spawn("split")
    train_edges, heldout = split_heldout(graph, config.heldout_frac, split_rng)
    negs = eval_negatives(heldout, graph, split_rng, config.eval_negatives)
    result = PretrainResult(params, heldout=heldout, train_edges=train_edges, eval_negatives=negs)
    result.initial_auc = _heldout_auc(graph, params, train_edges, heldout, negs, config.inverse_relations)
    epoch_rng = rng.spawn("epochs")
    for epoch in range(1, config.epochs + 1):
        keep = epoch_rng.random(len(train_edges)) < config.edge_keep
        sampled = [t for t, k in zip(train_edges, keep) if k]
        if not sampled:
            sampled = [train_edges[int(epoch_rng.integers(len(train_edges)))]]
        samples = sample_negatives(sampled, graph, epoch_rng)
        emb = rgcn_forward(graph, params, sampled, config.inverse_relations)
        loss = autoencoder_loss(samples, params, emb)
        backward(params, loss)
        adam_step(params, _lr_at(config, epoch))
        rec = {"epoch": epoch, "loss": float(loss.detach()),
               "auc": _heldout_auc(graph, params, train_edges, heldout, negs, config.inverse_relations),
               "samples": len(samples), "edges": samples.source_edge_count}
        result.metrics.append(rec)
        if log is not None:
            log(rec)
    params.zero_grad()
    return result


def export_concept_features(graph: KnowledgeGraph, params, inverse_relations: bool = True) -> ParamStore:
    """Full-graph forward pass; returns a frozen store holding table ``features``."""
    with torch.no_grad():
        h = rgcn_forward(graph, params, graph.triples, inverse_relations)
    out = ParamStore(dtype=h.dtype)
    out.add("features", h, trainable=False)
    return out
