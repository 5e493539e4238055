"""Tokenization, a small transformer encoder, and sentiment-masked pretraining.

The same encoder code backs both the trainable context encoder and the
frozen sentiment encoder; they differ only in how their parameters were
obtained.
"""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import torch
import torch.nn.functional as F

from .kgraph import word_tokens
from .numerics import ParamStore, RngStream, adam_step, backward, xavier_uniform

logger = logging.getLogger(__name__)

CLS, SEP, PAD, MASK, UNK = "[CLS]", "[SEP]", "[PAD]", "[MASK]", "[UNK]"
SPECIALS = (CLS, SEP, PAD, MASK, UNK)
SEG_DOC, SEG_TOPIC = 0, 1
POLARITIES = ("pos", "neg")


class Vocabulary:
    """Bijective token <-> id map; specials occupy ids 0-4."""

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos: list[str] = list(SPECIALS)
        self._stoi = {t: i for i, t in enumerate(self._itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self._stoi:
            self._stoi[token] = len(self._itos)
            self._itos.append(token)
        return self._stoi[token]

    def __len__(self):
        return len(self._itos)

    def __contains__(self, token):
        return token in self._stoi

    def id(self, token: str) -> int:
        return self._stoi.get(token, self._stoi[UNK])

    def token(self, idx: int) -> str:
        return self._itos[idx]

    @property
    def tokens(self) -> list[str]:
        return list(self._itos)

    @classmethod
    def build(cls, texts: Iterable[str], min_freq: int = 1) -> "Vocabulary":
        counts: dict[str, int] = {}
        for text in texts:
            for tok in word_tokens(text):
                counts[tok] = counts.get(tok, 0) + 1
        return cls(t for t, c in counts.items() if c >= min_freq)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self._itos), encoding="utf8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf8").splitlines()
        if tuple(lines[:len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary file must start with the reserved tokens")
        return cls(lines[len(SPECIALS):])


class SentimentLexicon(dict):
    """word -> "pos" | "neg"."""

    @classmethod
    def load(cls, path: str | Path) -> "SentimentLexicon":
        lex = cls()
        with open(path, encoding="utf8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                word, _, pol = line.rstrip("\n").partition("\t")
                pol = pol.strip().lower()
                if pol not in POLARITIES:
                    raise ValueError(f"{path}:{lineno}: polarity must be pos or neg, got {pol!r}")
                word = word.strip().lower()
                if word in lex and lex[word] != pol:
                    raise ValueError(f"{path}:{lineno}: {word!r} listed with both polarities")
                lex[word] = pol
        return lex

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{w}\t{p}\n" for w, p in sorted(self.items())), encoding="utf8")


@dataclass
class TokenSequence:
    ids: list[int]
    segment: list[int]
    mask: list[bool]
    cls_index: int = 0

    def __len__(self):
        return len(self.ids)


def tokenize(document: str, topic: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """Lay out ``[CLS] d [SEP] t [SEP]`` padded to ``max_len``; the document is cut from the right."""
    if max_len < 4:
        raise ValueError("max_len must be at least 4")
    t_toks = word_tokens(topic)
    if len(t_toks) > max_len - 3:
        raise ValueError(f"topic has {len(t_toks)} tokens, only {max_len - 3} fit")
    d_toks = word_tokens(document)[: max_len - 3 - len(t_toks)]
    ids = [vocab.id(CLS)] + [vocab.id(t) for t in d_toks] + [vocab.id(SEP)]
    segment = [SEG_DOC] * len(ids)
    ids += [vocab.id(t) for t in t_toks] + [vocab.id(SEP)]
    segment += [SEG_TOPIC] * (len(t_toks) + 1)
    n = len(ids)
    pad = max_len - n
    return TokenSequence(ids + [vocab.id(PAD)] * pad, segment + [SEG_DOC] * pad, [True] * n + [False] * pad)


def detokenize(seq: TokenSequence, vocab: Vocabulary) -> tuple[str, str]:
    """Inverse of :func:`tokenize` for untruncated, in-vocabulary text."""
    toks = [vocab.token(i) for i, m in zip(seq.ids, seq.mask) if m]
    first = toks.index(SEP)
    return " ".join(toks[1:first]), " ".join(toks[first + 1:-1])


@dataclass
class Batch:
    ids: torch.Tensor
    segment: torch.Tensor
    mask: torch.Tensor

    @classmethod
    def collate(cls, seqs: Sequence[TokenSequence]) -> "Batch":
        return cls(torch.tensor([s.ids for s in seqs], dtype=torch.long),
                   torch.tensor([s.segment for s in seqs], dtype=torch.long),
                   torch.tensor([s.mask for s in seqs], dtype=torch.bool))

    def __len__(self):
        return self.ids.shape[0]


@dataclass
class EncoderConfig:
    d_model: int = 128
    n_blocks: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_len: int = 256
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass
class EncoderOutput:
    hidden: torch.Tensor  # (batch, seq, d_model)
    mask: torch.Tensor    # (batch, seq) bool, True = real token
    cls_index: int = 0

    @property
    def pooled(self) -> torch.Tensor:
        return self.hidden[:, self.cls_index]


def add_attention_block(store: ParamStore, prefix: str, d_model: int, d_ff: int, rng: RngStream) -> None:
    dt = store.dtype
    for name in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}{name}", xavier_uniform(rng, d_model, d_model, dt))
        store.add(f"{prefix}{name}_b", torch.zeros(d_model, dtype=dt))
    store.add(f"{prefix}ln1.w", torch.ones(d_model, dtype=dt))
    store.add(f"{prefix}ln1.b", torch.zeros(d_model, dtype=dt))
    store.add(f"{prefix}ff1", xavier_uniform(rng, d_ff, d_model, dt))
    store.add(f"{prefix}ff1_b", torch.zeros(d_ff, dtype=dt))
    store.add(f"{prefix}ff2", xavier_uniform(rng, d_model, d_ff, dt))
    store.add(f"{prefix}ff2_b", torch.zeros(d_model, dtype=dt))
    store.add(f"{prefix}ln2.w", torch.ones(d_model, dtype=dt))
    store.add(f"{prefix}ln2.b", torch.zeros(d_model, dtype=dt))


def init_encoder(vocab_size: int, config: EncoderConfig, rng: RngStream, store: ParamStore | None = None,
                 prefix: str = "", dtype=torch.float64) -> ParamStore:
    store = store if store is not None else ParamStore(dtype=dtype)
    D = config.d_model
    store.add(f"{prefix}tok_emb", xavier_uniform(rng, vocab_size, D, store.dtype))
    store.add(f"{prefix}pos_emb", xavier_uniform(rng, config.max_len, D, store.dtype))
    store.add(f"{prefix}seg_emb", xavier_uniform(rng, 2, D, store.dtype))
    store.add(f"{prefix}emb_ln.w", torch.ones(D, dtype=store.dtype))
    store.add(f"{prefix}emb_ln.b", torch.zeros(D, dtype=store.dtype))
    for i in range(config.n_blocks):
        add_attention_block(store, f"{prefix}block{i}.", D, config.d_ff, rng)
    return store


def multi_head_attention(queries: torch.Tensor, keys: torch.Tensor, key_mask: torch.Tensor,
                         p: Mapping[str, torch.Tensor], n_heads: int, return_weights: bool = False):
    """Scaled dot-product attention; keys with ``key_mask`` False get zero weight."""
    B, Lq, D = queries.shape
    Lk = keys.shape[1]
    hd = D // n_heads
    q = (queries @ p["wq"].T + p["wq_b"]).view(B, Lq, n_heads, hd).transpose(1, 2)
    k = (keys @ p["wk"].T + p["wk_b"]).view(B, Lk, n_heads, hd).transpose(1, 2)
    v = (keys @ p["wv"].T + p["wv_b"]).view(B, Lk, n_heads, hd).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(hd)
    scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
    weights = torch.softmax(scores, dim=-1)
    ctx = (weights @ v).transpose(1, 2).reshape(B, Lq, D)
    out = ctx @ p["wo"].T + p["wo_b"]
    return (out, weights) if return_weights else out


def _dropout(x, rate, train, generator):
    if not train or rate <= 0:
        return x
    if generator is None:
        raise ValueError("dropout in train mode needs an explicit generator")
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate
    return x * keep / (1 - rate)


def attention_block(queries: torch.Tensor, keys: torch.Tensor, key_mask: torch.Tensor,
                    p: Mapping[str, torch.Tensor], n_heads: int, dropout: float = 0.0,
                    train: bool = False, generator=None) -> torch.Tensor:
    """Post-norm transformer block: attention, residual, norm, feed-forward, residual, norm."""
    D = queries.shape[-1]
    a = multi_head_attention(queries, keys, key_mask, p, n_heads)
    x = F.layer_norm(queries + _dropout(a, dropout, train, generator), (D,), p["ln1.w"], p["ln1.b"])
    f = F.gelu(x @ p["ff1"].T + p["ff1_b"]) @ p["ff2"].T + p["ff2_b"]
    return F.layer_norm(x + _dropout(f, dropout, train, generator), (D,), p["ln2.w"], p["ln2.b"])


def _sub(p: Mapping[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in p.items() if k.startswith(prefix)}


def encode(batch: Batch | TokenSequence, params: Mapping[str, torch.Tensor], config: EncoderConfig,
           mode: str = "eval", generator: torch.Generator | None = None) -> EncoderOutput:
    """Token + position + segment embeddings followed by ``n_blocks`` attention blocks."""
    if isinstance(batch, TokenSequence):
        batch = Batch.collate([batch])
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    L = batch.ids.shape[1]
    if L > params["pos_emb"].shape[0]:
        raise ValueError(f"sequence length {L} exceeds positional table {params['pos_emb'].shape[0]}")
    train = mode == "train"
    D = config.d_model
    x = params["tok_emb"][batch.ids] + params["pos_emb"][:L][None] + params["seg_emb"][batch.segment]
    x = F.layer_norm(x, (D,), params["emb_ln.w"], params["emb_ln.b"])
    x = _dropout(x, config.dropout, train, generator)
    for i in range(config.n_blocks):
        x = attention_block(x, x, batch.mask, _sub(params, f"block{i}."), config.n_heads,
                            config.dropout, train, generator)
    return EncoderOutput(x, batch.mask)


@dataclass
class MaskRecord:
    row: int
    position: int
    original: int
    polarity: str | None


def _mask_draw(rng: RngStream | None, key: tuple | None, n: int):
    if key is not None:
        return RngStream(zlib.crc32(repr(key).encode("utf8"))).random(n)
    return rng.random(n)


def sentiment_mask(batch: Sequence[TokenSequence], lexicon: Mapping[str, str], rates: tuple[float, float],
                   rng: RngStream, vocab: Vocabulary, keys: Sequence | None = None):
    """Replace lexicon tokens by [MASK] with prob ``p_sent`` and other tokens with ``p_gen``.

    Specials and padding are never masked. When ``keys`` is given, each row
    draws from its own stream seeded by its key instead of the shared ``rng``.
    """
    p_sent, p_gen = rates
    if not (0 <= p_gen <= 1 and 0 <= p_sent <= 1) or p_sent <= p_gen:
        raise ValueError("need 0 <= p_gen < p_sent <= 1")
    special_ids = {vocab.id(s) for s in SPECIALS}
    mask_id = vocab.id(MASK)
    out, records = [], []
    for row, seq in enumerate(batch):
        draws = _mask_draw(rng, None if keys is None else keys[row], len(seq.ids))
        ids = list(seq.ids)
        for pos, (tid, real) in enumerate(zip(seq.ids, seq.mask)):
            if not real or tid in special_ids:
                continue
            pol = lexicon.get(vocab.token(tid))
            if draws[pos] < (p_sent if pol is not None else p_gen):
                ids[pos] = mask_id
                records.append(MaskRecord(row, pos, tid, pol))
        out.append(TokenSequence(ids, list(seq.segment), list(seq.mask), seq.cls_index))
    return out, records


@dataclass
class SentimentConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    p_sent: float = 0.5
    p_gen: float = 0.1
    num_ratings: int = 5
    epochs: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    per_example_masks: bool = False
    dtype: torch.dtype = torch.float32


@dataclass
class SentimentModel:
    encoder: ParamStore
    heads: ParamStore
    config: SentimentConfig
    losses: list[float] = field(default_factory=list)


def init_sentiment_heads(vocab_size: int, config: SentimentConfig, rng: RngStream, dtype) -> ParamStore:
    D = config.encoder.d_model
    heads = ParamStore(dtype=dtype)
    heads.add("mlm.W", xavier_uniform(rng, vocab_size, D, dtype))
    heads.add("mlm.b", torch.zeros(vocab_size, dtype=dtype))
    heads.add("pol.W", xavier_uniform(rng, len(POLARITIES), D, dtype))
    heads.add("pol.b", torch.zeros(len(POLARITIES), dtype=dtype))
    heads.add("rating.W", xavier_uniform(rng, config.num_ratings, D, dtype))
    heads.add("rating.b", torch.zeros(config.num_ratings, dtype=dtype))
    return heads


def rating_probs(hidden: EncoderOutput, heads: Mapping[str, torch.Tensor]) -> torch.Tensor:
    return torch.softmax(hidden.pooled @ heads["rating.W"].T + heads["rating.b"], dim=-1)


def sentiment_loss(corrupted: Sequence[TokenSequence], records: Sequence[MaskRecord], ratings: Sequence[int],
                   encoder: Mapping[str, torch.Tensor], heads: Mapping[str, torch.Tensor],
                   config: SentimentConfig, generator: torch.Generator | None = None) -> torch.Tensor:
    """Masked-token CE + masked-word polarity CE + rating CE from the [CLS] row."""
    out = encode(Batch.collate(corrupted), encoder, config.encoder, "train", generator)
    rating_logits = out.pooled @ heads["rating.W"].T + heads["rating.b"]
    loss = F.cross_entropy(rating_logits, torch.tensor([r - 1 for r in ratings]))
    if records:
        rows = torch.tensor([r.row for r in records])
        pos = torch.tensor([r.position for r in records])
        h = out.hidden[rows, pos]
        tok_logits = h @ heads["mlm.W"].T + heads["mlm.b"]
        loss = loss + F.cross_entropy(tok_logits, torch.tensor([r.original for r in records]))
        polar = [(i, POLARITIES.index(r.polarity)) for i, r in enumerate(records) if r.polarity is not None]
        if polar:
            idx = torch.tensor([i for i, _ in polar])
            pol_logits = h[idx] @ heads["pol.W"].T + heads["pol.b"]
            loss = loss + F.cross_entropy(pol_logits, torch.tensor([c for _, c in polar]))
    return loss


def pretrain_sentiment(corpus: Sequence[tuple[str, int]], lexicon: Mapping[str, str], vocab: Vocabulary,
                       config: SentimentConfig, rng: RngStream, log=None) -> SentimentModel:
    """Train the sentiment encoder on (text, rating) pairs, then freeze it."""
    K = config.num_ratings
    for text, rating in corpus:
        if not (isinstance(rating, int) and 1 <= rating <= K):
            raise ValueError(f"rating {rating!r} outside 1..{K} for {text[:40]!r}")
    dt = config.dtype
    init_rng = rng.spawn("init")
    encoder = init_encoder(len(vocab), config.encoder, init_rng, dtype=dt)
    heads = init_sentiment_heads(len(vocab), config, init_rng, dt)
    seqs = [tokenize(text, "", vocab, config.encoder.max_len) for text, _ in corpus]
    ratings = [r for _, r in corpus]
    joint = ParamStore(dtype=dt)
    joint._entries.update({f"enc.{k}": v for k, v in encoder._entries.items()})
    joint._entries.update({f"head.{k}": v for k, v in heads._entries.items()})
    order_rng = rng.spawn("order")
    mask_rng = rng.spawn("mask")
    dropout_gen = rng.spawn("dropout").torch_generator()
    model = SentimentModel(encoder, heads, config)
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(seqs)) if config.batch_size < len(seqs) else range(len(seqs))
        total, n = 0.0, 0
        for start in range(0, len(seqs), config.batch_size):
            idx = list(order[start:start + config.batch_size])
            keys = [(epoch, corpus[i][0]) for i in idx] if config.per_example_masks else None
            corrupted, records = sentiment_mask([seqs[i] for i in idx], lexicon, (config.p_sent, config.p_gen),
                                                mask_rng, vocab, keys=keys)
            loss = sentiment_loss(corrupted, records, [ratings[i] for i in idx],
                                  joint.subset("enc."), joint.subset("head."), config, dropout_gen)
            backward(joint, loss)
            adam_step(joint, config.lr)
            total += float(loss.detach()) * len(idx)
            n += len(idx)
        model.losses.append(total / n)
        if log is not None:
            log({"epoch": epoch, "loss": total / n})
    encoder.freeze()
    heads.freeze()
    return model
