import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from kestance.numerics import FrozenParameterError, RngStream, adam_step, grad_check
from kestance.textenc import (CLS, MASK, PAD, SEP, UNK, Batch, EncoderConfig, SentimentConfig,
                              Vocabulary, detokenize, encode, init_encoder, init_sentiment_heads,
                              multi_head_attention, pretrain_sentiment, rating_probs, sentiment_loss,
                              sentiment_mask, tokenize)

WORDS = "good bad great awful movie plot actor scene music long short day".split()
LEXICON = {"good": "pos", "great": "pos", "bad": "neg", "awful": "neg"}


def vocab():
    return Vocabulary.build([" ".join(WORDS)])


def small_enc(**kw):
    base = dict(d_model=8, n_blocks=1, n_heads=2, d_ff=16, max_len=12, dropout=0.0)
    base.update(kw)
    return EncoderConfig(**base)


def test_tokenize_layout():
    v = vocab()
    seq = tokenize("good movie", "plot", v, 8)
    toks = [v.token(i) for i in seq.ids]
    assert toks == [CLS, "good", "movie", SEP, "plot", SEP, PAD, PAD]
    assert seq.segment[:6] == [0, 0, 0, 0, 1, 1]
    assert seq.mask == [True] * 6 + [False] * 2


def test_unknown_words_map_to_unk():
    v = vocab()
    seq = tokenize("zebra", "plot", v, 6)
    assert v.token(seq.ids[1]) == UNK


def test_truncation_keeps_topic_and_fits():
    v = vocab()
    doc = " ".join(WORDS * 40)
    seq = tokenize(doc, "plot scene", v, 256)
    assert len(seq) == 256 and all(seq.mask)
    assert detokenize(seq, v)[1] == "plot scene"
    with pytest.raises(ValueError):
        tokenize("good", "plot scene music", v, 5)


def test_detokenize_roundtrip():
    v = vocab()
    assert detokenize(tokenize("good movie day", "actor", v, 16), v) == ("good movie day", "actor")


def test_extra_padding_does_not_change_real_positions():
    v = vocab()
    cfg = small_enc(max_len=20)
    p = init_encoder(len(v), cfg, RngStream(0))
    short = encode(tokenize("good movie", "plot", v, 8), p, cfg)
    long = encode(tokenize("good movie", "plot", v, 20), p, cfg)
    assert torch.allclose(short.hidden[0, :6], long.hidden[0, :6], atol=1e-12)


def test_attention_rows_sum_to_one_and_skip_padding():
    v = vocab()
    cfg = small_enc()
    p = init_encoder(len(v), cfg, RngStream(1))
    batch = Batch.collate([tokenize("good movie", "plot", v, 10), tokenize("bad", "day", v, 10)])
    x = p["tok_emb"][batch.ids]
    blk = {k[len("block0."):]: t for k, t in p.items() if k.startswith("block0.")}
    _, w = multi_head_attention(x, x, batch.mask, blk, 2, return_weights=True)
    assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-6)
    assert (w[..., ~batch.mask[0]][0] == 0).all()


def test_masking_rates_match_probabilities():
    v = vocab()
    seq = tokenize("good movie", "", v, 6)
    rng = RngStream(2)
    hits = {"good": 0, "movie": 0}
    trials = 10_000
    corrupted, records = sentiment_mask([seq] * trials, LEXICON, (0.5, 0.1), rng, v)
    for r in records:
        hits[v.token(r.original)] += 1
    assert abs(hits["good"] / trials - 0.5) < 0.02
    assert abs(hits["movie"] / trials - 0.1) < 0.02
    special = {v.id(t) for t in (CLS, SEP, PAD)}
    assert all(seq.ids[r.position] not in special for r in records)
    assert all(c.ids[r.position] == v.id(MASK) for r in records for c in [corrupted[r.row]])


def test_masking_boundaries():
    v = vocab()
    plain = tokenize("movie plot day", "", v, 8)
    _, rec = sentiment_mask([plain] * 50, LEXICON, (0.9, 0.0), RngStream(3), v)
    assert rec == []
    _, rec = sentiment_mask([plain] * 50, {}, (0.5, 0.1), RngStream(3), v)
    assert all(r.polarity is None for r in rec)
    with pytest.raises(ValueError):
        sentiment_mask([plain], LEXICON, (0.1, 0.1), RngStream(3), v)


def corpus(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        pos = rng.random() < 0.5
        polar = ["good", "great"] if pos else ["bad", "awful"]
        words = list(rng.choice(WORDS[4:], 3)) + [str(rng.choice(polar))]
        out.append((" ".join(rng.permutation(words)), 5 if pos else 1))
    return out


def test_pretraining_loss_decreases():
    v = vocab()
    cfg = SentimentConfig(encoder=small_enc(d_model=16, d_ff=32), epochs=30, batch_size=50, lr=3e-3,
                          dtype=torch.float64)
    model = pretrain_sentiment(corpus(200), LEXICON, v, cfg, RngStream(4))
    assert model.losses[-1] < 0.7 * model.losses[0]
    assert not model.encoder.trainable_names()


def test_rating_probs_normalized_and_frozen_rejected():
    v = vocab()
    cfg = SentimentConfig(encoder=small_enc(), num_ratings=7, epochs=1, dtype=torch.float64)
    model = pretrain_sentiment(corpus(10), LEXICON, v, cfg, RngStream(5))
    out = encode(tokenize("good day", "", v, 12), model.encoder, cfg.encoder)
    p = rating_probs(out, model.heads)
    assert p.shape == (1, 7) and abs(p.sum().item() - 1) < 1e-12
    with pytest.raises(FrozenParameterError):
        adam_step(model.encoder, 0.1)


def test_rating_out_of_range_rejected():
    cfg = SentimentConfig(encoder=small_enc(), epochs=1)
    with pytest.raises(ValueError, match="rating"):
        pretrain_sentiment([("good", 6)], LEXICON, vocab(), cfg, RngStream(0))


def test_per_example_masks_make_training_order_invariant():
    v = vocab()
    data = corpus(24, seed=1)
    cfg = SentimentConfig(encoder=small_enc(), epochs=3, batch_size=len(data), per_example_masks=True,
                          dtype=torch.float64)
    a = pretrain_sentiment(data, LEXICON, v, cfg, RngStream(6))
    b = pretrain_sentiment(list(reversed(data)), LEXICON, v, cfg, RngStream(6))
    np.testing.assert_allclose(a.losses, b.losses, rtol=1e-10)
    for n in a.encoder.names():
        assert torch.allclose(a.encoder[n], b.encoder[n], atol=1e-9)


def test_general_rate_zero_masks_only_lexicon_words():
    v = vocab()
    seq = tokenize("good movie bad plot", "", v, 8)
    _, rec = sentiment_mask([seq] * 200, LEXICON, (0.5, 0.0), RngStream(7), v)
    assert rec and all(r.polarity is not None for r in rec)


def test_empty_document_and_output_shape():
    v = vocab()
    seq = tokenize("", "plot", v, 6)
    assert [v.token(i) for i in seq.ids[:4]] == [CLS, SEP, "plot", SEP]
    cfg = small_enc(max_len=6)
    out = encode(seq, init_encoder(len(v), cfg, RngStream(0)), cfg)
    assert out.hidden.shape == (1, 6, 8)
    with pytest.raises(ValueError):
        encode(tokenize("", "plot", v, 8), init_encoder(len(v), cfg, RngStream(0)), cfg)


def test_padded_token_ids_are_invisible():
    v = vocab()
    cfg = small_enc()
    p = init_encoder(len(v), cfg, RngStream(11))
    seq = tokenize("good movie", "plot", v, 12)
    noisy = dataclasses.replace(seq, ids=seq.ids[:6] + [v.id(w) for w in WORDS[:6]])
    a, b = encode(seq, p, cfg).hidden[0, :6], encode(noisy, p, cfg).hidden[0, :6]
    assert torch.allclose(a, b, atol=1e-12)


def test_dropout_needs_generator_in_train_mode():
    v = vocab()
    cfg = small_enc(dropout=0.3)
    p = init_encoder(len(v), cfg, RngStream(8))
    seq = tokenize("good", "plot", v, 12)
    with pytest.raises(ValueError):
        encode(seq, p, cfg, "train")
    a = encode(seq, p, cfg, "eval").hidden
    assert torch.equal(a, encode(seq, p, cfg, "eval").hidden)


def test_encoder_gradients_match_finite_differences():
    v = vocab()
    cfg = small_enc(d_model=8, n_heads=2, d_ff=8, max_len=6)
    scfg = SentimentConfig(encoder=cfg, dtype=torch.float64)
    rng = RngStream(9)
    enc = init_encoder(len(v), cfg, rng)
    heads = init_sentiment_heads(len(v), scfg, rng, torch.float64)
    seqs = [tokenize("good movie", "plot", v, 6), tokenize("awful", "day", v, 6)]
    corrupted, records = sentiment_mask(seqs, LEXICON, (1.0, 0.5), RngStream(10), v)
    assert records
    store = enc.clone()
    for n in heads.names():
        store.add("h." + n, heads[n])

    def loss(s):
        e = {k: t for k, t in s.items() if not k.startswith("h.")}
        h = {k[2:]: t for k, t in s.items() if k.startswith("h.")}
        return sentiment_loss(corrupted, records, [5, 1], e, h, scfg)
    # the loss is exactly invariant to the key bias (softmax shift), so its finite difference carries
    # no truncation error and a wide step keeps rounding noise off the 1e-8 denominator floor
    rest = [n for n in store.names() if n != "block0.wk_b"]
    report = grad_check(loss, store, eps=1e-5, names=rest)
    assert report.passed(1e-4), {k: e for k, e in report.max_rel_error.items() if e >= 1e-4}
    assert grad_check(loss, store, eps=1e-2, names=["block0.wk_b"]).passed(1e-4)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(WORDS), min_size=1, max_size=6), st.lists(st.sampled_from(WORDS), max_size=2))
def test_tokenize_roundtrip_property(doc, topic):
    v = vocab()
    seq = tokenize(" ".join(doc), " ".join(topic), v, 12)
    assert detokenize(seq, v) == (" ".join(doc), " ".join(topic))
    assert sum(seq.mask) == len(doc) + len(topic) + 3
