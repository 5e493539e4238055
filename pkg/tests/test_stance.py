import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from kestance import stance
from kestance.evalkit import StanceExample
from kestance.kgraph import KnowledgeGraph
from kestance.numerics import ParamStore, RngStream, backward, grad_check
from kestance.stance import (KGContext, ModelVariant, StanceConfig, StanceInputs, classify, commonsense_feature,
                             forward, fuse, init_stance_params, load_model, model_predict, recon_loss, save_model,
                             stance_loss, total_loss, train_stance)
from kestance.textenc import (Batch, EncoderConfig, EncoderOutput, Vocabulary, add_attention_block, attention_block,
                              init_encoder, tokenize)

F64 = torch.float64


def test_stance_loss_oracles():
    uniform = torch.full((1, 3), 1 / 3, dtype=F64)
    assert stance_loss(uniform, [0]).item() == pytest.approx(math.log(3), abs=1e-9)
    assert stance_loss(torch.tensor([[0.0, 1.0, 0.0]], dtype=F64), [1]).item() == 0.0
    p = torch.tensor([[0.5, 0.25, 0.25], [0.1, 0.1, 0.8]], dtype=F64)
    a, b = -math.log(0.25), -math.log(0.8)
    assert stance_loss(p, [1, 2]).item() == pytest.approx((a + b) / 2, abs=1e-12)
    # clamped rather than infinite
    assert math.isfinite(stance_loss(torch.tensor([[1.0, 0.0, 0.0]], dtype=F64), [2]).item())


def identity_decoder(d):
    return {"recon.W": torch.eye(d, dtype=F64), "recon.b": torch.zeros(d, dtype=F64)}


def test_recon_loss_oracles():
    params = identity_decoder(2)
    h_kg = torch.tensor([[0.0, 0.0]], dtype=F64)
    assert recon_loss(torch.tensor([[1.0, 1.0]], dtype=F64), h_kg, params).item() == 2.0
    assert recon_loss(h_kg, h_kg, params).item() == 0.0


def test_recon_loss_permutation_invariant():
    rng = np.random.default_rng(0)
    h_k, h_kg = torch.tensor(rng.normal(size=(6, 3))), torch.tensor(rng.normal(size=(6, 3)))
    params = identity_decoder(3)
    perm = torch.tensor(rng.permutation(6))
    assert recon_loss(h_k[perm], h_kg[perm], params).item() == pytest.approx(recon_loss(h_k, h_kg, params).item(), rel=1e-14)


def test_total_loss_oracles():
    one, half = torch.tensor(1.0), torch.tensor(0.5)
    assert total_loss(one, half, 1.0).item() == 1.5
    assert total_loss(one, half, 0.0).item() == 1.0
    assert total_loss(one, torch.tensor(0.0)).item() == 1.0
    assert total_loss(one, half, 1.0, ModelVariant.named("bs")).item() == 1.0
    with pytest.raises(ValueError):
        total_loss(one, half, -1.0)


def test_classify_uniform_and_shift_invariant():
    v = ModelVariant.named("bs-rgcn")
    params = {"cls.W": torch.zeros(3, 4, dtype=F64), "cls.b": torch.zeros(3, dtype=F64)}
    h_cls, h_k = torch.ones(1, 2, dtype=F64), torch.ones(1, 2, dtype=F64)
    assert torch.allclose(classify(h_cls, h_k, params, v), torch.full((1, 3), 1 / 3, dtype=F64), atol=1e-15)
    params["cls.W"] = torch.tensor(np.random.default_rng(1).normal(size=(3, 4)))
    shifted = dict(params, **{"cls.b": params["cls.b"] + 7.5})
    assert torch.allclose(classify(h_cls, h_k, params, v), classify(h_cls, h_k, shifted, v), atol=1e-14)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=3, max_size=3), st.floats(0.01, 50), st.floats(-100, 100))
def test_argmax_survives_scaling_and_shift(logits, scale, shift):
    z = torch.tensor(logits, dtype=F64)
    p = torch.softmax(z, 0)
    assert abs(p.sum().item() - 1) < 1e-12
    if len(set(logits)) == 3:
        assert torch.argmax(torch.softmax(z * scale + shift, 0)) == torch.argmax(p)


def feature_graph():
    g = KnowledgeGraph.from_labeled([("apple", "IsA", "fruit"), ("zebra", "IsA", "zebra")])
    tags = {"apple": "NOUN", "fruit": "NOUN", "zebra": "NOUN", "eat": "VERB"}
    feats = torch.tensor([[1.0, 0.0], [0.0, 1.0], [3.0, 4.0]], dtype=F64)
    return g, tags, feats


def test_commonsense_feature_means_vicinity_rows():
    g, tags, feats = feature_graph()
    f = commonsense_feature("eat apple", "food", g, feats, tags)
    assert f.matched_concept_count == 2
    assert f.h_kg.tolist() == [0.5, 0.5]


def test_commonsense_feature_single_concept():
    g, tags, feats = feature_graph()
    f = commonsense_feature("zebra", "", g, feats, tags)
    assert f.matched_concept_count == 1 and f.h_kg.tolist() == [3.0, 4.0]


def test_commonsense_feature_without_matches():
    g, tags, feats = feature_graph()
    params = {"kg.W_k": torch.ones(4, 2, dtype=F64), "kg.b_k": torch.arange(4, dtype=F64)}
    f = commonsense_feature("eat", "nothing", g, feats, tags, params)
    assert f.matched_concept_count == 0 and f.h_kg.tolist() == [0.0, 0.0]
    assert torch.equal(f.h_k, params["kg.b_k"])


def enc_output(seed, L=5, D=4, mask=None):
    g = torch.Generator().manual_seed(seed)
    m = torch.ones(1, L, dtype=torch.bool) if mask is None else mask
    return EncoderOutput(torch.randn(1, L, D, generator=g, dtype=F64), m)


def fusion_params(D=4):
    store = ParamStore()
    add_attention_block(store, "fuse.", D, 8, RngStream(0))
    return store


def test_fuse_shape_and_single_branch():
    p = fusion_params()
    ctx, sent = enc_output(1), enc_output(2)
    assert fuse(ctx, sent, p, 2).shape == (1, 4)
    assert torch.equal(fuse(ctx, None, p, 2), ctx.pooled)
    assert torch.equal(fuse(None, sent, p, 2), sent.pooled)
    with pytest.raises(ValueError):
        fuse(ctx, enc_output(3, D=6), p, 2)


def test_masked_sentiment_segment_reduces_to_context_attention():
    p = fusion_params()
    ctx = enc_output(1, mask=torch.tensor([[True, True, True, False, False]]))
    sent = enc_output(2, mask=torch.zeros(1, 5, dtype=torch.bool))
    fused = fuse(ctx, sent, p, 2)
    alone = attention_block(ctx.hidden, ctx.hidden, ctx.mask, p.subset("fuse."), 2)[:, 0]
    assert torch.allclose(fused, alone, atol=1e-14)


def tiny_setup(variant_name="bs-rgcn", kg_dim=3):
    vocab = Vocabulary.build(["apple fruit eat good bad zebra food"])
    enc = EncoderConfig(d_model=4, n_blocks=1, n_heads=2, d_ff=4, max_len=8, dropout=0.0)
    cfg = StanceConfig(encoder=enc, kg_dim=kg_dim, fusion_heads=2, dtype=F64, epochs=3, batch_size=2)
    variant = ModelVariant.named(variant_name)
    sent = init_encoder(len(vocab), enc, RngStream(1)).freeze()
    params = init_stance_params(len(vocab), cfg, variant, RngStream(2), sent if variant.use_sentiment else None)
    seqs = [tokenize("eat good apple", "food", vocab, 8), tokenize("bad zebra", "fruit", vocab, 8)]
    h_kg = torch.tensor(np.random.default_rng(3).normal(size=(2, kg_dim)))
    inputs = StanceInputs(Batch.collate(seqs), h_kg, torch.tensor([0, 1]))
    return vocab, cfg, variant, params, inputs


def test_kg_branch_isolated_when_disabled():
    _, cfg, variant, params, inputs = tiny_setup("bs")
    with_kg = forward(inputs, params.subset(""), cfg, variant)[0]
    without = forward(StanceInputs(inputs.batch, None, inputs.gold), params.subset(""), cfg, variant)[0]
    assert torch.equal(with_kg, without)
    assert abs(with_kg.sum(-1) - 1).max().item() < 1e-12


def test_total_loss_gradients_and_frozen_sentiment():
    _, cfg, variant, params, inputs = tiny_setup("bs-rgcn")
    assert params.trainable_names() and not any(n.startswith("sent.") for n in params.trainable_names())

    def loss(store):
        return stance.batch_loss(inputs, store.subset(""), cfg, variant, "eval")[0]
    # the loss is exactly invariant to key biases (softmax shift), so their finite differences carry
    # no truncation error and a wide step keeps rounding noise off the 1e-8 denominator floor
    key_bias = [n for n in params.trainable_names() if n.endswith("wk_b")]
    rest = [n for n in params.trainable_names() if n not in key_bias]
    report = grad_check(loss, params, eps=1e-5, names=rest)
    assert report.passed(1e-4), {k: e for k, e in report.max_rel_error.items() if e >= 1e-4}
    assert grad_check(loss, params, eps=1e-2, names=key_bias).passed(1e-4)
    backward(params, loss(params))
    for n in params.names():
        if n.startswith("sent."):
            assert params[n].grad is None


def test_zero_reconstruction_makes_total_equal_classification():
    _, cfg, variant, params, inputs = tiny_setup("b-rgcn", kg_dim=4)
    p = params.subset("")
    with torch.no_grad():
        p["kg.W_k"].copy_(torch.eye(4, dtype=F64))
        p["kg.b_k"].zero_()
        p["recon.W"].copy_(torch.eye(4, dtype=F64))
        p["recon.b"].zero_()
    total, l_cls, l_rec = stance.batch_loss(inputs, p, cfg, variant, "eval")
    assert l_rec.item() == 0.0 and total.item() == l_cls.item()


def test_s_rgcn_trains_sentiment_encoder():
    _, _, _, params, _ = tiny_setup("s-rgcn")
    assert any(n.startswith("sent.") for n in params.trainable_names())
    assert not any(n.startswith("ctx.") for n in params.names())
    with pytest.raises(ValueError):
        ModelVariant(use_sentiment=False, use_context=False)


def toy_examples():
    rows = [("eat good apple", "food", "pro"), ("bad apple", "fruit", "con"), ("zebra", "food", "neu"),
            ("good fruit", "food", "pro"), ("bad fruit eat", "food", "con"), ("eat zebra", "fruit", "neu")]
    return [StanceExample(str(i), d, t, g) for i, (d, t, g) in enumerate(rows)]


def toy_kg(dim=3):
    g, tags, _ = feature_graph()
    return KGContext(g, torch.tensor(np.random.default_rng(4).normal(size=(g.num_concepts, dim))), tags)


def test_training_is_deterministic_and_roundtrips(tmp_path):
    vocab, cfg, variant, _, _ = tiny_setup("b-rgcn")
    data = toy_examples()
    kg = toy_kg()
    a = train_stance(data, data, vocab, kg, cfg, variant, RngStream(5))
    b = train_stance(data, data, vocab, kg, cfg, variant, RngStream(5))
    assert a.logs == b.logs and len(a.logs) == cfg.epochs
    assert all("dev_macro_f1" in rec for rec in a.logs)
    assert a.best_dev_f1 == max(rec["dev_macro_f1"] for rec in a.logs)
    save_model(tmp_path / "m", a)
    back = load_model(tmp_path / "m", vocab)
    assert back.variant == variant and back.logs == a.logs
    pa, _ = model_predict(a, data, kg)
    pb, _ = model_predict(back, data, kg)
    assert np.array_equal(pa, pb)
    with pytest.raises(ValueError):
        load_model(tmp_path / "m", Vocabulary.build(["x"]))


def test_training_rejects_missing_inputs():
    vocab, cfg, variant, _, _ = tiny_setup("b-rgcn")
    with pytest.raises(ValueError):
        train_stance([], toy_examples(), vocab, toy_kg(), cfg, variant, RngStream(0))
    with pytest.raises(ValueError):
        train_stance(toy_examples(), toy_examples(), vocab, None, cfg, variant, RngStream(0))
    with pytest.raises(ValueError):
        train_stance(toy_examples(), toy_examples(), vocab, toy_kg(5), cfg, variant, RngStream(0))


def test_frozen_sentiment_encoder_unchanged_by_training():
    vocab, cfg, variant, _, _ = tiny_setup("bs")
    sent = init_encoder(len(vocab), cfg.encoder, RngStream(1)).freeze()
    model = train_stance(toy_examples(), toy_examples(), vocab, None, cfg, variant, RngStream(6), sent)
    for n in sent.names():
        assert torch.equal(model.params["sent." + n], sent[n])
