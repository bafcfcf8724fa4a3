import math

import numpy as np
import pytest

import oracles
from conftest import random_ids, tiny_config
from gtrans.autograd import Tape, Tensor, backward, default_dtype, no_grad
from gtrans.layers import ForwardContext
from gtrans.model import (
    ConfigError,
    ModelConfig,
    VocabError,
    build_model,
    decode,
    encode,
    multi_level_loss,
)

RNG = np.random.default_rng(4)


def test_config_defaults_and_validation():
    cfg = ModelConfig(src_vocab=20, tgt_vocab=20)
    assert (cfg.enc_group, cfg.dec_group, cfg.norm_style) == (3, 2, "post")
    assert cfg.temperature == math.sqrt(512)
    with pytest.raises(ConfigError) as err:
        ModelConfig(src_vocab=3, tgt_vocab=20, d_model=10, heads=4, norm_style="x").validate()
    assert len(err.value.violations) == 3


def test_config_round_trip_rejects_unknown_keys():
    cfg = tiny_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict(dict(cfg.to_dict(), bogus=1))


def test_build_is_deterministic_and_seed_sensitive():
    a = build_model(tiny_config(), seed=1).named_parameters()
    b = build_model(tiny_config(), seed=1).named_parameters()
    c = build_model(tiny_config(), seed=2).named_parameters()
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert not np.array_equal(a["encoder.0.ffn.w1"].data, c["encoder.0.ffn.w1"].data)


def test_embedding_sharing_and_tying():
    m = build_model(tiny_config())
    assert m.src_embed is m.tgt_embed and m.out_proj is None
    assert "src_embed" in m.named_parameters() and "tgt_embed" not in m.named_parameters()
    m2 = build_model(tiny_config(src_vocab=13, tie_embeddings=False))
    assert m2.src_embed is not m2.tgt_embed and m2.out_proj.shape == (8, 11)


def test_group_counts_and_fusion_shapes(tiny_model):
    f = tiny_model.fusion
    assert tiny_model.num_enc_groups == 2 and tiny_model.num_dec_groups == 2
    assert f.enc_weights.shape == (2,) and f.dec_rep_weights.shape == (3,)
    assert f.dec_prob_weights.shape == (2,) and f.tau == math.sqrt(8)


def test_forward_matches_manual_assembly(f64):
    """Encoder/decoder fusion and output mixing recomputed from per-layer states."""
    model = build_model(tiny_config(), seed=5)
    for t in (model.fusion.enc_weights, model.fusion.dec_rep_weights, model.fusion.dec_prob_weights):
        t.data[:] = RNG.normal(size=t.shape)
    src = random_ids(RNG, (2, 5), 11)
    tgt = random_ids(RNG, (2, 4), 11)
    with no_grad():
        enc = encode(model, src)
        pred = decode(model, tgt, enc)
    f = model.fusion
    fused = oracles.encoder_fuse([s.data for s in enc.states], f.enc_weights.data, 1,
                                 f.ln.gamma.data, f.ln.beta.data)
    np.testing.assert_allclose(enc.fused.data, fused, atol=1e-12)
    psi = oracles.psi(list(f.dec_prob_weights.data), f.tau)
    np.testing.assert_allclose(pred.psi.data, psi, atol=1e-12)
    w_o = model.tgt_embed.data.T
    probs = []
    for h in pred.fused_states:
        logits = h.data @ w_o
        e = np.exp(logits - logits.max(-1, keepdims=True))
        probs.append(e / e.sum(-1, keepdims=True))
    mixed = oracles.mix(probs, psi)
    np.testing.assert_allclose(pred.fused_probs.data, mixed, atol=1e-12)
    np.testing.assert_allclose(np.exp(pred.fused_log_probs()), mixed, atol=1e-12)


def test_decoder_is_causal(tiny_model):
    src = random_ids(RNG, (1, 5), 11)
    tgt = random_ids(RNG, (1, 6), 11)
    with no_grad():
        enc = encode(tiny_model, src)
        full = decode(tiny_model, tgt, enc).fused_log_probs()
        short = decode(tiny_model, tgt[:, :3], enc).fused_log_probs()
        last = decode(tiny_model, tgt[:, :3], enc, last_only=True).fused_log_probs()
    np.testing.assert_allclose(full[:, :3], short, atol=1e-5)
    np.testing.assert_allclose(last[:, 0], short[:, -1], atol=1e-6)


def test_padding_does_not_change_outputs(tiny_model):
    src = random_ids(RNG, (1, 4), 11)
    padded = np.concatenate([src, np.zeros((1, 3), dtype=np.int64)], axis=1)
    tgt = random_ids(RNG, (1, 3), 11)
    with no_grad():
        a = decode(tiny_model, tgt, encode(tiny_model, src)).fused_log_probs()
        b = decode(tiny_model, tgt, encode(tiny_model, padded)).fused_log_probs()
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_out_of_range_ids(tiny_model):
    with pytest.raises(VocabError):
        encode(tiny_model, np.array([[4, 11]]))
    with pytest.raises(VocabError):
        decode(tiny_model, np.array([[-1]]), encode(tiny_model, np.array([[4]])))


def test_loss_matches_weighted_group_nll(f64):
    model = build_model(tiny_config(), seed=6)
    model.fusion.dec_prob_weights.data[:] = [0.7, -1.2]
    src = random_ids(RNG, (2, 5), 11)
    tgt = random_ids(RNG, (2, 4), 11)
    tgt[1, 2:] = 0
    with no_grad():
        pred = decode(model, tgt, encode(model, src))
        loss = multi_level_loss(pred, tgt).item()
        smooth = multi_level_loss(pred, tgt, label_smoothing=0.1).item()
    keep = tgt != 0
    psi = pred.psi.data
    want = want_s = 0.0
    for i, lp in enumerate(pred.group_log_probs):
        nll = -np.take_along_axis(lp.data, tgt[..., None], -1)[..., 0]
        want += psi[i] * nll[keep].mean()
        want_s += psi[i] * (0.9 * nll - 0.1 * lp.data.mean(-1))[keep].mean()
    assert abs(loss - want) < 1e-12 and abs(smooth - want_s) < 1e-12


def test_baseline_has_single_group_and_final_norms():
    post = build_model(tiny_config(fusion=False))
    pre = build_model(tiny_config(fusion=False, norm_style="pre"))
    assert post.fusion is None and post.enc_final_ln is None
    assert pre.enc_final_ln is not None and pre.dec_final_ln is not None
    with no_grad():
        pred = decode(pre, np.array([[1, 5]]), encode(pre, np.array([[5, 6, 2]])))
    assert pred.psi.data.tolist() == [1.0] and len(pred.group_log_probs) == 1


def test_pruned_encoder_uses_kept_groups(f64):
    model = build_model(tiny_config(enc_layers=4, enc_group=2), seed=7)
    model.fusion.enc_weights.data[:] = [0.3, -0.4]
    src = random_ids(RNG, (1, 5), 11)
    with no_grad():
        full = encode(model, src)
        part = encode(model, src, encoder_keep=2)
    assert len(part.states) == 2
    np.testing.assert_allclose(part.states[1].data, full.states[1].data)
    f = model.fusion
    want = oracles.encoder_fuse([s.data for s in part.states], [0.3], 2, f.ln.gamma.data, f.ln.beta.data)
    np.testing.assert_allclose(part.fused.data, want, atol=1e-12)


def test_decoder_group_range_renormalizes(f64):
    model = build_model(tiny_config(dec_layers=6, dec_group=2), seed=8)
    model.fusion.dec_prob_weights.data[:] = [0.5, 1.0, -2.0]
    src = random_ids(RNG, (1, 4), 11)
    tgt = random_ids(RNG, (1, 3), 11)
    with no_grad():
        enc = encode(model, src)
        full = decode(model, tgt, enc)
        sub = decode(model, tgt, enc, decoder_groups=(2, 3))
        low = decode(model, tgt, enc, decoder_groups=(1, 1))
    np.testing.assert_allclose(sub.psi.data, oracles.psi([1.0, -2.0], model.fusion.tau), atol=1e-12)
    np.testing.assert_allclose(sub.group_log_probs[0].data, full.group_log_probs[1].data)
    assert low.psi.data.tolist() == [1.0]
    np.testing.assert_allclose(low.group_log_probs[0].data, full.group_log_probs[0].data, atol=1e-12)


def test_dropout_context_changes_training_forward(tiny_model):
    model = build_model(tiny_config(dropout=0.3), seed=1)
    src = random_ids(RNG, (2, 5), 11)
    ctx = ForwardContext(0.3, np.random.default_rng(0))
    with no_grad():
        a = encode(model, src).fused.data
        b = encode(model, src, ctx).fused.data
    assert not np.allclose(a, b)


def test_every_parameter_receives_gradient(tiny_model):
    src = random_ids(RNG, (2, 5), 11)
    tgt = random_ids(RNG, (2, 4), 11)
    with Tape():
        loss = multi_level_loss(decode(tiny_model, tgt, encode(tiny_model, src)), tgt)
    backward(loss)
    for name, p in tiny_model.named_parameters().items():
        if name.endswith("k_b"):
            continue  # key bias shifts every score in a row equally: zero gradient
        assert np.any(p.grad != 0), name
