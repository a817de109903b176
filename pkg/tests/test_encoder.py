import math

import numpy as np
import pytest

from rmrouter import autodiff as ad
from rmrouter.autodiff import Tensor
from rmrouter.encoder import (
    PAD,
    SEP,
    UNK,
    EncoderConfig,
    Vocab,
    attention_probs,
    build_vocab,
    count_backbone_params,
    encode,
    encode_batch,
    init_weights,
    pad_batch,
    reward_head,
    tokenize,
    weight_shapes,
)


def reference_forward(ids, mask, w, cfg):
    """Plain float64 numpy post-LN encoder; returns (B, T, H)."""
    W = {k: v.data.astype(np.float64) for k, v in w.items()}
    b, t = ids.shape
    nh, dh = cfg.num_heads, cfg.hidden_dim // cfg.num_heads

    def ln(x, name):
        mu = x.mean(-1, keepdims=True)
        var = ((x - mu) ** 2).mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(var + 1e-5) * W[f"{name}.gain"] + W[f"{name}.bias"]

    def lin(x, name):
        return x @ W[f"{name}.weight"] + W[f"{name}.bias"]

    def gelu(x):
        return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))

    x = ln(W["embed.token"][ids] + W["embed.position"][:t], "embed.norm")
    for i in range(cfg.num_layers):
        p = f"layer.{i}"
        q, k, v = (lin(x, f"{p}.attn.{n}").reshape(b, t, nh, dh).transpose(0, 2, 1, 3) for n in ("query", "key", "value"))
        s = q @ k.transpose(0, 1, 3, 2) / math.sqrt(dh)
        s = np.where(mask[:, None, None, :], s, -1e9)
        a = np.exp(s - s.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        ctx = (a @ v).transpose(0, 2, 1, 3).reshape(b, t, -1)
        x = ln(x + lin(ctx, f"{p}.attn.dense"), f"{p}.attn.norm")
        x = ln(x + lin(gelu(lin(x, f"{p}.ffn.intermediate")), f"{p}.ffn.output"), f"{p}.ffn.norm")
    return x


class TestVocab:
    def test_reserved_ids(self):
        v = build_vocab(["a b"], 10)
        assert (PAD, UNK, SEP) == (0, 1, 2)
        assert v.id("zzz") == UNK

    def test_frequency_then_lexical_order(self):
        v = build_vocab(["b a c", "c b", "c"], 10)
        assert [v.id(t) for t in ("c", "b", "a")] == [3, 4, 5]

    def test_max_size_truncates(self):
        v = build_vocab(["a b c d e f"], 5)
        assert len(v) == 5

    def test_empty_corpus(self):
        with pytest.raises(ValueError):
            build_vocab([], 10)

    def test_roundtrip(self, tmp_path):
        v = build_vocab(["x y z x"], 10)
        v.save(tmp_path / "v.json")
        assert Vocab.load(tmp_path / "v.json").tokens == v.tokens


class TestTokenize:
    def test_layout_and_spans(self):
        v = build_vocab(["p1 p2 r1"], 10)
        seq = tokenize("p1  p2", "r1", v, 16)
        assert seq.ids[2] == SEP and len(seq.ids) == 4
        assert seq.spans == [("prompt", 0, 2), ("prompt", 4, 6), ("sep", 0, 0), ("response", 0, 2)]

    def test_right_truncation(self):
        v = build_vocab(["a"], 10)
        seq = tokenize("a a a", "a a a a a", v, 5)
        assert len(seq.ids) == 5 and all(seq.mask)

    def test_pad_batch(self):
        v = build_vocab(["a b"], 10)
        ids, mask = pad_batch([tokenize("a", "b", v, 8), tokenize("a b a", "b", v, 8)])
        assert ids.shape == (2, 5)
        assert ids[0, 3] == PAD and not mask[0, 3]
        assert mask[1].all()


class TestWeights:
    def test_param_count_matches_brute_force(self):
        cfg = EncoderConfig()
        w = init_weights(cfg, 0, head=False)
        assert count_backbone_params(cfg) == sum(t.size for t in w.values())

    def test_param_count_closed_form(self):
        c = EncoderConfig(vocab_size=100, max_sequence_length=20, hidden_dim=16, num_layers=3, num_heads=4, ffn_dim=32)
        h, f = c.hidden_dim, c.ffn_dim
        per_layer = 4 * (h * h + h) + (h * f + f) + (f * h + h) + 4 * h
        assert count_backbone_params(c) == (c.vocab_size + c.max_sequence_length) * h + 2 * h + c.num_layers * per_layer

    def test_head_shapes(self, tiny_config):
        shapes = weight_shapes(tiny_config)
        assert shapes["head.weight"] == (8,) and shapes["head.bias"] == (1,)

    def test_init_is_seeded(self, tiny_config):
        a, b = init_weights(tiny_config, 3), init_weights(tiny_config, 3)
        assert all(np.array_equal(a[k].data, b[k].data) for k in a)
        c = init_weights(tiny_config, 4)
        assert not np.array_equal(a["embed.token"].data, c["embed.token"].data)

    @pytest.mark.parametrize("bad", [dict(hidden_dim=10, num_heads=4), dict(num_layers=0), dict(dropout=1.0)])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            EncoderConfig(**bad)


class TestForward:
    def test_matches_reference(self, tiny_config):
        rng = np.random.default_rng(0)
        w = init_weights(tiny_config, 1)
        for t in w.values():
            t.data = (t.data * 20).astype(np.float32)  # larger weights make the check meaningful
        ids = rng.integers(3, tiny_config.vocab_size, (3, 7))
        mask = np.ones((3, 7), dtype=bool)
        mask[1, 5:] = False
        out = encode_batch(ids, mask, w, tiny_config).data
        ref = reference_forward(ids, mask, w, tiny_config)[:, 0, :]
        np.testing.assert_allclose(out, ref, atol=1e-4)

    def test_padding_does_not_change_output(self, tiny_config):
        w = init_weights(tiny_config, 2)
        ids = np.array([[5, 6, 2, 7]])
        short = encode_batch(ids, np.ones((1, 4), bool), w, tiny_config).data
        padded_ids = np.array([[5, 6, 2, 7, 0, 0]])
        padded_mask = np.array([[1, 1, 1, 1, 0, 0]], bool)
        long = encode_batch(padded_ids, padded_mask, w, tiny_config).data
        np.testing.assert_allclose(short, long, atol=1e-6)

    def test_attention_rows_sum_to_one_and_skip_pads(self, tiny_config):
        w = init_weights(tiny_config, 2)
        ids = np.array([[5, 6, 2, 0]])
        mask = np.array([[1, 1, 1, 0]], bool)
        for layer in attention_probs(ids, mask, w, tiny_config):
            np.testing.assert_allclose(layer.sum(-1), 1.0, atol=1e-6)
            assert np.all(layer[..., 3] == 0.0)

    def test_too_long_sequence(self, tiny_config):
        w = init_weights(tiny_config, 0)
        with pytest.raises(ValueError, match="max_sequence_length"):
            encode_batch(np.ones((1, 13), int), np.ones((1, 13), bool), w, tiny_config)

    def test_dropout_only_in_training(self):
        cfg = EncoderConfig(vocab_size=30, max_sequence_length=8, hidden_dim=8, num_layers=1, num_heads=2, ffn_dim=8, dropout=0.5)
        w = init_weights(cfg, 0)
        v = build_vocab(["a b c"], 30)
        seq = tokenize("a b", "c", v, 8)
        e1, e2 = encode(seq, w, cfg).data, encode(seq, w, cfg).data
        np.testing.assert_array_equal(e1, e2)
        t = encode(seq, w, cfg, train=True, rng=np.random.default_rng(0)).data
        assert not np.allclose(t, e1)

    def test_reward_head_scalar_and_shape_error(self, tiny_config):
        w = init_weights(tiny_config, 0)
        assert reward_head(Tensor(np.ones(8, np.float32)), w).shape == ()
        with pytest.raises(ad.ShapeError):
            reward_head(Tensor(np.ones(5, np.float32)), w)


def test_encoder_gradients(tiny_config):
    w = init_weights(tiny_config, 5)
    for t in w.values():
        t.data = (t.data * 10).astype(np.float32)
    ids = np.array([[4, 9, 2, 11, 0], [7, 2, 3, 8, 6]])
    mask = np.array([[1, 1, 1, 1, 0], [1, 1, 1, 1, 1]], bool)
    leaves = {k: w[k] for k in ("layer.0.attn.query.weight", "layer.1.ffn.intermediate.weight", "embed.norm.gain", "head.weight")}

    def fn():
        return (reward_head(encode_batch(ids, mask, w, tiny_config), w) * Tensor(np.array([1.0, -0.5], np.float32))).sum()

    errs = ad.check_gradients(fn, leaves)
    assert max(errs.values()) <= 2e-2, errs
