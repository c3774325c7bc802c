import math

import numpy as np
import pytest
import torch

from laqlab import model as M
from laqlab.corpus import make_corpus, reasoning_spec
from laqlab.quant import PROJECTIONS, QuantSpec, init_from_weights

from conftest import MICRO


def naive_block(block, h):
    """Per-head, per-position reference for one block (no einsum, explicit loops)."""
    cfg = block.cfg
    B, T, d = h.shape
    H, Dh = cfg.n_heads, cfg.head_dim

    def rms(x, gain):
        return x / torch.sqrt((x * x).mean(-1, keepdim=True) + M.RMS_EPS) * gain

    def rot(x, pos):
        out = x.clone()
        for i in range(Dh // 2):
            theta = pos / cfg.rope_base ** (2 * i / Dh)
            a, b = x[..., i], x[..., i + Dh // 2]
            out[..., i] = a * math.cos(theta) - b * math.sin(theta)
            out[..., i + Dh // 2] = a * math.sin(theta) + b * math.cos(theta)
        return out

    x = rms(h, block.attn_norm)
    q = (x @ block.q.weight.T).view(B, T, H, Dh)
    k = (x @ block.k.weight.T).view(B, T, H, Dh)
    v = (x @ block.v.weight.T).view(B, T, H, Dh)
    mixed = torch.zeros(B, T, H, Dh)
    for b in range(B):
        for hd in range(H):
            for t in range(T):
                qt = rot(q[b, t, hd], t)
                scores = torch.stack([rot(k[b, s, hd], s) @ qt for s in range(t + 1)]) / math.sqrt(Dh)
                p = torch.softmax(scores, 0)
                mixed[b, t, hd] = sum(p[s] * v[b, s, hd] for s in range(t + 1))
    h_mid = h + mixed.reshape(B, T, d) @ block.o.weight.T
    y = rms(h_mid, block.mlp_norm)
    hid = torch.nn.functional.silu(y @ block.gate.weight.T) * (y @ block.up.weight.T)
    return h_mid + hid @ block.down.weight.T


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        M.ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError, match="positive"):
        M.ModelConfig(n_layers=0)
    with pytest.raises(ValueError, match="even"):
        M.ModelConfig(d_model=12, n_heads=4)


def test_block_matches_naive_reference(micro):
    tokens = torch.tensor([[1, 5, 3, 9, 0, 2]])
    h = micro.embed_tokens(tokens)
    torch.testing.assert_close(micro.blocks[0](h), naive_block(micro.blocks[0], h), rtol=0, atol=1e-12)


def test_forward_shapes_and_token_validation(micro):
    assert micro(torch.zeros(3, 7, dtype=torch.long)).shape == (3, 7, MICRO.vocab)
    assert micro([1, 2, 3]).shape == (1, 3, MICRO.vocab)
    with pytest.raises(ValueError, match="vocabulary"):
        micro(torch.tensor([[MICRO.vocab]]))
    with pytest.raises(ValueError, match="max_seq"):
        micro(torch.zeros(1, MICRO.max_seq + 1, dtype=torch.long))


def test_causal_masking(micro, rng):
    tokens = torch.as_tensor(rng.integers(0, MICRO.vocab, (2, 10)))
    changed = tokens.clone()
    changed[:, 6:] = (changed[:, 6:] + 1) % MICRO.vocab
    a, b = micro(tokens), micro(changed)
    torch.testing.assert_close(a[:, :6], b[:, :6], rtol=0, atol=0)
    assert not torch.allclose(a[:, 6:], b[:, 6:])


def test_kv_cache_decoding_matches_full_forward(micro, rng):
    tokens = torch.as_tensor(rng.integers(0, MICRO.vocab, (2, 9)))
    full = micro(tokens)
    caches = [{} for _ in range(micro.n_layers)]
    steps = [micro.decode_step(tokens[:, :4], caches)]
    for t in range(4, 9):
        steps.append(micro.decode_step(tokens[:, t : t + 1], caches))
    torch.testing.assert_close(torch.cat(steps, 1), full, rtol=0, atol=1e-12)
    assert caches[0]["k"].shape == (2, 9, MICRO.n_heads, MICRO.head_dim)


def test_trace_records_post_rotary_keys(micro, rng):
    tokens = torch.as_tensor(rng.integers(0, MICRO.vocab, (1, 5)))
    logits, tr = M.forward_trace(micro, tokens)
    torch.testing.assert_close(logits, micro(tokens), rtol=0, atol=0)
    k, v = micro.blocks[0].keys_values(tr.layers[0].input)
    torch.testing.assert_close(tr.layers[0].keys, k, rtol=0, atol=0)
    torch.testing.assert_close(tr.layers[0].values, v, rtol=0, atol=0)
    assert set(tr.layers[0].proj) == set(PROJECTIONS)
    torch.testing.assert_close(tr.layers[0].keys[:, 0], tr.layers[0].proj["k"][:, 0].view(1, MICRO.n_heads, -1))
    probs = tr.layers[1].attn_probs
    torch.testing.assert_close(probs.sum(-1), torch.ones(probs.shape[:-1]))
    assert float(probs.triu(1).abs().max()) == 0.0


def test_hidden_at_and_run_layers(micro, rng):
    tokens = torch.as_tensor(rng.integers(0, MICRO.vocab, (1, 6)))
    h0 = micro.hidden_at(tokens, 0)
    torch.testing.assert_close(micro.hidden_at(tokens, 2), micro.run_layers(h0, 0, 2), rtol=0, atol=0)
    torch.testing.assert_close(micro.logits_from_hidden(micro.hidden_at(tokens, 2)), micro(tokens), rtol=0, atol=0)


def test_identity_block():
    m = M.init_teacher(MICRO, seed=1)
    M.identity_block_(m.blocks[1])
    h = torch.randn(1, 4, MICRO.d_model)
    torch.testing.assert_close(m.blocks[1](h), h, rtol=0, atol=0)


def test_swap_and_unswap(micro, rng):
    tokens = torch.as_tensor(rng.integers(0, MICRO.vocab, (1, 6)))
    before = micro(tokens).detach().clone()
    qset = {n: init_from_weights(p.weight, QuantSpec(4, 8)) for n, p in micro.blocks[1].projections().items()}
    student = M.swap_quant_layer(micro, 1, qset)
    assert student.blocks[0] is micro.blocks[0]
    assert student.embed is micro.embed
    assert set(M.quantized_layers(student, 1)) == set(PROJECTIONS)
    assert not M.quantized_layers(micro, 1)
    assert not torch.allclose(student(tokens), before)
    torch.testing.assert_close(micro(tokens), before, rtol=0, atol=0)
    back = M.unswap_quant_layer(student, micro, 1)
    torch.testing.assert_close(back(tokens), before, rtol=0, atol=0)
    with pytest.raises(IndexError):
        M.swap_quant_layer(micro, 5, qset)
    with pytest.raises(ValueError, match="missing"):
        M.swap_quant_layer(micro, 0, {"q": qset["q"]})


def test_init_is_seeded():
    a, b, c = M.init_teacher(MICRO, 4), M.init_teacher(MICRO, 4), M.init_teacher(MICRO, 5)
    assert torch.equal(a.embed, b.embed) and not torch.equal(a.embed, c.embed)


def test_pretraining_reduces_loss_deterministically():
    spec = reasoning_spec(MICRO.vocab)
    runs = [M.pretrain_teacher(M.init_teacher(MICRO, 0), make_corpus(spec), 30, batch_size=4, seq_len=16)[1] for _ in range(2)]
    assert runs[0] == runs[1]
    assert np.mean(runs[0][-5:]) < np.mean(runs[0][:5])
    assert M.pretrain_teacher(M.init_teacher(MICRO, 0), make_corpus(spec), 0)[1] == []
