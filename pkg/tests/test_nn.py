import numpy as np
import pytest

from agpis import autograd as ag
from agpis import nn
from agpis.autograd import Tensor

D, H = 8, 2


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def weights(rng, *prefixes, ffn=()):
    w = {}
    for p in prefixes:
        w.update(nn.init_attention(rng, p, D))
    for p in ffn:
        w.update(nn.init_pffn(rng, p, D))
    # larger weights so the tests see non-trivial attention patterns
    return {k: Tensor(v * 20 if v.ndim == 2 else v, requires_grad=True) for k, v in w.items()}


def test_attention_config_contract():
    assert nn.AttentionConfig(64, 4).head_dim == 16
    with pytest.raises(ValueError):
        nn.AttentionConfig(10, 4)
    with pytest.raises(ValueError):
        nn.AttentionConfig(8, 2, causal=True, cross=True)


# -- embeddings --------------------------------------------------------------------
def test_embed_rows_and_scatter(rng):
    table = Tensor(rng.normal(size=(6, D)), requires_grad=True)
    np.testing.assert_array_equal(nn.embed([0], table).data, table.data[:1])
    ag.backward(nn.embed([3, 3], table).sum())
    np.testing.assert_array_equal(table.grad[3], np.full(D, 2.0))
    assert table.grad[[0, 1, 2, 4, 5]].sum() == 0


def test_embed_matches_one_hot_matmul(rng):
    table = Tensor(rng.normal(size=(6, D)))
    ids = [5, 0, 2, 2]
    one_hot = np.eye(6)[ids]
    assert np.abs(nn.embed(ids, table).data - one_hot @ table.data).max() < 1e-12


def test_embed_out_of_range():
    with pytest.raises(IndexError):
        nn.embed([6], Tensor(np.zeros((6, D))))


def test_add_positions(rng):
    x = Tensor(rng.normal(size=(3, D)))
    pos = Tensor(rng.normal(size=(5, D)))
    np.testing.assert_array_equal(nn.add_positions(x, Tensor(np.zeros((5, D)))).data, x.data)
    np.testing.assert_array_equal(nn.add_positions(Tensor(np.zeros((3, D))), pos).data, pos.data[:3])
    shifted = nn.add_positions(Tensor(x.data[[1, 2, 0]]), pos).data
    assert not np.allclose(shifted, nn.add_positions(x, pos).data[[1, 2, 0]])
    with pytest.raises(nn.CapacityError):
        nn.add_positions(Tensor(np.zeros((6, D))), pos)


# -- attention ---------------------------------------------------------------------
def test_single_key_weight_is_one(rng):
    w = weights(rng, "a.")
    q = Tensor(rng.normal(size=(4, D)))
    kv = Tensor(rng.normal(size=(1, D)))
    cfg = nn.AttentionConfig(D, H, cross=True)
    out, attn = nn.attention_core(q, kv, w, "a.", cfg, return_weights=True)
    np.testing.assert_array_equal(attn.data, 1.0)
    v = kv.data @ w["a.wv"].data + w["a.bv"].data
    np.testing.assert_allclose(out.data, np.repeat(v @ w["a.wo"].data + w["a.bo"].data, 4, axis=0), atol=1e-12)


def test_identical_keys_uniform(rng):
    w = weights(rng, "a.")
    kv = Tensor(np.tile(rng.normal(size=(1, D)), (5, 1)))
    _, attn = nn.attention_core(Tensor(rng.normal(size=(3, D))), kv, w, "a.",
                                nn.AttentionConfig(D, H, cross=True), return_weights=True)
    np.testing.assert_allclose(attn.data, 0.2, atol=1e-15)


def test_attention_weights_are_distributions(rng):
    w = weights(rng, "a.")
    x = Tensor(rng.normal(size=(2, 6, D)))
    for causal in (False, True):
        _, attn = nn.attention_core(x, x, w, "a.", nn.AttentionConfig(D, H, causal=causal), return_weights=True)
        np.testing.assert_allclose(attn.data.sum(-1), 1.0, atol=1e-9)
        if causal:
            assert np.abs(np.triu(attn.data, k=1)).max() < 1e-300


def test_causal_perturbation(rng):
    w = weights(rng, "a.")
    cfg = nn.AttentionConfig(D, H, causal=True)
    x = rng.normal(size=(7, D))
    xt = Tensor(x)
    base = nn.attention(xt, xt, w, "a.", cfg).data
    for j in range(1, 7):
        x2 = x.copy()
        x2[j] = 0.0
        t2 = Tensor(x2)
        out = nn.attention(t2, t2, w, "a.", cfg).data
        assert np.abs(out[:j] - base[:j]).max() < 1e-12
        assert np.abs(out[j:] - base[j:]).max() > 1e-6


def test_cross_attention_sensitive_to_memory(rng):
    w = weights(rng, "c.")
    cfg = nn.AttentionConfig(D, H, cross=True)
    q = Tensor(rng.normal(size=(3, D)))
    m = rng.normal(size=(4, D))
    a = nn.attention(q, Tensor(m), w, "c.", cfg).data
    m[2] += 1.0
    b = nn.attention(q, Tensor(m), w, "c.", cfg).data
    assert np.abs(a - b).max() > 1e-6


def test_self_attention_requires_same_tensor(rng):
    w = weights(rng, "a.")
    with pytest.raises(ValueError):
        nn.attention(Tensor(np.zeros((2, D))), Tensor(np.zeros((2, D))), w, "a.", nn.AttentionConfig(D, H))


def test_attention_grad_check(rng):
    w = weights(rng, "a.")
    cfg = nn.AttentionConfig(D, H, causal=True)
    probe = Tensor(rng.normal(size=(2, 4, D)))
    assert ag.grad_check(lambda x: (nn.attention(x, x, w, "a.", cfg) * probe).sum(),
                         rng.uniform(-1, 1, (2, 4, D))) < 1e-6


# -- feed-forward ------------------------------------------------------------------
def test_pffn_zero_weights_is_layer_norm(rng):
    w = {k: Tensor(np.zeros_like(v) if not k.endswith("ln_g") else v) for k, v in nn.init_pffn(rng, "f.", D).items()}
    x = Tensor(rng.normal(size=(3, D)))
    ref = ag.layer_norm(x, w["f.ln_g"], w["f.ln_b"]).data
    np.testing.assert_allclose(nn.pffn(x, w, "f.").data, ref, atol=1e-15)


def test_pffn_permutation_equivariant(rng):
    w = weights(rng, ffn=["f."])
    x = rng.normal(size=(5, D))
    perm = [4, 2, 0, 1, 3]
    a = nn.pffn(Tensor(x), w, "f.").data[perm]
    b = nn.pffn(Tensor(x[perm]), w, "f.").data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_pffn_grad_check(rng):
    w = weights(rng, ffn=["f."])
    probe = Tensor(rng.normal(size=(3, D)))
    assert ag.grad_check(lambda x: (nn.pffn(x, w, "f.") * probe).sum(), rng.uniform(-1, 1, (3, D))) < 1e-6


def test_pre_norm_differs_from_post_norm(rng):
    w = weights(rng, "e.attn.", ffn=["e.ffn."])
    x = Tensor(rng.normal(size=(4, D)))
    post = nn.encoder_block(x, w, "e.", nn.AttentionConfig(D, H)).data
    pre = nn.encoder_block(x, w, "e.", nn.AttentionConfig(D, H, pre_norm=True)).data
    assert np.abs(post - pre).max() > 1e-3
    # post-norm output rows are normalised
    np.testing.assert_allclose(post.mean(-1), 0.0, atol=1e-12)


def test_decoder_block_without_memory(rng):
    w = weights(rng, "d.self.", ffn=["d.ffn."])
    x = Tensor(rng.normal(size=(2, 3, D)))
    assert nn.decoder_block(x, None, w, "d.", nn.AttentionConfig(D, H)).shape == (2, 3, D)


# -- heads ---------------------------------------------------------------------------
def test_linear_head(rng):
    b0 = rng.normal(size=3)
    out = nn.linear_head(Tensor(rng.normal(size=D)), Tensor(np.zeros((D, 3))), Tensor(b0))
    np.testing.assert_array_equal(out.data, b0)
    p = ag.sigmoid(nn.linear_head(Tensor(rng.normal(size=D)), Tensor(rng.normal(size=(D, 1))),
                                  Tensor(np.zeros(1)))).data
    assert 0 < p[0] < 1
    W, b = Tensor(rng.normal(size=(D, 3))), Tensor(b0)
    assert ag.grad_check(lambda x: (nn.linear_head(x, W, b) ** 2).sum(), rng.uniform(-1, 1, D)) < 1e-8
