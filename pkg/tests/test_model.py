import math

import numpy as np
import pytest

from agpis import autograd as ag
from agpis import model as M
from agpis import nn, vocab
from agpis import ruleworld as rw
from agpis import training as T
from agpis.autograd import Tensor
from agpis.checks import grad_check_suite

TINY = M.TINY_CONFIG


def random_batch(cfg, rng, b=3, training=True):
    images = rng.random((b, cfg.seq_len, cfg.image_size, cfg.image_size, 3))
    inputs = [M.decoder_input(rng.integers(4, 40, size=2 + i % 3).tolist(),
                              rng.integers(4, 40, size=1 + i % 2).tolist() if training else None, cfg)
              for i in range(b)]
    return M.make_batch(images, inputs, rng.integers(0, cfg.num_classes, size=b))


@pytest.fixture(scope="module")
def desk():
    return M.MuiscModel.create(M.config_replace(M.DESK_CONFIG, dropout=0.0), seed=3)


# -- config --------------------------------------------------------------------
def test_config_contract():
    with pytest.raises(ValueError):
        M.MuiscConfig(image_size=30, patch_size=8)
    with pytest.raises(ValueError):
        M.MuiscConfig(lambda_nlg=0.0)
    with pytest.raises(ValueError):
        M.MuiscConfig(cross_attention_blocks=(True,))
    assert M.DESK_CONFIG.num_patches == 16 and M.PAPER_CONFIG.tokens_per_image == 197


def test_config_items_roundtrip():
    cfg = M.config_replace(M.DESK_CONFIG, cross_attention_blocks=(True, False), pre_norm=True, lambda_nlg=0.25)
    assert M.MuiscConfig.from_items(dict(cfg.to_items())) == cfg
    with pytest.raises(ValueError):
        M.MuiscConfig.from_items({"bogus": "1"})


def test_default_loss_weights():
    assert (M.DESK_CONFIG.lambda_nlg, M.DESK_CONFIG.lambda_mcc) == (0.1, 1.0)


# -- encoder and fusion ----------------------------------------------------------
def test_encode_image_rows(desk):
    img = np.random.default_rng(0).random((32, 32, 3))
    f = M.encode_image(img, desk.params, desk.cfg)
    assert f.shape == (17, 64)
    np.testing.assert_array_equal(f.data, M.encode_image(img.copy(), desk.params, desk.cfg).data)


def test_encode_image_shape_error(desk):
    with pytest.raises(ag.ShapeError):
        M.encode_image(np.zeros((16, 16, 3)), desk.params, desk.cfg)


def test_fuse_sequence_shape_and_order(desk):
    rng = np.random.default_rng(1)
    feats = [M.encode_image(rng.random((32, 32, 3)), desk.params, desk.cfg) for _ in range(3)]
    fe = M.fuse_sequence(feats, desk.params, desk.cfg)
    assert fe.shape == (51, 64)
    swapped = M.fuse_sequence([feats[0], feats[2], feats[1]], desk.params, desk.cfg)
    assert np.abs(fe.data - swapped.data).max() > 1e-6
    with pytest.raises(ValueError):
        M.fuse_sequence(feats[:2], desk.params, desk.cfg)


def test_no_fusion_blocks_is_concatenation():
    cfg = M.config_replace(TINY, fusion_blocks=0)
    model = M.MuiscModel.create(cfg, seed=0)
    rng = np.random.default_rng(2)
    feats = [M.encode_image(rng.random((8, 8, 3)), model.params, cfg) for _ in range(cfg.seq_len)]
    fe = M.fuse_sequence(feats, model.params, cfg)
    idx = np.repeat(np.arange(cfg.seq_len), cfg.tokens_per_image)
    ref = np.concatenate([f.data for f in feats]) + model.params["img_index"].data[idx]
    np.testing.assert_array_equal(fe.data, ref)


# -- decoder ------------------------------------------------------------------------
def test_decoder_input_layout():
    din = M.decoder_input([10, 11], [4], M.DESK_CONFIG)
    assert din.tokens == (10, 11, vocab.SEP_ID, 4, vocab.EOT_ID) and din.sep_pos == 2 and din.feedback == (4,)
    assert din.tokens.count(vocab.SEP_ID) == 1
    inf = M.decoder_input([10, 11], None, M.DESK_CONFIG)
    assert inf.tokens == (10, 11, vocab.SEP_ID) and not inf.training
    no_title = M.decoder_input([10, 11], None, M.config_replace(M.DESK_CONFIG, title_input=False))
    assert no_title.tokens == (vocab.SEP_ID,) and no_title.sep_pos == 0


def test_decoder_capacity():
    with pytest.raises(nn.CapacityError):
        M.decoder_input([5] * 40, None, M.DESK_CONFIG)


def test_causality_of_hidden_states(desk):
    rng = np.random.default_rng(4)
    imgs = rng.random((1, 3, 32, 32, 3))
    toks = rng.integers(4, 40, size=10).tolist()
    base = M.forward(desk, M.make_batch(imgs, [M.DecoderInput(tuple(toks), 3)])).hidden.data[0]
    for q in range(9):
        alt = toks[: q + 1] + rng.integers(4, 40, size=9 - q).tolist()
        h = M.forward(desk, M.make_batch(imgs, [M.DecoderInput(tuple(alt), 3)])).hidden.data[0]
        assert np.abs(h[: q + 1] - base[: q + 1]).max() < 1e-12


def test_class_logits_depend_on_features(desk):
    rng = np.random.default_rng(5)
    imgs = rng.random((1, 3, 32, 32, 3))
    batch = M.make_batch(imgs, [M.decoder_input([5, 6], None, desk.cfg)])
    a = M.forward(desk, batch).class_logits.data
    imgs2 = imgs.copy()
    imgs2[0, 1] = rng.random((32, 32, 3))
    b = M.forward(desk, M.make_batch(imgs2, [M.decoder_input([5, 6], None, desk.cfg)])).class_logits.data
    assert np.abs(a - b).max() > 1e-9


def test_title_conditioning():
    rng = np.random.default_rng(6)
    imgs = rng.random((1, 3, 32, 32, 3))
    for flag in (True, False):
        cfg = M.config_replace(M.DESK_CONFIG, title_input=flag)
        model = M.MuiscModel.create(cfg, seed=1)
        a = M.predict(model, imgs[0], [20, 21, 22])[1]
        b = M.predict(model, imgs[0], [30, 21, 22])[1]
        if flag:
            assert np.abs(a - b).max() > 1e-9
        else:
            np.testing.assert_array_equal(a, b)


def test_no_decoder_uses_pooled_features():
    cfg = M.config_replace(TINY, use_decoder=False)
    model = M.MuiscModel.create(cfg, seed=2)
    assert "tok_emb" not in model.params
    batch = random_batch(cfg, np.random.default_rng(7))
    out = M.forward(model, batch)
    flat = batch.images.reshape(-1, 8, 8, 3)
    fe = M.fuse_sequence(M.encode_images(flat, model.params, cfg), model.params, cfg).data
    ref = fe.mean(axis=1) @ model.params["mcc.w"].data + model.params["mcc.b"].data
    np.testing.assert_allclose(out.class_logits.data, ref, atol=1e-12)
    assert out.lm_logits is None


def test_cross_attention_mask_config():
    cfg = M.config_replace(M.DESK_CONFIG, cross_attention_blocks=(False, True))
    shapes = M.param_shapes(cfg)
    assert "dec.0.cross.wq" not in shapes and "dec.1.cross.wq" in shapes


# -- losses ---------------------------------------------------------------------------
def zero_heads(model):
    for k in ("lm.w", "lm.b", "mcc.w", "mcc.b"):
        model.params[k].data[...] = 0.0


def test_uniform_losses():
    model = M.MuiscModel.create(TINY, seed=0)
    zero_heads(model)
    rng = np.random.default_rng(8)
    batch = M.make_batch(rng.random((2, 2, 8, 8, 3)),
                         [M.decoder_input([5], [vocab.TOKEN_ID["yes"]], TINY)] * 2, [0, 3])
    out = M.forward(model, batch)
    assert M.loss_nlg(out, batch).item() == pytest.approx(math.log(64), abs=1e-12)
    assert M.loss_mcc(out, batch.labels).item() == pytest.approx(math.log(6), abs=1e-12)
    assert M.loss_total(Tensor(4.1589), Tensor(1.7918), TINY).item() == pytest.approx(2.2077, abs=5e-5)
    c45 = Tensor(np.zeros((1, 45)))
    assert M.loss_mcc(M.MuiscOutput(c45), [44]).item() == pytest.approx(3.8067, abs=1e-4)


def test_teacher_forcing_is_sum_of_conditionals():
    model = M.MuiscModel.create(TINY, seed=1)
    rng = np.random.default_rng(9)
    din = M.decoder_input([7, 8], [20, 21], TINY)
    batch = M.make_batch(rng.random((1, 2, 8, 8, 3)), [din], [1])
    out = M.forward(model, batch)
    logp = ag.log_softmax(out.lm_logits).data[0]
    s = din.sep_pos
    ref = -(logp[s, 20] + logp[s + 1, 21])
    assert M.loss_nlg(out, batch).item() == pytest.approx(ref, abs=1e-12)


def test_qualified_nlg_is_single_term():
    model = M.MuiscModel.create(TINY, seed=1)
    din = M.decoder_input([7], [vocab.TOKEN_ID["yes"]], TINY)
    batch = M.make_batch(np.random.default_rng(1).random((1, 2, 8, 8, 3)), [din], [0])
    out = M.forward(model, batch)
    logp = ag.log_softmax(out.lm_logits).data[0]
    assert M.loss_nlg(out, batch).item() == pytest.approx(-logp[din.sep_pos, vocab.TOKEN_ID["yes"]], abs=1e-12)


def test_nlg_loss_rejects_inference_inputs():
    model = M.MuiscModel.create(TINY, seed=1)
    batch = random_batch(TINY, np.random.default_rng(10), training=False)
    with pytest.raises(ValueError):
        M.loss_nlg(M.forward(model, batch), batch)


def test_mcc_label_out_of_range():
    with pytest.raises(IndexError):
        M.loss_mcc(M.MuiscOutput(Tensor(np.zeros((1, 6)))), [6])


def test_nlg_masking_prefix_invariance():
    """The loss term of feedback token q ignores feedback tokens after q."""
    model = M.MuiscModel.create(TINY, seed=2)
    rng = np.random.default_rng(11)
    imgs = rng.random((1, 2, 8, 8, 3))

    def first_term(fb):
        din = M.decoder_input([7], fb, TINY)
        out = M.forward(model, M.make_batch(imgs, [din], [0]))
        return ag.log_softmax(out.lm_logits).data[0, din.sep_pos, fb[0]]
    assert first_term([20, 21, 22]) == first_term([20, 30, 31])


def test_loss_identity_and_flags():
    rng = np.random.default_rng(12)
    model = M.MuiscModel.create(TINY, seed=3)
    batch = random_batch(TINY, rng)
    total, parts, out = M.batch_loss(model, batch)
    assert abs(total.item() - (0.1 * parts["nlg"] + 1.0 * parts["mcc"])) < 1e-12
    off = M.MuiscModel(M.config_replace(TINY, nlg_task=False), model.params)
    total_off, parts_off, _ = M.batch_loss(off, batch)
    assert total_off.item() == parts_off["mcc"]


def test_initial_loss_estimate():
    ds = rw.generate_dataset(16, seed=1)
    model = M.MuiscModel.create(M.DESK_CONFIG, seed=0)
    batch = T.prepare(ds.records, M.DESK_CONFIG).batch(range(16))
    with ag.no_grad():
        total = M.batch_loss(model, batch)[0].item()
    expected = math.log(64) * 0.1 + math.log(6)
    assert abs(total - expected) < 0.2 * expected


# -- prediction ----------------------------------------------------------------------
def test_predict_distribution_and_determinism(desk):
    imgs = np.random.default_rng(13).random((3, 32, 32, 3))
    p_t, p = M.predict(desk, imgs, [20, 21])
    assert abs(p.sum() - 1.0) < 1e-9 and 0 <= p_t <= 1 and p_t == p[0]
    assert M.predict(desk, imgs, [20, 21])[0] == p_t


def test_tiny_gradient_check():
    res = grad_check_suite(seed=1)
    assert max(res.values()) < 1e-4, res


def test_overfit_single_qualified_sample():
    rec = next(r for r in rw.generate_dataset(20, seed=2).records if r.label == 0)
    cfg = M.config_replace(M.DESK_CONFIG, dropout=0.0)
    res = T.train(cfg, [rec], epochs=400, batch_size=1, seed=0, lr=1e-3, max_steps=200)
    p_t, _ = M.predict(res.model, rec.images, rec.title)
    assert p_t > 0.99
    assert vocab.decode(M.greedy_feedback(res.model, rec.images, rec.title)) == ["yes"]


def test_full_size_config_param_shapes():
    shapes = M.param_shapes(M.PAPER_CONFIG)
    assert shapes["patch.w"] == (16 * 16 * 3, 768) and shapes["enc_pos"] == (197, 768)
    assert shapes["mcc.w"] == (768, 45)
    assert sum(1 for k in shapes if k.startswith("dec.") and k.endswith("self.wq")) == 3
