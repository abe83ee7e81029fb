"""Finite-difference gradient checks over every building block and the full loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autograd as ag
from . import model as M
from . import nn
from .autograd import Tensor

GRAD_TOL = 1e-4


def _params(raw: dict[str, np.ndarray], rng: np.random.Generator) -> dict[str, Tensor]:
    # jitter norm gains/biases so they are not at their symmetric init
    out = {}
    for k, v in raw.items():
        if k.endswith("ln_g"):
            v = v + 0.1 * rng.standard_normal(v.shape)
        elif k.endswith("ln_b") or k.rsplit(".", 1)[-1].startswith("b"):
            v = v + 0.1 * rng.standard_normal(v.shape)
        out[k] = Tensor(v, requires_grad=True)
    return out


def _probe(shape, rng) -> np.ndarray:
    return rng.standard_normal(shape)


def _block_checks(rng: np.random.Generator, d: int = 8, heads: int = 2, n: int = 4, m: int = 5
                  ) -> dict[str, tuple[Callable[[Tensor], Tensor], np.ndarray, list[Tensor]]]:
    """name -> (f(x) -> scalar, x0, parameters reached by f)."""
    w = _params({**nn.init_attention(rng, "sa.", d), **nn.init_attention(rng, "ca.", d),
                 **nn.init_pffn(rng, "ff.", d, 2),
                 **nn.init_attention(rng, "enc.attn.", d), **nn.init_pffn(rng, "enc.ffn.", d, 2),
                 **nn.init_attention(rng, "dec.self.", d), **nn.init_attention(rng, "dec.cross.", d),
                 **nn.init_pffn(rng, "dec.ffn.", d, 2)}, rng)
    memory = Tensor(rng.standard_normal((2, m, d)))
    x0 = rng.standard_normal((2, n, d))
    probe = _probe((2, n, d), rng)
    plain = nn.AttentionConfig(d, heads)
    causal = nn.AttentionConfig(d, heads, causal=True)
    cross = nn.AttentionConfig(d, heads, cross=True)
    pre = nn.AttentionConfig(d, heads, pre_norm=True)
    g = Tensor(1.0 + 0.1 * rng.standard_normal(d), requires_grad=True)
    b = Tensor(0.1 * rng.standard_normal(d), requires_grad=True)

    def sel(prefix):
        return [t for k, t in w.items() if k.startswith(prefix)]

    def scal(y):
        return (y * probe).sum()

    return {
        "layer_norm": (lambda x: scal(ag.layer_norm(x, g, b)), x0, [g, b]),
        "softmax": (lambda x: scal(ag.softmax(x)), x0, []),
        "log_softmax": (lambda x: scal(ag.log_softmax(x)), x0, []),
        "gelu": (lambda x: scal(ag.gelu(x)), x0, []),
        "self_attention": (lambda x: scal(nn.attention(x, x, w, "sa.", plain)), x0, sel("sa.")),
        "causal_self_attention": (lambda x: scal(nn.attention(x, x, w, "sa.", causal)), x0, sel("sa.")),
        "cross_attention": (lambda x: scal(nn.attention(x, memory, w, "ca.", cross)), x0, sel("ca.")),
        "cross_attention_memory": (lambda mm: scal(nn.attention(Tensor(x0), mm, w, "ca.", cross)),
                                   memory.data, []),
        "pffn": (lambda x: scal(nn.pffn(x, w, "ff.")), x0, sel("ff.")),
        "pffn_pre_norm": (lambda x: scal(nn.pffn(x, w, "ff.", pre_norm=True)), x0, sel("ff.")),
        "encoder_block": (lambda x: scal(nn.encoder_block(x, w, "enc.", plain)), x0, sel("enc.")),
        "encoder_block_pre_norm": (lambda x: scal(nn.encoder_block(x, w, "enc.", pre)), x0, sel("enc.")),
        "decoder_block": (lambda x: scal(nn.decoder_block(x, memory, w, "dec.", plain)), x0, sel("dec.")),
    }


def _tiny_batch(cfg: M.MuiscConfig, rng: np.random.Generator, b: int = 2) -> M.Batch:
    images = rng.random((b, cfg.seq_len, cfg.image_size, cfg.image_size, 3))
    inputs = []
    for i in range(b):
        title = rng.integers(4, 30, size=2 + i).tolist()
        fb = rng.integers(4, 30, size=1 + i).tolist()
        inputs.append(M.decoder_input(title, fb, cfg))
    return M.make_batch(images, inputs, rng.integers(0, cfg.num_classes, size=b))


def grad_check_suite(seed: int = 0, cfg: M.MuiscConfig = M.TINY_CONFIG, h: float = 1e-5,
                     max_coords: int | None = 12) -> dict[str, float]:
    """Max relative error per check (inputs and parameters), all in float64."""
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}
    for name, (f, x0, params) in _block_checks(rng).items():
        err = ag.grad_check(f, x0, h)
        if params:
            xt = Tensor(x0)
            err = max(err, ag.parameters_grad_check(lambda: f(xt), params, h, max_coords, rng))
        results[name] = err

    cfg = M.config_replace(cfg, dropout=0.0)
    model = M.MuiscModel(cfg, _params({k: v.data for k, v in M.init_params(cfg, seed).items()}, rng))
    batch = _tiny_batch(cfg, rng)
    results["patch_encoder"] = ag.parameters_grad_check(
        lambda: (M.encode_images(batch.images.reshape(-1, *batch.images.shape[2:]), model.params, cfg)
                 * Tensor(_probe((batch.images.shape[0] * cfg.seq_len, cfg.tokens_per_image, cfg.dim),
                                 np.random.default_rng(seed + 1)))).sum(),
        [t for k, t in model.params.items() if k.split(".")[0] in ("patch", "cls", "enc_pos", "enc")],
        h, max_coords, rng)
    results["muisc_loss"] = ag.parameters_grad_check(lambda: M.batch_loss(model, batch)[0],
                                                     list(model.params.values()), h, max_coords, rng)
    return results
