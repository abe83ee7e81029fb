"""MUIsC: image-sequence encoder, text decoder with cross-attention, two task heads.

Data flow for a batch of B sequences of K images::

    images [B,K,H,W,3] -> patches -> per-image ViT (N_e blocks) -> F_i [B*K, Np+1, D]
    concat per sequence + image-index embedding -> N_s fusion blocks -> F_e [B, K*(Np+1), D]
    title ++ <sep> ++ feedback -> embeddings -> N_d decoder blocks (cross-attend F_e) -> H_d
    H_d -> LM logits (all positions);  H_d[sep] -> class logits -> p_mcc;  p_t = p_mcc[0]
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from . import nn
from . import vocab
from .autograd import Tensor


@dataclass(frozen=True)
class MuiscConfig:
    image_size: int = 32
    patch_size: int = 8
    dim: int = 64
    heads: int = 4
    encoder_blocks: int = 2
    fusion_blocks: int = 1
    decoder_blocks: int = 2
    vocab_size: int = vocab.VOCAB_SIZE
    num_classes: int = 6
    seq_len: int = 3
    max_text_len: int = 32
    lambda_nlg: float = 0.1
    lambda_mcc: float = 1.0
    ffn_expansion: int = 4
    dropout: float = 0.1
    pre_norm: bool = False
    hierarchical_fusion: bool = True
    use_decoder: bool = True
    nlg_task: bool = True
    title_input: bool = True
    cross_attention_blocks: tuple[bool, ...] | None = None  # None: every decoder block
    init_std: float = 0.02

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.lambda_nlg <= 0 or self.lambda_mcc <= 0:
            raise ValueError("loss weights must be positive")
        if self.cross_attention_blocks is not None:
            object.__setattr__(self, "cross_attention_blocks", tuple(bool(b) for b in self.cross_attention_blocks))
            if len(self.cross_attention_blocks) != self.decoder_blocks:
                raise ValueError("cross_attention_blocks needs one flag per decoder block")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def tokens_per_image(self) -> int:
        return self.num_patches + 1

    @property
    def attn(self) -> nn.AttentionConfig:
        return nn.AttentionConfig(self.dim, self.heads, pre_norm=self.pre_norm, dropout=self.dropout)

    def has_cross(self, block: int) -> bool:
        return True if self.cross_attention_blocks is None else self.cross_attention_blocks[block]

    # key=value text form used by checkpoints and --config files
    def to_items(self) -> list[tuple[str, str]]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join("1" if b else "0" for b in v)
            elif v is None:
                v = "none"
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append((f.name, repr(v) if isinstance(v, float) else str(v)))
        return out

    @classmethod
    def from_items(cls, items: Mapping[str, str]) -> "MuiscConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in items.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _parse_value(key, str(raw), getattr(cls(), key))
        return cls(**kwargs)


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    if key == "cross_attention_blocks":
        return None if raw.lower() == "none" else tuple(c == "1" for c in raw.split(","))
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false"):
            raise ValueError(f"{key}: expected true/false, got {raw!r}")
        return raw.lower() == "true"
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


DESK_CONFIG = MuiscConfig()
PAPER_CONFIG = MuiscConfig(image_size=224, patch_size=16, dim=768, heads=12, encoder_blocks=12,
                           fusion_blocks=1, decoder_blocks=3, num_classes=45, max_text_len=64)
TINY_CONFIG = MuiscConfig(image_size=8, patch_size=4, dim=8, heads=2, encoder_blocks=1, fusion_blocks=1,
                          decoder_blocks=1, seq_len=2, max_text_len=12, dropout=0.0)


# -- parameters ----------------------------------------------------------------
def param_shapes(cfg: MuiscConfig) -> dict[str, tuple[int, ...]]:
    d, e = cfg.dim, cfg.ffn_expansion
    pdim = cfg.patch_size * cfg.patch_size * 3
    shapes: dict[str, tuple[int, ...]] = {
        "patch.w": (pdim, d),
        "patch.b": (d,),
        "cls": (1, d),
        "enc_pos": (cfg.tokens_per_image, d),
        "img_index": (cfg.seq_len, d),
    }

    def attn(prefix):
        for n in "qkvo":
            shapes[f"{prefix}w{n}"] = (d, d)
            shapes[f"{prefix}b{n}"] = (d,)
        shapes[prefix + "ln_g"] = (d,)
        shapes[prefix + "ln_b"] = (d,)

    def ffn(prefix):
        shapes[prefix + "w1"] = (d, e * d)
        shapes[prefix + "b1"] = (e * d,)
        shapes[prefix + "w2"] = (e * d, d)
        shapes[prefix + "b2"] = (d,)
        shapes[prefix + "ln_g"] = (d,)
        shapes[prefix + "ln_b"] = (d,)

    for i in range(cfg.encoder_blocks):
        attn(f"enc.{i}.attn.")
        ffn(f"enc.{i}.ffn.")
    if cfg.hierarchical_fusion:
        for i in range(cfg.fusion_blocks):
            attn(f"fuse.{i}.attn.")
            ffn(f"fuse.{i}.ffn.")
    if cfg.use_decoder:
        shapes["tok_emb"] = (cfg.vocab_size, d)
        shapes["dec_pos"] = (cfg.max_text_len, d)
        for i in range(cfg.decoder_blocks):
            attn(f"dec.{i}.self.")
            if cfg.has_cross(i):
                attn(f"dec.{i}.cross.")
            ffn(f"dec.{i}.ffn.")
        shapes["lm.w"] = (d, cfg.vocab_size)
        shapes["lm.b"] = (cfg.vocab_size,)
    shapes["mcc.w"] = (d, cfg.num_classes)
    shapes["mcc.b"] = (cfg.num_classes,)
    return shapes


def init_params(cfg: MuiscConfig, seed: int = 0) -> dict[str, Tensor]:
    """Truncated-normal weights, zero biases, unit/zero layer-norm affine."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "ln_g":
            data = np.ones(shape)
        elif leaf == "ln_b" or (leaf.startswith("b") and len(shape) == 1):
            data = np.zeros(shape)
        else:
            data = nn.trunc_normal(rng, shape, cfg.init_std)
        params[name] = Tensor(data, requires_grad=True)
    return params


@dataclass
class MuiscModel:
    cfg: MuiscConfig
    params: dict[str, Tensor]

    @classmethod
    def create(cls, cfg: MuiscConfig = DESK_CONFIG, seed: int = 0) -> "MuiscModel":
        return cls(cfg, init_params(cfg, seed))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


# -- inputs --------------------------------------------------------------------
@dataclass(frozen=True)
class DecoderInput:
    """Decoder token ids ``title ++ [<sep>] ++ feedback ++ [<eot>]`` (feedback only in training)."""
    tokens: tuple[int, ...]
    sep_pos: int
    n_feedback: int = 0

    @property
    def training(self) -> bool:
        return self.n_feedback > 0

    @property
    def feedback(self) -> tuple[int, ...]:
        return self.tokens[self.sep_pos + 1: self.sep_pos + 1 + self.n_feedback]


def decoder_input(title: Sequence[int], feedback: Sequence[int] | None, cfg: MuiscConfig) -> DecoderInput:
    title = list(title) if cfg.title_input else []
    toks = title + [vocab.SEP_ID]
    n_fb = 0
    if feedback is not None:
        if len(feedback) == 0:
            raise ValueError("training feedback must not be empty")
        toks += list(feedback) + [vocab.EOT_ID]
        n_fb = len(feedback)
    if len(toks) > cfg.max_text_len:
        raise nn.CapacityError(f"decoder input of {len(toks)} tokens exceeds max_text_len {cfg.max_text_len}")
    if max(toks) >= cfg.vocab_size:
        raise IndexError("token id outside the vocabulary")
    return DecoderInput(tuple(int(t) for t in toks), len(title), n_fb)


@dataclass
class Batch:
    images: np.ndarray            # [B, K, H, W, 3]
    tokens: np.ndarray            # [B, L] right-padded
    sep_pos: np.ndarray           # [B]
    n_feedback: np.ndarray        # [B]
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.images.shape[0]


def make_batch(images: Sequence, inputs: Sequence[DecoderInput], labels=None) -> Batch:
    imgs = np.asarray(images, dtype=np.float64)
    length = max(len(d.tokens) for d in inputs)
    toks = np.full((len(inputs), length), vocab.PAD_ID, dtype=np.int64)
    for i, d in enumerate(inputs):
        toks[i, : len(d.tokens)] = d.tokens
    return Batch(
        images=imgs,
        tokens=toks,
        sep_pos=np.array([d.sep_pos for d in inputs], dtype=np.int64),
        n_feedback=np.array([d.n_feedback for d in inputs], dtype=np.int64),
        labels=None if labels is None else np.asarray(labels, dtype=np.int64),
    )


# -- forward pieces ------------------------------------------------------------
def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """[N, H, W, C] -> [N, (H/P)*(W/P), P*P*C], patches in row-major order."""
    n, h, w, c = images.shape
    x = images.reshape(n, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(n, (h // patch) * (w // patch), patch * patch * c)


def _check_images(images: np.ndarray, cfg: MuiscConfig) -> None:
    if images.shape[-3:] != (cfg.image_size, cfg.image_size, 3):
        raise ag.ShapeError(
            f"images of shape {images.shape[-3:]} do not match config {(cfg.image_size, cfg.image_size, 3)}")


def encode_images(images: np.ndarray, params: Mapping[str, Tensor], cfg: MuiscConfig, rng=None) -> Tensor:
    """Per-image ViT features, [N, Np+1, D] for images [N, H, W, 3]."""
    images = np.asarray(images, dtype=np.float64)
    _check_images(images, cfg)
    n = images.shape[0]
    # pixels [0, 1] -> [-1, 1], the usual ViT input normalisation
    pixels = patchify(images, cfg.patch_size) * 2.0 - 1.0
    x = nn.linear(Tensor(pixels), params["patch.w"], params["patch.b"])
    cls = ag.gather_rows(params["cls"], np.zeros(n, dtype=np.int64)).reshape(n, 1, cfg.dim)
    x = nn.add_positions(ag.concat([cls, x], axis=1), params["enc_pos"])
    acfg = cfg.attn
    for i in range(cfg.encoder_blocks):
        x = nn.encoder_block(x, params, f"enc.{i}.", acfg, rng)
    return x


def encode_image(image: np.ndarray, params, cfg: MuiscConfig) -> Tensor:
    """Features of a single image, [(Np+1), D]."""
    out = encode_images(np.asarray(image)[None], params, cfg)
    return out.reshape(cfg.tokens_per_image, cfg.dim)


def fuse_sequence(per_image: Tensor | Sequence[Tensor], params, cfg: MuiscConfig, rng=None) -> Tensor:
    """Concatenate K image features per sequence, tag rows with their image index,
    then run the fusion blocks. Input [B*K, Np+1, D] (or a list of K [Np+1, D]
    features for one sequence); output [B, K*(Np+1), D] (or [K*(Np+1), D])."""
    single = not isinstance(per_image, Tensor)
    if single:
        if len(per_image) != cfg.seq_len:
            raise ValueError(f"expected {cfg.seq_len} image features, got {len(per_image)}")
        per_image = ag.concat([f.reshape(1, *f.shape) for f in per_image], axis=0)
    t, d = cfg.tokens_per_image, cfg.dim
    if per_image.shape[0] % cfg.seq_len:
        raise ValueError(f"{per_image.shape[0]} image features is not a multiple of {cfg.seq_len}")
    b = per_image.shape[0] // cfg.seq_len
    x = per_image.reshape(b, cfg.seq_len * t, d)
    idx = np.repeat(np.arange(cfg.seq_len), t)
    x = x + ag.gather_rows(params["img_index"], idx)
    if cfg.hierarchical_fusion:
        acfg = cfg.attn
        for i in range(cfg.fusion_blocks):
            x = nn.encoder_block(x, params, f"fuse.{i}.", acfg, rng)
    return x.reshape(cfg.seq_len * t, d) if single else x


@dataclass
class MuiscOutput:
    class_logits: Tensor                 # [B, K_g]
    lm_logits: Tensor | None = None      # [B, L, V]
    hidden: Tensor | None = None         # H_d, [B, L, D]

    @property
    def p_mcc(self) -> np.ndarray:
        z = self.class_logits.data
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    @property
    def p_t(self) -> np.ndarray:
        return self.p_mcc[..., 0]


def decode(features: Tensor, batch: Batch, params, cfg: MuiscConfig, rng=None) -> MuiscOutput:
    """Run the decoder over ``batch.tokens`` with cross-attention to ``features``."""
    if not cfg.use_decoder:
        pooled = features.mean(axis=1)
        return MuiscOutput(nn.linear(pooled, params["mcc.w"], params["mcc.b"]))
    toks = batch.tokens
    if toks.shape[1] > cfg.max_text_len:
        raise nn.CapacityError(f"{toks.shape[1]} tokens exceed max_text_len {cfg.max_text_len}")
    x = nn.embed(toks, params["tok_emb"])
    x = nn.add_positions(x, params["dec_pos"])
    acfg = cfg.attn
    for i in range(cfg.decoder_blocks):
        x = nn.decoder_block(x, features if cfg.has_cross(i) else None, params, f"dec.{i}.", acfg, rng)
    sep_state = ag.take_positions(x, batch.sep_pos)
    class_logits = nn.linear(sep_state, params["mcc.w"], params["mcc.b"])
    lm_logits = nn.linear(x, params["lm.w"], params["lm.b"])
    return MuiscOutput(class_logits, lm_logits, x)


def forward(model: MuiscModel, batch: Batch, rng=None) -> MuiscOutput:
    cfg, params = model.cfg, model.params
    if batch.images.shape[1] != cfg.seq_len:
        raise ValueError(f"expected {cfg.seq_len} images per sequence, got {batch.images.shape[1]}")
    b = len(batch)
    flat = batch.images.reshape(b * cfg.seq_len, *batch.images.shape[2:])
    feats = fuse_sequence(encode_images(flat, params, cfg, rng), params, cfg, rng)
    return decode(feats, batch, params, cfg, rng)


# -- losses --------------------------------------------------------------------
def nlg_targets(batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Next-token targets and a 0/1 mask selecting the feedback predictions.

    Position ``sep + q`` predicts feedback token ``q + 1`` (q = 0..K_f-1);
    title, separator and end-of-text predictions are not scored.
    """
    b, length = batch.tokens.shape
    targets = np.zeros((b, length), dtype=np.int64)
    targets[:, :-1] = batch.tokens[:, 1:]
    pos = np.arange(length)[None, :]
    start = batch.sep_pos[:, None]
    mask = ((pos >= start) & (pos < start + batch.n_feedback[:, None])).astype(np.float64)
    return targets, mask


def loss_nlg(output: MuiscOutput, batch: Batch) -> Tensor:
    """Sum over feedback tokens of -log p(token | prefix, images), averaged over the batch."""
    if output.lm_logits is None:
        raise ValueError("NLG loss needs the decoder")
    if np.any(batch.n_feedback <= 0):
        raise ValueError("NLG loss needs training inputs with feedback tokens")
    targets, mask = nlg_targets(batch)
    b, length, v = output.lm_logits.shape
    ce = ag.cross_entropy_logits(output.lm_logits.reshape(b * length, v), targets.reshape(-1), mask.reshape(-1))
    return ce * float(length)


def loss_mcc(output: MuiscOutput, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    return ag.cross_entropy_logits(output.class_logits.reshape(-1, output.class_logits.shape[-1]), labels)


def loss_total(l_nlg: Tensor | None, l_mcc: Tensor, cfg: MuiscConfig) -> Tensor:
    if not cfg.nlg_task or not cfg.use_decoder or l_nlg is None:
        return l_mcc if cfg.lambda_mcc == 1.0 else l_mcc * cfg.lambda_mcc
    return l_nlg * cfg.lambda_nlg + l_mcc * cfg.lambda_mcc


def batch_loss(model: MuiscModel, batch: Batch, rng=None) -> tuple[Tensor, dict[str, float], MuiscOutput]:
    out = forward(model, batch, rng)
    l_mcc = loss_mcc(out, batch.labels)
    l_nlg = loss_nlg(out, batch) if (model.cfg.nlg_task and model.cfg.use_decoder) else None
    total = loss_total(l_nlg, l_mcc, model.cfg)
    parts = {"total": total.item(), "mcc": l_mcc.item(), "nlg": l_nlg.item() if l_nlg is not None else 0.0}
    return total, parts, out


# -- inference -------------------------------------------------------------------
def predict_batch(model: MuiscModel, images: np.ndarray, titles: Sequence[Sequence[int]]) -> np.ndarray:
    """Class probabilities [B, K_g] for B sequences; dropout off, no graph."""
    inputs = [decoder_input(t, None, model.cfg) for t in titles]
    with ag.no_grad():
        out = forward(model, make_batch(images, inputs))
    return out.p_mcc


def predict(model: MuiscModel, images: Sequence[np.ndarray], title: Sequence[int]) -> tuple[float, np.ndarray]:
    """``(p_t, p_mcc)`` for one target sequence; ``p_t`` is the qualified-class probability."""
    p = predict_batch(model, np.asarray(images)[None], [title])[0]
    return float(p[0]), p


def greedy_feedback(model: MuiscModel, images: Sequence[np.ndarray], title: Sequence[int],
                    max_new: int = 3) -> list[int]:
    """Greedy continuation after ``<sep>``; stops at end-of-text, after ``yes`` or ``max_new`` tokens."""
    if not model.cfg.use_decoder:
        return []
    din = decoder_input(title, None, model.cfg)
    toks = list(din.tokens)
    imgs = np.asarray(images)[None]
    out_ids: list[int] = []
    yes = vocab.TOKEN_ID["yes"]
    with ag.no_grad():
        for _ in range(max_new):
            if len(toks) >= model.cfg.max_text_len:
                break
            batch = make_batch(imgs, [DecoderInput(tuple(toks), din.sep_pos)])
            out = forward(model, batch)
            nxt = int(np.argmax(out.lm_logits.data[0, len(toks) - 1]))
            if nxt == vocab.EOT_ID:
                break
            out_ids.append(nxt)
            toks.append(nxt)
            if nxt == yes:
                break
    return out_ids


def config_replace(cfg: MuiscConfig, **changes) -> MuiscConfig:
    return replace(cfg, **changes)


def config_dict(cfg: MuiscConfig) -> dict:
    return asdict(cfg)
