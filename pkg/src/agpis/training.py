"""AdamW and the MUIsC training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from . import model as M
from .autograd import Tensor
from .ruleworld import ReviewRecord

log = logging.getLogger(__name__)

PAPER_LR = 1.5e-4


@dataclass
class OptimizerState:
    lr: float = PAPER_LR
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: Mapping[str, Tensor], state: OptimizerState) -> None:
    """One decoupled-weight-decay Adam update using the gradients stored on ``params``."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {name} {p.data.shape}")
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


# -- data ------------------------------------------------------------------------
@dataclass
class Prepared:
    """Records converted to model-ready arrays."""
    images: np.ndarray
    inputs: list[M.DecoderInput]
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def batch(self, idx: Sequence[int]) -> M.Batch:
        idx = list(idx)
        return M.make_batch(self.images[idx], [self.inputs[i] for i in idx], self.labels[idx])


def prepare(records: Sequence[ReviewRecord], cfg: M.MuiscConfig) -> Prepared:
    return Prepared(
        images=np.stack([np.stack(r.images) for r in records]).astype(np.float64),
        inputs=[M.decoder_input(r.title, r.feedback, cfg) for r in records],
        labels=np.array([r.label for r in records], dtype=np.int64),
    )


# -- loop ------------------------------------------------------------------------
@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float | None = None


@dataclass
class TrainResult:
    model: M.MuiscModel
    curve: list[EpochStats]
    step_losses: list[float]
    state: OptimizerState


def evaluate_loss(model: M.MuiscModel, data: Prepared, batch_size: int = 64) -> float:
    """Mean eval-mode total loss (dropout off)."""
    total, n = 0.0, 0
    with ag.no_grad():
        for lo in range(0, len(data), batch_size):
            idx = range(lo, min(lo + batch_size, len(data)))
            loss, _, _ = M.batch_loss(model, data.batch(idx))
            total += loss.item() * len(idx)
            n += len(idx)
    return total / n


def train(cfg: M.MuiscConfig, records: Sequence[ReviewRecord], *, epochs: int = 10, batch_size: int = 16,
          seed: int = 0, lr: float = PAPER_LR, weight_decay: float = 0.01,
          val_records: Sequence[ReviewRecord] | None = None, max_steps: int | None = None,
          model: M.MuiscModel | None = None,
          on_step: Callable[[int, dict], None] | None = None) -> TrainResult:
    """Seeded mini-batch AdamW on the weighted NLG + McC loss, constant learning rate."""
    if not records:
        raise ValueError("training set is empty")
    model = model or M.MuiscModel.create(cfg, seed=seed)
    cfg = model.cfg
    data = prepare(records, cfg)
    val = prepare(val_records, cfg) if val_records else None
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7EA1]))
    drop_rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD409]))
    state = OptimizerState(lr=lr, weight_decay=weight_decay)
    curve: list[EpochStats] = []
    step_losses: list[float] = []
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(data))
        seen, running = 0, 0.0
        for lo in range(0, len(order), batch_size):
            if max_steps is not None and state.step >= max_steps:
                break
            idx = order[lo: lo + batch_size]
            batch = data.batch(idx)
            zero_grads(model.params)
            loss, parts, _ = M.batch_loss(model, batch, drop_rng if cfg.dropout > 0 else None)
            ag.backward(loss)
            adamw_step(model.params, state)
            step_losses.append(parts["total"])
            running += parts["total"] * len(idx)
            seen += len(idx)
            if on_step:
                on_step(state.step, parts)
        if seen == 0:
            break
        stats = EpochStats(epoch, running / seen, evaluate_loss(model, val) if val is not None else None)
        log.info("epoch %d train %.4f val %s", epoch, stats.train_loss, stats.val_loss)
        curve.append(stats)
    return TrainResult(model, curve, step_losses, state)


def curve_csv(curve: Iterable[EpochStats]) -> str:
    lines = ["epoch,train_loss,val_loss"]
    for s in curve:
        val = "" if s.val_loss is None else repr(s.val_loss)
        lines.append(f"{s.epoch},{s.train_loss!r},{val}")
    return "\n".join(lines) + "\n"
