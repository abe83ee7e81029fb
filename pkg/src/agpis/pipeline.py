"""End-to-end flow: Stage 1 assembles a sequence, MUIsC decides whether to submit it."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import model as M
from . import stage1 as s1
from . import vocab

log = logging.getLogger(__name__)

SUBMIT_THRESHOLD = 0.3

SUBMITTED = "Submitted"
REJECTED = "Rejected"
ABORTED = "Aborted"


class InputError(ValueError):
    """Candidate images or title cannot be processed."""


@dataclass(frozen=True)
class PipelineConfig:
    threshold: float = SUBMIT_THRESHOLD
    k_t: int = 3
    stage1: s1.Stage1Config = field(default_factory=s1.Stage1Config)

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.k_t < 1:
            raise ValueError("k_t must be >= 1")


@dataclass
class PipelineResult:
    outcome: str
    reason: str | None = None
    sequence: list[int] | None = None
    p_t: float | None = None
    p_mcc: list[float] | None = None
    feedback: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.outcome == ABORTED:
            assert self.sequence is None and self.reason is not None
        elif self.outcome not in (SUBMITTED, REJECTED):
            raise ValueError(f"unknown outcome {self.outcome!r}")

    def to_dict(self) -> dict:
        return {"outcome": self.outcome, "reason": self.reason, "sequence": self.sequence,
                "p_t": self.p_t, "p_mcc": self.p_mcc, "feedback": self.feedback}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def decide(p_t: float, threshold: float = SUBMIT_THRESHOLD) -> str:
    """Submit only when ``p_t`` is strictly above the threshold."""
    return SUBMITTED if p_t > threshold else REJECTED


def _check_images(images: Sequence[np.ndarray], size: int) -> list[np.ndarray]:
    if len(images) == 0:
        raise InputError("at least one candidate image is required")
    out = []
    for i, img in enumerate(images):
        arr = np.asarray(img, dtype=np.float64)
        if arr.shape != (size, size, 3):
            raise InputError(f"candidate {i}: expected shape {(size, size, 3)}, got {arr.shape}")
        if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
            raise InputError(f"candidate {i}: pixel values must be finite and within [0, 1]")
        out.append(arr)
    return out


def stage1_sequence(cands: s1.CandidateSet, cfg: PipelineConfig, seed: int,
                    models: s1.Stage1Models | None = None) -> list[int]:
    """Candidate ids of the assembled sequence, primary first; raises :class:`stage1.Abort`."""
    scfg = cfg.stage1
    if models is not None:
        cands = models.score(cands)
    cands = s1.select_primary(cands, scfg)
    cands = s1.filter_noncompliant(cands, scfg, cfg.k_t)
    if cands.primary is None:
        # the chosen primary was itself flagged; fall back to the best compliant one
        cands = s1.select_primary(cands, scfg)
    verdicts = s1.pairwise_duplicates(cands, scfg)
    cands = s1.dedup_resolve(cands, verdicts, cands.primary, cfg.k_t)
    return s1.assemble_sequence(cands, cands.primary, cfg.k_t, seed)


def run_pipeline(candidates: Sequence[np.ndarray] | s1.CandidateSet, title: Sequence[int],
                 stage1_models: s1.Stage1Models | None, model: M.MuiscModel,
                 cfg: PipelineConfig = PipelineConfig(), seed: int = 0) -> PipelineResult:
    """Run both stages for one product.

    ``candidates`` may be a pre-scored :class:`stage1.CandidateSet`, in which
    case ``stage1_models`` may be None.
    """
    if cfg.k_t != model.cfg.seq_len:
        raise InputError(f"k_t={cfg.k_t} but the model expects sequences of {model.cfg.seq_len}")
    if isinstance(candidates, s1.CandidateSet):
        cands = replace(candidates, images=dict(zip(candidates.ids, _check_images(
            [candidates.images[i] for i in candidates.ids], model.cfg.image_size))))
        if stage1_models is None and not (cands.p_primary and cands.p_nc):
            raise InputError("unscored candidates need stage-1 models")
    else:
        if stage1_models is None:
            raise InputError("raw candidate images need stage-1 models")
        cands = s1.CandidateSet.from_images(_check_images(candidates, model.cfg.image_size))
    try:
        title = [int(t) for t in title]
        M.decoder_input(title, None, model.cfg)
    except (ValueError, TypeError, IndexError) as exc:
        raise InputError(f"bad title: {exc}") from exc
    try:
        seq = stage1_sequence(cands, cfg, seed, stage1_models)
    except s1.Abort as ab:
        log.info("aborted: %s", ab)
        return PipelineResult(ABORTED, reason=ab.reason.value)
    images = [cands.images[i] for i in seq]
    p_t, p_mcc = M.predict(model, images, title)
    feedback = vocab.decode(M.greedy_feedback(model, images, title))
    return PipelineResult(decide(p_t, cfg.threshold), sequence=seq, p_t=p_t,
                          p_mcc=[float(p) for p in p_mcc], feedback=feedback)
