"""Binary ranking metrics and the per-category evaluation report."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from . import model as M
from .ruleworld import CATEGORIES, NUM_CLASSES, ReviewRecord, RuleClass

log = logging.getLogger(__name__)

PRECISION_TARGETS = (0.8, 0.85, 0.9)


class UndefinedMetricError(ValueError):
    """Metric needs both classes present."""


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores but {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise UndefinedMetricError("both positive and negative samples are required")
    return s, y


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties count 1/2)."""
    s, y = _check_binary(scores, labels)
    ranks = rankdata(s)  # average ranks for ties
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def recall_at_precision(scores, labels, target: float) -> float:
    """Best recall over thresholds ``score >= t`` whose precision reaches ``target``; 0 if none does."""
    if not 0.0 < target <= 1.0:
        raise ValueError(f"target precision must lie in (0, 1], got {target}")
    s, y = _check_binary(scores, labels)
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    # only cut after the last member of each tie group
    last = np.r_[s[1:] != s[:-1], True]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / y.sum()
    ok = precision >= target - 1e-12
    return float(recall[ok].max()) if ok.any() else 0.0


@dataclass
class EvalReport:
    auc: float
    recall_at_precision: dict[float, float]
    auc_single: float | None
    auc_pair: float | None
    auc_multi: float | None
    confusion: list[list[int]]
    n: int
    extra: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict[str, float]:
        out: dict[str, float] = {"auc": self.auc}
        for p, r in self.recall_at_precision.items():
            out[f"r@p={p:g}"] = r
        for cat in CATEGORIES:
            v = getattr(self, f"auc_{cat}")
            if v is not None:
                out[f"auc_{cat}"] = v
        out["n"] = self.n
        for i, row in enumerate(self.confusion):
            for j, c in enumerate(row):
                out[f"confusion_{i}_{j}"] = c
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False)


def score_records(model: M.MuiscModel, records: Sequence[ReviewRecord], batch_size: int = 64) -> np.ndarray:
    """p_mcc for every record, in record order."""
    out = []
    for lo in range(0, len(records), batch_size):
        chunk = records[lo: lo + batch_size]
        imgs = np.stack([np.stack(r.images) for r in chunk])
        out.append(M.predict_batch(model, imgs, [r.title for r in chunk]))
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.cfg.num_classes))


def _binary(records: Sequence[ReviewRecord]) -> np.ndarray:
    return np.array([1 if r.label == RuleClass.QUALIFIED else 0 for r in records])


def evaluate(model: M.MuiscModel, test: Sequence[ReviewRecord],
             subsets: Mapping[str, Sequence[ReviewRecord]] | None = None) -> EvalReport:
    """AUC and R@P on ``test`` (score = p_t) plus AUC on each balanced category subset."""
    probs = score_records(model, test)
    p_t = probs[:, 0]
    y = _binary(test)
    auc = roc_auc(p_t, y)
    rap = {p: recall_at_precision(p_t, y, p) for p in PRECISION_TARGETS}
    k = max(NUM_CLASSES, model.cfg.num_classes)
    conf = np.zeros((k, k), dtype=int)
    for true, pred in zip((r.label for r in test), probs.argmax(axis=1)):
        conf[true, pred] += 1
    cat_auc: dict[str, float | None] = {c: None for c in CATEGORIES}
    cache = {id(r): p for r, p in zip(test, p_t)}
    for cat, recs in (subsets or {}).items():
        yb = _binary(recs)
        if len(recs) == 0 or yb.all() or not yb.any():
            log.warning("subset %s has no usable samples; AUC omitted", cat)
            continue
        missing = [r for r in recs if id(r) not in cache]
        if missing:
            for r, p in zip(missing, score_records(model, missing)[:, 0]):
                cache[id(r)] = p
        cat_auc[cat] = roc_auc([cache[id(r)] for r in recs], yb)
    return EvalReport(auc=auc, recall_at_precision=rap, auc_single=cat_auc["single"],
                      auc_pair=cat_auc["pair"], auc_multi=cat_auc["multi"],
                      confusion=conf[:NUM_CLASSES, :NUM_CLASSES].tolist(), n=len(test))
