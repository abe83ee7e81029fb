"""Component ablation: five cumulative flag settings trained and evaluated alike."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import model as M
from . import training as T
from .metrics import EvalReport, evaluate
from .ruleworld import ReviewRecord, category_subsets

# (row name, flags, reference AUC shown for orientation only)
ABLATION_ROWS: tuple[tuple[str, dict[str, bool], float], ...] = (
    ("late-fusion McC", dict(hierarchical_fusion=False, use_decoder=False, nlg_task=False, title_input=False), 0.764),
    ("+hierarchical fusion", dict(hierarchical_fusion=True, use_decoder=False, nlg_task=False, title_input=False), 0.778),
    ("+encoder-decoder", dict(hierarchical_fusion=True, use_decoder=True, nlg_task=False, title_input=False), 0.780),
    ("+NLG task", dict(hierarchical_fusion=True, use_decoder=True, nlg_task=True, title_input=False), 0.792),
    ("+title input", dict(hierarchical_fusion=True, use_decoder=True, nlg_task=True, title_input=True), 0.800),
)


@dataclass
class AblationRow:
    name: str
    flags: dict[str, bool]
    report: EvalReport
    reference_auc: float


def ablation_suite(train: Sequence[ReviewRecord], test: Sequence[ReviewRecord], seed: int = 0, *,
                   base: M.MuiscConfig = M.DESK_CONFIG, epochs: int = 10, batch_size: int = 16,
                   max_steps: int | None = None) -> list[AblationRow]:
    """Train one model per row with the same seed and data order; evaluate on ``test``."""
    subsets = category_subsets(test, seed)
    rows = []
    for name, flags, ref in ABLATION_ROWS:
        cfg = M.config_replace(base, **flags)
        res = T.train(cfg, train, epochs=epochs, batch_size=batch_size, seed=seed, max_steps=max_steps)
        rows.append(AblationRow(name, dict(flags), evaluate(res.model, test, subsets), ref))
    return rows


def format_table(rows: Sequence[AblationRow]) -> str:
    """Plain-text comparison; the reference column is context, not a target."""
    def f(v):
        return "   -  " if v is None else f"{v:6.3f}"
    head = f"{'setting':<22} {'AUC':>6} {'single':>6} {'pair':>6} {'multi':>6} {'R@P.8':>6}  {'ref AUC':>7}"
    lines = [head, "-" * len(head)]
    for r in rows:
        rep = r.report
        lines.append(f"{r.name:<22} {f(rep.auc)} {f(rep.auc_single)} {f(rep.auc_pair)} {f(rep.auc_multi)} "
                     f"{f(rep.recall_at_precision[0.8])}  {r.reference_auc:7.3f}")
    lines.append("ref AUC: reference values from proprietary data, shown for orientation only")
    return "\n".join(lines) + "\n"
