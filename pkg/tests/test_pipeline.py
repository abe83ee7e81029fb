import json

import numpy as np
import pytest

from agpis import model as M
from agpis import pipeline as pl
from agpis import ruleworld as rw
from agpis import stage1 as s1
from agpis.stage1 import CandidateSet

SMALL = M.MuiscConfig(dim=16, heads=2, encoder_blocks=1, fusion_blocks=1, decoder_blocks=1, dropout=0.0)


@pytest.fixture(scope="module")
def model():
    return M.MuiscModel.create(SMALL, seed=0)


@pytest.fixture(scope="module")
def views():
    """Front views of five visibly different products."""
    shapes = ["circle", "square", "triangle", "star", "circle"]
    return [rw.render_views(rw.ProductSpec(shapes[i], 0.15 * i, "large", i))["front"] for i in range(5)]


def scored(views, p_primary, p_nc):
    return CandidateSet(dict(enumerate(views[:len(p_primary)])), dict(enumerate(p_primary)), dict(enumerate(p_nc)))


TITLE = [5, 6, 7]


def test_decide_is_strict():
    assert pl.decide(0.3) == pl.REJECTED
    assert pl.decide(np.nextafter(0.3, 1.0)) == pl.SUBMITTED
    assert pl.decide(0.29) == pl.REJECTED and pl.decide(0.9, 0.95) == pl.REJECTED


def test_result_contract():
    with pytest.raises(AssertionError):
        pl.PipelineResult(pl.ABORTED, reason="TooFew", sequence=[0, 1, 2])
    with pytest.raises(ValueError):
        pl.PipelineResult("Maybe")
    with pytest.raises(ValueError):
        pl.PipelineConfig(threshold=1.5)


def test_no_primary_abort(model, views):
    res = pl.run_pipeline(scored(views, [0.2, 0.5, 0.1, 0.3], [0.0] * 4), TITLE, None, model)
    assert res.outcome == pl.ABORTED and res.reason == s1.AbortReason.NO_PRIMARY.value
    assert res.sequence is None


def test_too_few_abort(model, views):
    res = pl.run_pipeline(scored(views, [0.9, 0.2, 0.1, 0.3], [0.9, 0.8, 0.95, 0.6]), TITLE, None, model)
    assert res.outcome == pl.ABORTED and res.reason == s1.AbortReason.TOO_FEW.value
    res = pl.run_pipeline(scored(views, [0.9, 0.2], [0.0, 0.0]), TITLE, None, model)
    assert res.reason == s1.AbortReason.TOO_FEW.value


def test_duplicates_can_cause_too_few(model, views):
    dup = [views[0], views[0].copy(), views[1]]
    res = pl.run_pipeline(CandidateSet(dict(enumerate(dup)), {0: 0.9, 1: 0.1, 2: 0.1}, {0: 0.0, 1: 0.1, 2: 0.1}),
                          TITLE, None, model)
    assert res.outcome == pl.ABORTED and res.reason == s1.AbortReason.TOO_FEW.value


def test_sequence_starts_with_primary(model, views):
    res = pl.run_pipeline(scored(views, [0.1, 0.2, 0.9, 0.3, 0.1], [0.0, 0.9, 0.0, 0.0, 0.0]), TITLE, None, model)
    assert res.outcome in (pl.SUBMITTED, pl.REJECTED)
    assert res.sequence[0] == 2 and len(res.sequence) == 3 and 1 not in res.sequence
    assert len(res.p_mcc) == SMALL.num_classes and res.p_t == pytest.approx(res.p_mcc[0])


def test_flagged_primary_falls_back(model, views):
    res = pl.run_pipeline(scored(views, [0.9, 0.8, 0.1, 0.3], [0.9, 0.0, 0.0, 0.0]), TITLE, None, model)
    assert res.sequence[0] == 1 and 0 not in res.sequence


def test_outcome_tracks_threshold(model, views):
    cands = scored(views, [0.1, 0.2, 0.9, 0.3], [0.0] * 4)
    p_t = pl.run_pipeline(cands, TITLE, None, model).p_t
    at = pl.run_pipeline(cands, TITLE, None, model, pl.PipelineConfig(threshold=p_t))
    below = pl.run_pipeline(cands, TITLE, None, model, pl.PipelineConfig(threshold=float(np.nextafter(p_t, 0))))
    assert at.outcome == pl.REJECTED and below.outcome == pl.SUBMITTED
    # rejected results still carry the sequence and scores
    assert at.sequence and at.p_t == p_t


def test_deterministic_for_seed(model, views):
    cands = scored(views, [0.1, 0.2, 0.9, 0.3, 0.2], [0.0] * 5)
    a = pl.run_pipeline(cands, TITLE, None, model, seed=3).to_json()
    assert a == pl.run_pipeline(cands, TITLE, None, model, seed=3).to_json()
    seqs = {tuple(pl.run_pipeline(cands, TITLE, None, model, seed=s).sequence) for s in range(12)}
    assert len(seqs) > 1
    d = json.loads(a)
    assert set(d) == {"outcome", "reason", "sequence", "p_t", "p_mcc", "feedback"}


def test_raw_images_with_models(model, views):
    models = s1.Stage1Models(s1.ImageClassifier.create(seed=0), s1.ImageClassifier.create(seed=1))
    res = pl.run_pipeline(views, TITLE, models, model, pl.PipelineConfig(stage1=s1.Stage1Config(primary_threshold=1e-3)))
    assert res.outcome in (pl.SUBMITTED, pl.REJECTED, pl.ABORTED)
    with pytest.raises(pl.InputError):
        pl.run_pipeline(views, TITLE, None, model)


def test_malformed_inputs(model, views):
    with pytest.raises(pl.InputError):
        pl.run_pipeline([], TITLE, None, model)
    bad = [v.copy() for v in views]
    bad[1][0, 0, 0] = 1.5
    with pytest.raises(pl.InputError):
        pl.run_pipeline(scored(bad, [0.9] * 4, [0.0] * 4), TITLE, None, model)
    with pytest.raises(pl.InputError):
        pl.run_pipeline(scored([np.zeros((16, 16, 3))] * 4, [0.9] * 4, [0.0] * 4), TITLE, None, model)
    with pytest.raises(pl.InputError):
        pl.run_pipeline(scored(views, [0.9] * 4, [0.0] * 4), [9999], None, model)
