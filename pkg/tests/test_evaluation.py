import numpy as np
import pytest
from hypothesis import given, strategies as st

from tridit.evaluation import (decode_background, decode_identity, evaluate, identity_score, locate_avatar,
                               mask_iou, pearson, per_sample_csv, sync_correlation, text_match)
from tridit.synthdata import WorldConfig, generate_sample

CFG = WorldConfig()


@given(st.integers(0, 10_000))
def test_ground_truth_scores_perfectly(world, seed):
    s = generate_sample(seed, CFG, world)
    pos, _ = locate_avatar(s.video, world)
    np.testing.assert_array_equal(pos, s.trajectory)
    assert decode_identity(s.video[0], world) == s.identity
    assert decode_background(s.video, world) == s.background
    assert text_match(s.video, s.text_tokens, world) == 1.0
    score, flagged = identity_score(s.video, s.reference_latents, world)
    assert score == pytest.approx(0.0, abs=1e-12) and not flagged
    corr, degenerate = sync_correlation(s.video, s.audio_envelope, world)
    assert degenerate or corr == pytest.approx(1.0)


def test_empty_video_flagged(world):
    s = generate_sample(1, CFG, world)
    score, flagged = identity_score(np.zeros_like(s.video), s.reference_latents, world)
    assert flagged and score > 0


def test_pearson_degenerate():
    assert pearson(np.ones(5), np.arange(5)) == (0.0, True)
    r, d = pearson(np.arange(5), -np.arange(5.0))
    assert r == pytest.approx(-1.0) and not d


def test_sync_requires_matching_length(world):
    s = generate_sample(2, CFG, world)
    with pytest.raises(ValueError):
        sync_correlation(s.video, s.audio_envelope[:-1], world)


def test_evaluate_reports_and_controls(world):
    samples = [generate_sample(i, CFG, world) for i in range(6)]
    rep, rows = evaluate([s.video for s in samples], samples, world, seed=0)
    assert rep.text_match == 1.0 and rep.identity_score < 1e-9
    assert rep.identity_score_random > 1.0
    assert rep.sync_corr > rep.sync_corr_shuffled
    csv = per_sample_csv(rows)
    assert csv.count("\n") == 7
    with pytest.raises(ValueError):
        evaluate([], [], world)
    with pytest.raises(ValueError):
        evaluate([samples[0].video], samples, world)


def test_mask_iou():
    gt = np.zeros((2, 4, 4), bool)
    gt[:, :2, :2] = True
    assert mask_iou(gt.astype(float), gt) == 1.0
    pred = np.zeros((2, 4, 4))
    pred[:, :2, :1] = 0.9
    assert mask_iou(pred, gt) == pytest.approx(0.5)
