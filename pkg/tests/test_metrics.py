import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from m2repa import metrics as mt
from m2repa.synthworld import SceneConfig, make_clip

from oracles import brute_force_best_miou, iou_matrix, lstsq_scale_shift

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- PSNR / SSIM


def test_psnr_examples():
    x = np.random.default_rng(0).uniform(size=(3, 8, 8))
    assert mt.psnr(x, x) == 99.0
    assert mt.psnr(np.zeros(4), np.ones(4)) == pytest.approx(0.0)
    gt = np.zeros(100)
    pred = np.full(100, 0.1)
    assert mt.psnr(pred, gt) == pytest.approx(20.0)
    with pytest.raises(ValueError, match="differ in shape"):
        mt.psnr(np.zeros(3), np.zeros(4))


def test_ssim_examples():
    rng = np.random.default_rng(0)
    img = (rng.uniform(size=(16, 16)) > 0.5).astype(float)
    assert mt.ssim(img, img) == pytest.approx(1.0)
    assert mt.ssim(1 - img, img) < 0.5
    c = np.full((16, 16), 0.4)
    assert mt.ssim(c, c) == pytest.approx(1.0)
    assert mt.ssim(np.stack([img, c]), np.stack([img, c])) == pytest.approx(1.0)
    with pytest.raises(ValueError, match="smaller than"):
        mt.ssim(np.zeros((5, 5)), np.zeros((5, 5)))


def test_ssim_matches_scikit_image():
    skm = pytest.importorskip("skimage.metrics")
    rng = np.random.default_rng(1)
    a = rng.uniform(size=(4, 16, 16))
    b = np.clip(a + 0.2 * rng.normal(size=a.shape), 0, 1)
    ref = np.mean([skm.structural_similarity(x, y, win_size=7, data_range=1.0,
                                             use_sample_covariance=False) for x, y in zip(a, b)])
    assert mt.ssim(a, b) == pytest.approx(ref, abs=1e-12)


# ---------------------------------------------------------------- depth


def test_scale_shift_examples():
    gt = np.random.default_rng(0).uniform(0.2, 1.0, size=(4, 16, 16))
    fit = mt.align_scale_shift(2 * gt + 1, gt)
    assert fit.a == pytest.approx(0.5) and fit.b == pytest.approx(-0.5)
    fit = mt.align_scale_shift(gt, gt)
    assert fit.a == pytest.approx(1.0) and fit.b == pytest.approx(0.0, abs=1e-12)
    assert mt.align_scale_shift(np.full_like(gt, 0.3), gt).degenerate
    a, b = lstsq_scale_shift(np.sin(gt * 7), gt)
    fit = mt.align_scale_shift(np.sin(gt * 7), gt)
    assert (fit.a, fit.b) == pytest.approx((a, b), abs=1e-10)


def test_depth_metric_examples():
    gt = np.random.default_rng(1).uniform(0.2, 1.0, size=(3, 8, 8)).astype(np.float32)
    r = mt.depth_metrics(gt, gt)
    assert (r.abs_rel, r.delta1) == (0.0, 1.0)
    assert mt.depth_metrics(1.25 * gt, gt).delta1 == 0.0
    r = mt.depth_metrics(np.float32(1.1) * gt, gt)
    assert r.abs_rel == pytest.approx(0.1, abs=1e-6) and r.delta1 == 1.0
    r = mt.evaluate_depth(3.0 * gt - 0.2, gt)
    assert r.abs_rel < 1e-6 and r.delta1 == 1.0
    with pytest.raises(ValueError, match="positive"):
        mt.depth_metrics(gt, gt - 1.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 24, elements=st.floats(0.05, 1.0)),
       arrays(np.float64, 24, elements=st.floats(-1, 1)))
def test_scale_shift_is_locally_optimal(gt, noise):
    pred = gt + 0.3 * noise
    fit = mt.align_scale_shift(pred, gt)
    if fit.degenerate:
        return
    base = np.sum((fit.a * pred + fit.b - gt) ** 2)
    for da in (-1e-3, 0, 1e-3):
        for db in (-1e-3, 0, 1e-3):
            r = np.sum(((fit.a + da) * pred + fit.b + db - gt) ** 2)
            assert r >= base - 1e-12


# ---------------------------------------------------------------- masks


def test_identity_and_disjoint_masks():
    clip = make_clip(4, SceneConfig(), 3)
    m = clip.mask[0]
    assert mt.greedy_miou(m, m).overall == 1.0
    a = np.zeros((2, 8, 8))
    b = np.zeros((2, 8, 8))
    a[0, :2], a[1, 2:4] = 1, 1
    b[0, 4:6], b[1, 6:] = 1, 1
    assert mt.greedy_miou(a, b).overall == 0.0


def test_greedy_trace_example():
    table = np.array([[0.8, 0.6], [0.0, 0.7]])
    matches = mt.greedy_match_from_iou(table)
    assert [(i, j) for i, j, _ in matches] == [(0, 0), (1, 1)]
    assert mt.frame_score(matches) == pytest.approx(0.75)


def test_threshold_is_strict():
    table = np.array([[0.5, 0.2]])
    assert mt.greedy_match_from_iou(table) == []


def test_oracle_objectives_differ_on_counterexample():
    # max-sum takes both pairs (0.6 + 0.9 = 1.5); max-mIoU takes the single 0.95
    table = np.array([[0.95, 0.6], [0.9, 0.0]])
    assert mt.optimal_matching_from_iou(table, "sum")[0] == pytest.approx(0.75)
    assert mt.optimal_matching_from_iou(table, "miou")[0] == pytest.approx(0.95)
    with pytest.raises(ValueError, match="objective"):
        mt.optimal_matching_from_iou(table, "max")
    with pytest.raises(ValueError, match="at most"):
        mt.optimal_matching_from_iou(np.zeros((7, 2)))


def random_instance(rng, size=6):
    M, N = rng.integers(1, 5, size=2)
    gt = rng.uniform(size=(M, size, size)) > rng.uniform(0.3, 0.8)
    pred = gt[rng.integers(0, M, size=N)].copy()
    flips = rng.uniform(size=pred.shape) < rng.uniform(0.0, 0.3)
    pred ^= flips
    return pred.astype(np.float32), gt.astype(np.float32)


def test_greedy_never_beats_exhaustive_oracle():
    rng = np.random.default_rng(2024)
    equal = 0
    for k in range(500):
        pred, gt = random_instance(rng)
        g = mt.greedy_miou(pred, gt).overall
        o = mt.optimal_miou_oracle(pred, gt)
        keep_p = pred.reshape(len(pred), -1).any(1)
        keep_g = gt.reshape(len(gt), -1).any(1)
        ref = brute_force_best_miou(iou_matrix(pred[keep_p] > 0.5, gt[keep_g] > 0.5))
        assert o == pytest.approx(ref, abs=1e-12)
        assert g <= o + 1e-12, f"instance {k}"
        if abs(g - o) > 1e-12:
            log.info("instance %d: greedy %.4f < oracle %.4f", k, g, o)
        else:
            equal += 1
    log.info("greedy == oracle on %d / 500 instances", equal)
    assert equal > 250


def test_video_miou_skips_context_and_averages_frames():
    clip = make_clip(9, SceneConfig(), 4)
    pred = clip.mask.copy()
    pred[2] = np.roll(pred[2], 1, axis=-1)
    pred[0] = 0
    r = mt.greedy_miou(pred, clip.mask, context_count=1)
    assert len(r.frame_mious) == 3
    per = [mt.greedy_miou(pred[f], clip.mask[f]).overall for f in (1, 2, 3)]
    assert r.overall == pytest.approx(np.mean(per))
    assert r.frame_mious == pytest.approx(per)
    with pytest.raises(ValueError, match="context count"):
        mt.greedy_miou(pred, clip.mask, context_count=4)


def test_metric_row_identity():
    v = make_clip(3, SceneConfig(), 5).stacked()
    row = mt.metric_row(v, v, context_count=1, mask_channels=3)
    assert row["psnr"] == 99.0 and row["ssim"] == pytest.approx(1.0)
    assert row["abs_rel"] < 1e-6 and row["delta1"] == 1.0 and row["miou"] == 1.0
    assert row["matched_fraction"] == 1.0


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31), st.data())
def test_greedy_invariant_to_prediction_order(M, N, seed, data):
    table = np.random.default_rng(seed).uniform(size=(M, N))
    perm = data.draw(st.permutations(list(range(N))))
    a = mt.frame_score(mt.greedy_match_from_iou(table))
    b = mt.frame_score(mt.greedy_match_from_iou(table[:, perm]))
    assert a == pytest.approx(b, abs=1e-12)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_greedy_bounded_by_oracle_on_tables(M, N, seed):
    table = np.random.default_rng(seed).uniform(size=(M, N))
    g = mt.frame_score(mt.greedy_match_from_iou(table))
    assert g <= mt.optimal_matching_from_iou(table)[0] + 1e-12
    assert mt.optimal_matching_from_iou(table)[0] == pytest.approx(brute_force_best_miou(table))


def test_gt_order_sensitivity_is_small():
    rng = np.random.default_rng(5)
    diffs = []
    for _ in range(300):
        table = rng.uniform(size=(3, 3))
        a = mt.frame_score(mt.greedy_match_from_iou(table))
        b = mt.frame_score(mt.greedy_match_from_iou(table[::-1]))
        diffs.append(abs(a - b))
    log.info("gt-order sensitivity: mean |diff| %.4f, max %.4f", np.mean(diffs), np.max(diffs))
    assert np.mean(diffs) < 0.1
