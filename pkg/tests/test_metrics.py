import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bodylift import metrics
from bodylift.data import PoseSample, axis_angle
from bodylift.metrics import (AlignmentError, EvalOptions, auc, evaluate, mpjpe_p1, mpjpe_p2, pck,
                              procrustes_align, score_poses)
from bodylift.selfcheck import (brute_mpjpe_p1, brute_mpjpe_p2, brute_pck, horn_similarity,
                                random_pose_pair, random_similarity)

seeds = st.integers(0, 2**32 - 1)


def test_p1_hand_values():
    gt = np.zeros((2, 3))
    assert mpjpe_p1(gt, gt) == 0.0
    pred = np.array([[7.0, 7.0, 7.0], [10.0, 11.0, 7.0]])
    assert mpjpe_p1(pred, gt) == 2.5


def test_p1_shape_mismatch():
    with pytest.raises(ValueError):
        mpjpe_p1(np.zeros((3, 3)), np.zeros((4, 3)))


def test_p2_recovers_similarity_transform():
    gt = np.random.default_rng(0).normal(scale=300, size=(16, 3))
    pred = 2.0 * gt @ axis_angle([0, 0, 1], math.pi / 2).T + [100.0, -50.0, 20.0]
    assert mpjpe_p2(pred, gt) < 1e-9


def test_p2_identity_alignment():
    gt = np.random.default_rng(1).normal(scale=300, size=(16, 3))
    T = procrustes_align(gt, gt)
    assert np.allclose(T.rotation, np.eye(3), atol=1e-9)
    assert abs(T.scale - 1.0) < 1e-9 and np.allclose(T.translation, 0.0, atol=1e-9)


def test_p2_transform_is_proper_rotation():
    rng = np.random.default_rng(2)
    gt = rng.normal(size=(16, 3))
    mirrored = gt * [-1.0, 1.0, 1.0]  # best orthogonal fit would be a reflection
    T = procrustes_align(mirrored, gt)
    assert abs(np.linalg.det(T.rotation) - 1.0) < 1e-9
    assert np.allclose(T.rotation.T @ T.rotation, np.eye(3), atol=1e-9) and T.scale > 0


def test_p2_degenerate_inputs():
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(AlignmentError, match="collinear"):
        procrustes_align(line, np.random.default_rng(0).normal(size=(5, 3)))
    with pytest.raises(AlignmentError):
        procrustes_align(np.ones((5, 3)), np.random.default_rng(0).normal(size=(5, 3)))


def test_p2_beats_random_search():
    rng = np.random.default_rng(3)
    pred, gt = random_pose_pair(rng)
    T = procrustes_align(pred, gt)
    best = float(((T.apply(pred) - gt) ** 2).sum())
    for _ in range(10_000):
        R, s, t = random_similarity(rng)
        # perturb around the optimum as well as sampling globally
        if rng.random() < 0.5:
            R = axis_angle(rng.normal(size=3), rng.uniform(0, 0.05)) @ T.rotation
            s = T.scale * rng.uniform(0.95, 1.05)
            t = gt.mean(0) - s * R @ pred.mean(0) + rng.normal(scale=5.0, size=3)
        assert ((s * pred @ R.T + t - gt) ** 2).sum() >= best - 1e-9


def test_pck_and_auc_hand_values():
    errs = np.array([100.0, 200.0])
    assert metrics._pck_curve(errs, [150.0]).tolist() == [0.5]
    assert metrics._pck_curve(errs, [0.0, 75.0, 150.0]).mean() == pytest.approx(1 / 6)
    # end to end the root joint is aligned, so it contributes an error of 0
    pred = np.array([[[0.0, 0.0, 0.0], [100.0, 0.0, 0.0], [0.0, 200.0, 0.0]]])
    gt = np.zeros_like(pred)
    assert pck(pred, gt, 150.0) == pytest.approx(2 / 3)
    assert pck(pred, gt, 0.0) == 0.0
    assert pck(pred, gt, math.inf) == 1.0
    assert auc(pred, gt, [0.0, 75.0, 150.0]) == pytest.approx((0 + 1 / 3 + 2 / 3) / 3)


def test_pck_strict_at_threshold():
    pred = np.array([[[0.0, 0.0, 0.0], [150.0, 0.0, 0.0]]])
    assert pck(pred, np.zeros_like(pred), 150.0) == 0.5  # root counts, the tie does not


def test_auc_empty_grid():
    with pytest.raises(ValueError):
        auc(np.zeros((1, 2, 3)), np.zeros((1, 2, 3)), [])


def test_default_grid():
    assert len(metrics.DEFAULT_AUC_GRID) == 31
    assert metrics.DEFAULT_AUC_GRID[0] == 0.0 and metrics.DEFAULT_AUC_GRID[-1] == 150.0


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_metrics_match_oracles(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_pose_pair(rng)
    assert abs(mpjpe_p1(pred, gt) - brute_mpjpe_p1(pred.tolist(), gt.tolist())) < 1e-9
    assert abs(mpjpe_p2(pred, gt) - brute_mpjpe_p2(pred, gt)) < 1e-9
    thr = float(rng.uniform(0, 300))
    assert abs(pck(pred, gt, thr) - brute_pck(pred.tolist(), gt.tolist(), thr)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_translation_and_similarity_invariance(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_pose_pair(rng)
    p1 = mpjpe_p1(pred, gt)
    assert abs(mpjpe_p1(pred + rng.normal(size=3) * 1e3, gt + rng.normal(size=3) * 1e3) - p1) < 1e-9
    R, s, t = random_similarity(rng)
    assert abs(mpjpe_p2(s * pred @ R.T + t, gt) - mpjpe_p2(pred, gt)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_p2_dominated_by_p1(seed):
    pred, gt = random_pose_pair(np.random.default_rng(seed))
    pred, gt = pred - pred[0], gt - gt[0]
    assert mpjpe_p2(pred, gt) <= mpjpe_p1(pred, gt) + 1e-9


@settings(max_examples=50, deadline=None)
@given(seeds)
def test_pck_monotone_and_auc_bounded(seed):
    rng = np.random.default_rng(seed)
    pairs = [random_pose_pair(rng) for _ in range(4)]
    preds, gts = np.stack([p for p, _ in pairs]), np.stack([g for _, g in pairs])
    grid = sorted(rng.uniform(0, 300, size=8))
    curve = [pck(preds, gts, t) for t in grid]
    assert all(a <= b for a, b in zip(curve, curve[1:]))
    a = auc(preds, gts, grid)
    assert min(curve) - 1e-12 <= a <= max(curve) + 1e-12


def test_horn_oracle_agrees_with_svd_transform():
    rng = np.random.default_rng(9)
    pred, gt = random_pose_pair(rng)
    R, s, t = horn_similarity(pred, gt)
    T = procrustes_align(pred, gt)
    assert np.allclose(R, T.rotation, atol=1e-9) and abs(s - T.scale) < 1e-9


# ------------------------------------------------------------ evaluation

def _labeled(n=30, J=16, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        p3 = rng.normal(scale=300, size=(J, 3))
        p3 -= p3[0]
        out.append(PoseSample(rng.normal(size=(J, 2)), p3, "S1", "ABC"[i % 3]))
    return out


def test_perfect_stub_scores_zero():
    samples = _labeled()
    rep = evaluate(None, samples, None, predictor=lambda s: np.stack([x.pose3d for x in s]))
    assert rep.mpjpe_p1 == 0.0 and rep.mpjpe_p2 < 1e-9
    assert rep.pck == 1.0 and rep.auc == pytest.approx(30 / 31)  # threshold 0 is strict


def test_per_action_weighted_mean():
    samples = _labeled(31)
    rng = np.random.default_rng(1)
    preds = np.stack([s.pose3d for s in samples]) + rng.normal(scale=40, size=(31, 16, 3))
    rep = evaluate(None, samples, None, predictor=lambda s: preds)
    assert sum(r["count"] for r in rep.per_action.values()) == rep.n_samples == 31
    for key in ("mpjpe_p1", "mpjpe_p2"):
        pooled = sum(r[key] * r["count"] for r in rep.per_action.values()) / 31
        assert abs(pooled - getattr(rep, key)) < 1e-9
    assert 0 <= rep.pck <= 1 and 0 <= rep.auc <= 1
    again = evaluate(None, samples, None, predictor=lambda s: preds)
    assert again.to_json() == rep.to_json()


def test_report_table_sorted():
    samples = _labeled(6)
    rep = score_poses(np.stack([s.pose3d for s in samples]), np.stack([s.pose3d for s in samples]),
                      ["b", "a", "c", "a", "b", "c"], EvalOptions())
    lines = rep.table().splitlines()
    assert [ln.split()[0] for ln in lines[2:5]] == ["a", "b", "c"] and lines[-1].startswith("ALL")
    assert "P#1" in lines[0] and "AUC" in lines[0]
    assert "AUC" not in rep.table(["p1"])


def test_evaluate_requires_labels():
    s = [PoseSample(np.zeros((16, 2)))]
    with pytest.raises(ValueError):
        evaluate(None, s, None, predictor=lambda x: np.zeros((1, 16, 3)))
