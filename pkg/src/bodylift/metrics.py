"""Pose-error protocols: root-aligned MPJPE, Procrustes MPJPE, PCK and AUC."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import NormStats, PoseSample, stack2d, stack3d

DEFAULT_PCK_THRESHOLD = 150.0
DEFAULT_AUC_GRID = tuple(float(t) for t in np.arange(0.0, 150.0 + 1e-9, 5.0))


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class SimilarityTransform:
    rotation: np.ndarray
    scale: float
    translation: np.ndarray

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return self.scale * pts @ self.rotation.T + self.translation


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.shape[-1] != 3:
        raise ValueError(f"pose shapes differ or are not (..., J, 3): {pred.shape} vs {gt.shape}")
    return pred, gt


def joint_errors_p1(pred: np.ndarray, gt: np.ndarray, root_index: int = 0) -> np.ndarray:
    """Per-joint distances (mm) after root alignment; works on (J,3) or (N,J,3)."""
    pred, gt = _check_pair(pred, gt)
    pred = pred - pred[..., root_index:root_index + 1, :]
    gt = gt - gt[..., root_index:root_index + 1, :]
    return np.linalg.norm(pred - gt, axis=-1)


def mpjpe_p1(pred: np.ndarray, gt: np.ndarray, root_index: int = 0) -> float:
    return float(joint_errors_p1(pred, gt, root_index).mean())


def procrustes_align(pred: np.ndarray, gt: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity transform taking ``pred`` onto ``gt`` (no reflections)."""
    pred, gt = _check_pair(pred, gt)
    if pred.ndim != 2 or pred.shape[0] < 3:
        raise AlignmentError("Procrustes alignment needs a single pose with at least 3 joints")
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    X, Y = pred - mu_p, gt - mu_g
    var_p = (X * X).sum()
    if var_p < 1e-12 or (Y * Y).sum() < 1e-12:
        raise AlignmentError("degenerate pose: joints coincide")
    # rank < 2 means the joints lie on a line and the rotation is not determined
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[1] < 1e-9 * sv[0]:
        raise AlignmentError("degenerate pose: joints are collinear")
    U, S, Vt = np.linalg.svd(Y.T @ X)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = U @ D @ Vt
    s = float((S * np.diag(D)).sum() / var_p)
    t = mu_g - s * R @ mu_p
    return SimilarityTransform(R, s, t)


def joint_errors_p2(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    pred, gt = _check_pair(pred, gt)
    if pred.ndim == 2:
        return np.linalg.norm(procrustes_align(pred, gt).apply(pred) - gt, axis=-1)
    return np.stack([joint_errors_p2(p, g) for p, g in zip(pred, gt)])


def mpjpe_p2(pred: np.ndarray, gt: np.ndarray) -> float:
    return float(joint_errors_p2(pred, gt).mean())


def pck(preds: np.ndarray, gts: np.ndarray, threshold_mm: float = DEFAULT_PCK_THRESHOLD,
        root_index: int = 0) -> float:
    """Fraction of joints whose root-aligned error is strictly below the threshold."""
    err = joint_errors_p1(preds, gts, root_index)
    return float((err < threshold_mm).mean())


def _pck_curve(err: np.ndarray, thresholds: Sequence[float]) -> np.ndarray:
    return np.array([(err < t).mean() for t in thresholds])


def auc(preds: np.ndarray, gts: np.ndarray, thresholds: Sequence[float] = DEFAULT_AUC_GRID,
        root_index: int = 0) -> float:
    """Mean PCK over a threshold grid."""
    if len(thresholds) == 0:
        raise ValueError("AUC needs a non-empty threshold grid")
    err = joint_errors_p1(preds, gts, root_index)
    return float(_pck_curve(err, thresholds).mean())


# ---------------------------------------------------------------- reports

@dataclass
class EvalOptions:
    root_index: int = 0
    pck_threshold: float = DEFAULT_PCK_THRESHOLD
    auc_thresholds: tuple[float, ...] = DEFAULT_AUC_GRID
    batch_size: int = 1024
    per_action: bool = True


@dataclass
class EvalReport:
    mpjpe_p1: float
    mpjpe_p2: float
    pck: float
    auc: float
    n_samples: int
    per_action: dict[str, dict] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"mpjpe_p1": self.mpjpe_p1, "mpjpe_p2": self.mpjpe_p2, "pck": self.pck,
                "auc": self.auc, "n_samples": self.n_samples,
                "per_action": {k: self.per_action[k] for k in sorted(self.per_action)}}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)

    def table(self, protocols: Sequence[str] = ("p1", "p2", "pck", "auc")) -> str:
        cols = [("P#1 (mm)", "mpjpe_p1", "{:10.2f}"), ("P#2 (mm)", "mpjpe_p2", "{:10.2f}"),
                ("PCK", "pck", "{:10.4f}"), ("AUC", "auc", "{:10.4f}")]
        keep = {"p1": "mpjpe_p1", "p2": "mpjpe_p2", "pck": "pck", "auc": "auc"}
        cols = [c for c in cols if c[1] in {keep[p] for p in protocols}]
        name_w = max([len("action")] + [len(a) for a in self.per_action] + [len("ALL")])
        head = "action".ljust(name_w) + "".join(f"{c[0]:>10}" for c in cols) + f"{'count':>8}"
        lines = [head, "-" * len(head)]
        for action in sorted(self.per_action):
            row = self.per_action[action]
            lines.append(action.ljust(name_w) + "".join(c[2].format(row[c[1]]) for c in cols)
                         + f"{row['count']:8d}")
        overall = self.to_json()
        lines.append("ALL".ljust(name_w) + "".join(c[2].format(overall[c[1]]) for c in cols)
                     + f"{self.n_samples:8d}")
        return "\n".join(lines)


def score_poses(pred_mm: np.ndarray, gt_mm: np.ndarray, actions: Sequence[str],
                options: EvalOptions | None = None) -> EvalReport:
    """Score (N, J, 3) predictions against ground truth, overall and per action."""
    opt = options or EvalOptions()
    e1 = joint_errors_p1(pred_mm, gt_mm, opt.root_index)
    e2 = joint_errors_p2(pred_mm, gt_mm)
    per_sample1 = e1.mean(axis=1)
    per_sample2 = e2.mean(axis=1)
    report = EvalReport(
        mpjpe_p1=float(per_sample1.mean()),
        mpjpe_p2=float(per_sample2.mean()),
        pck=float((e1 < opt.pck_threshold).mean()),
        auc=float(_pck_curve(e1, opt.auc_thresholds).mean()),
        n_samples=int(len(per_sample1)),
    )
    if opt.per_action:
        acts = np.asarray(list(actions))
        for a in sorted(set(acts.tolist())):
            m = acts == a
            report.per_action[a] = {
                "mpjpe_p1": float(per_sample1[m].mean()),
                "mpjpe_p2": float(per_sample2[m].mean()),
                "pck": float((e1[m] < opt.pck_threshold).mean()),
                "auc": float(_pck_curve(e1[m], opt.auc_thresholds).mean()),
                "count": int(m.sum()),
            }
    return report


def predict_mm(model, samples: Sequence[PoseSample], stats: NormStats, root_index: int = 0,
               batch_size: int = 1024) -> np.ndarray:
    """Run the eval-mode lifting path and return root-relative (N, J, 3) poses in mm."""
    if not samples:
        return np.zeros((0, 0, 3))
    J = samples[0].pose2d.shape[0]
    x = stats.normalize2d(stack2d(samples))
    outs = [model.predict(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
    pred = stats.denormalize3d(np.concatenate(outs)).reshape(-1, J, 3)
    return pred - pred[:, root_index:root_index + 1, :]


def evaluate(model, samples: Sequence[PoseSample], stats: NormStats,
             options: EvalOptions | None = None,
             predictor: Callable[[Sequence[PoseSample]], np.ndarray] | None = None) -> EvalReport:
    """Full evaluation: lift every sample, then apply every protocol.

    ``predictor`` replaces the model path (used to plug in oracle stubs).
    """
    opt = options or EvalOptions()
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    if any(s.pose3d is None for s in samples):
        raise ValueError("evaluation needs ground-truth 3D poses for every sample")
    J = samples[0].pose2d.shape[0]
    gt = stack3d(samples).reshape(-1, J, 3)
    if predictor is not None:
        pred = np.asarray(predictor(samples), dtype=float).reshape(-1, J, 3)
    else:
        pred = predict_mm(model, samples, stats, opt.root_index, opt.batch_size)
    return score_poses(pred, gt, [s.action for s in samples], opt)
