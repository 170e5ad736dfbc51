"""Built-in verification battery: gradients, metric oracles, checkpoint round trip."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses, metrics
from .autodiff import BatchNormState, Tensor
from .checkpoint import dumps_checkpoint, loads_checkpoint
from .data import NormStats
from .model import build_model

GRAD_TOL = 1e-4
METRIC_TOL = 1e-9


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# ---------------------------------------------------------------- gradients

def _grad_error(build: Callable[[list[Tensor]], Tensor], inputs: list[np.ndarray],
                fault: bool = False) -> float:
    """Max relative error over every input of a scalar-valued graph."""
    worst = 0.0
    for k in range(len(inputs)):
        def f(xk: Tensor, k=k):
            args = [xk if i == k else Tensor(a) for i, a in enumerate(inputs)]
            return build(args)
        if fault:
            worst = max(worst, _corrupted_check(f, inputs[k]))
        else:
            worst = max(worst, ad.grad_check(f, inputs[k]))
    return worst


def _corrupted_check(f, x):
    xt = Tensor(np.array(x, copy=True), requires_grad=True)
    f(xt).backward()
    analytic = xt.grad * 1.05
    numeric = ad.numeric_grad(f, x)
    return float(np.linalg.norm(analytic - numeric)) / max(1e-6, float(np.linalg.norm(analytic) + np.linalg.norm(numeric)))


def _projection(rng, shape):
    # random read-out so the checked scalar depends on every output entry differently
    return Tensor(rng.normal(size=shape))


def gradient_cases(n_configs: int = 20, seed: int = 0) -> list[tuple[str, Callable, list[np.ndarray]]]:
    """(name, graph builder, inputs) triples covering every layer and loss."""
    rng = np.random.default_rng(seed)
    cases = []
    for c in range(n_configs):
        B = int(rng.integers(2, 7))
        n = int(rng.integers(1, 6))
        m = int(rng.integers(1, 6))
        x = rng.normal(size=(B, n))
        W = rng.normal(size=(n, m))
        b = rng.normal(size=m)
        P = _projection(rng, (B, m))
        cases.append((f"linear[{c}]", lambda a, P=P: ad.sum_all(ad.mul(ad.linear(*a), P)), [x, W, b]))

        # a batch of two normalizes to +-1 exactly, leaving only roundoff to compare
        Bn = B + 2
        xb = rng.normal(size=(Bn, m)) * rng.uniform(0.5, 3.0) + rng.normal()
        gamma = rng.normal(size=m)
        beta = rng.normal(size=m)
        Pb = _projection(rng, (Bn, m))
        P2 = _projection(rng, (B, m))
        for train in (True, False):
            state = BatchNormState(rng.normal(size=m), rng.uniform(0.5, 2.0, size=m))

            def bn(a, Pb=Pb, state=state, train=train):
                # copy so repeated evaluations see the same running stats
                st = BatchNormState(state.running_mean.copy(), state.running_var.copy())
                return ad.sum_all(ad.mul(ad.batchnorm(a[0], a[1], a[2], st, train), Pb))
            cases.append((f"batchnorm[{'train' if train else 'eval'},{c}]", bn, [xb, gamma, beta]))

        rate = float(rng.uniform(0.1, 0.7))
        dseed = int(rng.integers(1 << 31))
        cases.append((f"dropout[{c}]",
                      lambda a, P2=P2, rate=rate, dseed=dseed: ad.sum_all(ad.mul(
                          ad.dropout(a[0], rate, True, np.random.default_rng(dseed)), P2)),
                      [rng.normal(size=(B, m))]))

        # keep relu/l1 inputs away from their kinks
        xr = rng.normal(size=(B, m))
        xr = np.where(np.abs(xr) < 1e-2, 0.5, xr)
        cases.append((f"relu[{c}]", lambda a, P2=P2: ad.sum_all(ad.mul(ad.relu(a[0]), P2)), [xr]))

        Pc = _projection(rng, (B, n + m))
        cases.append((f"concat[{c}]", lambda a, Pc=Pc: ad.sum_all(ad.mul(ad.concat(a), Pc)),
                      [rng.normal(size=(B, n)), rng.normal(size=(B, m))]))

        t1, t2 = rng.normal(size=(B, m)), rng.normal(size=(B, m))
        t2 = np.where(np.abs(t1 - t2) < 1e-2, t2 + 0.5, t2)
        cases.append((f"l2_loss[{c}]", lambda a: ad.l2_loss(a[0], a[1]), [t1, t2]))
        cases.append((f"l1_loss[{c}]", lambda a: ad.l1_loss(a[0], a[1]), [t1, t2]))
        cases.append((f"loss_est[{c}]", lambda a: losses.loss_est(a[0], a[1]), [t1, t2]))
        t3 = rng.normal(size=(B, m))
        t3 = np.where(np.abs(t3 - t2) < 1e-2, t3 + 0.5, t3)
        cases.append((f"loss_rec[{c}]", lambda a: losses.loss_rec(a[0], a[1], a[2]), [t1, t3, t2]))
        cases.append((f"loss_perceptual[{c}]", lambda a: losses.loss_perceptual(a[0], a[1]), [t1, t2]))
        lg = rng.normal(size=(B, 1)) * 3
        lg2 = rng.normal(size=(B, 1)) * 3
        cases.append((f"bce[{c}]", lambda a: ad.bce_with_logit(a[0], 1.0), [lg]))
        cases.append((f"loss_discriminator[{c}]", lambda a: losses.loss_discriminator(a[0], a[1]), [lg, lg2]))
        cases.append((f"adversarial_generator_loss[{c}]",
                      lambda a: losses.adversarial_generator_loss(a[0]), [lg]))
    return cases


def network_cases(n_configs: int = 4, seed: int = 1):
    """Gradient checks through whole networks (small widths keep them fast)."""
    rng = np.random.default_rng(seed)
    cases = []
    for c in range(n_configs):
        J = int(rng.integers(2, 5))
        w = 8
        B = 4
        model = build_model(J, w, 0.5, np.random.default_rng(c))
        for bn in model.batchnorms():
            bn.set_buffers(rng.normal(size=w) * 0.1, rng.uniform(0.5, 2.0, size=w))
        P = _projection(rng, (B, w))
        P3 = _projection(rng, (B, 3 * J))
        x2 = rng.normal(size=(B, 2 * J))
        x3 = rng.normal(size=(B, 3 * J))
        f = rng.normal(size=(B, w))
        dseed = int(rng.integers(1 << 31))
        cases += [
            (f"encode2d[eval,{c}]", lambda a, m=model, P=P: ad.sum_all(ad.mul(m.encode2d(a[0]), P)), [x2]),
            (f"encode3d[eval,{c}]", lambda a, m=model, P=P: ad.sum_all(ad.mul(m.encode3d(a[0]), P)), [x3]),
            (f"decode[eval,{c}]", lambda a, m=model, P3=P3: ad.sum_all(ad.mul(m.decode(a[0]), P3)), [f]),
            (f"generate[eval,{c}]",
             lambda a, m=model, P3=P3: ad.sum_all(ad.mul(m.generate(a[0], a[1]), P3)), [x2, f]),
            (f"discriminate[{c}]", lambda a, m=model: ad.sum_all(m.discriminate(a[0])), [f]),
            # train mode with a replayed dropout mask; running stats restored each call
            (f"encode2d[train,{c}]",
             lambda a, m=model, P=P, dseed=dseed: _train_mode_eval(
                 m, lambda: ad.sum_all(ad.mul(m.encode2d(a[0], True, np.random.default_rng(dseed)), P))),
             [x2]),
        ]
    return cases


def _train_mode_eval(model, fn):
    saved = [(bn.state.running_mean.copy(), bn.state.running_var.copy()) for bn in model.batchnorms()]
    out = fn()
    for bn, (mu, var) in zip(model.batchnorms(), saved):
        bn.set_buffers(mu, var)
    return out


def gradient_battery(n_configs: int = 20, fault: bool = False) -> list[CheckResult]:
    results = []
    groups: dict[str, float] = {}
    t0 = time.perf_counter()
    for i, (name, build, inputs) in enumerate(gradient_cases(n_configs) + network_cases()):
        err = _grad_error(build, inputs, fault=fault and i == 0)
        key = name.split("[")[0]
        groups[key] = max(groups.get(key, 0.0), err)
    dt = time.perf_counter() - t0
    for key, err in groups.items():
        results.append(CheckResult(f"grad {key}", err < GRAD_TOL, f"max rel err {err:.2e}"))
    results.append(CheckResult("grad battery runtime", dt < 60.0, f"{dt:.1f} s"))
    return results


# ---------------------------------------------------------------- metric oracles

def brute_mpjpe_p1(pred, gt, root=0) -> float:
    total, count = 0.0, 0
    for j in range(len(pred)):
        d = [(pred[j][k] - pred[root][k]) - (gt[j][k] - gt[root][k]) for k in range(3)]
        total += math.sqrt(sum(c * c for c in d))
        count += 1
    return total / count


def horn_similarity(pred: np.ndarray, gt: np.ndarray):
    """Closed-form absolute orientation via unit quaternions (no SVD).

    Returns (R, s, t) minimizing sum |s R p + t - g|^2 over rotations.
    """
    mp, mg = pred.mean(axis=0), gt.mean(axis=0)
    X, Y = pred - mp, gt - mg
    S = X.T @ Y
    Sxx, Sxy, Sxz = S[0]
    Syx, Syy, Syz = S[1]
    Szx, Szy, Szz = S[2]
    N = np.array([
        [Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx],
        [Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz],
        [Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy],
        [Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz],
    ])
    vals, vecs = np.linalg.eigh(N)
    q0, qx, qy, qz = vecs[:, -1]
    R = np.array([
        [q0 * q0 + qx * qx - qy * qy - qz * qz, 2 * (qx * qy - q0 * qz), 2 * (qx * qz + q0 * qy)],
        [2 * (qy * qx + q0 * qz), q0 * q0 - qx * qx + qy * qy - qz * qz, 2 * (qy * qz - q0 * qx)],
        [2 * (qz * qx - q0 * qy), 2 * (qz * qy + q0 * qx), q0 * q0 - qx * qx - qy * qy + qz * qz],
    ])
    s = vals[-1] / float((X * X).sum())
    t = mg - s * R @ mp
    return R, s, t


def brute_mpjpe_p2(pred, gt) -> float:
    R, s, t = horn_similarity(np.asarray(pred, float), np.asarray(gt, float))
    aligned = s * np.asarray(pred) @ R.T + t
    return float(np.mean([math.dist(a, g) for a, g in zip(aligned.tolist(), np.asarray(gt).tolist())]))


def brute_pck(pred, gt, thr, root=0) -> float:
    hits = n = 0
    for j in range(len(pred)):
        d = [(pred[j][k] - pred[root][k]) - (gt[j][k] - gt[root][k]) for k in range(3)]
        hits += math.sqrt(sum(c * c for c in d)) < thr
        n += 1
    return hits / n


def random_pose_pair(rng, J=16):
    gt = rng.normal(scale=300.0, size=(J, 3))
    pred = gt + rng.normal(scale=rng.uniform(5, 120), size=(J, 3))
    return pred, gt


def random_similarity(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    a, b, c, d = q
    R = np.array([[a*a+b*b-c*c-d*d, 2*(b*c-a*d), 2*(b*d+a*c)],
                  [2*(b*c+a*d), a*a-b*b+c*c-d*d, 2*(c*d-a*b)],
                  [2*(b*d-a*c), 2*(c*d+a*b), a*a-b*b-c*c+d*d]])
    return R, float(rng.uniform(0.3, 3.0)), rng.normal(scale=500.0, size=3)


def metric_battery(n_pairs: int = 1000, seed: int = 0, fault: bool = False) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst = {"p1": 0.0, "p2": 0.0, "pck": 0.0, "auc": 0.0, "p2_exact": 0.0}
    grid = metrics.DEFAULT_AUC_GRID
    for _ in range(n_pairs):
        pred, gt = random_pose_pair(rng)
        worst["p1"] = max(worst["p1"], abs(metrics.mpjpe_p1(pred, gt) - brute_mpjpe_p1(pred.tolist(), gt.tolist())))
        p2 = metrics.mpjpe_p2(pred, gt) * (1.01 if fault else 1.0)
        worst["p2"] = max(worst["p2"], abs(p2 - brute_mpjpe_p2(pred, gt)))
        worst["pck"] = max(worst["pck"], abs(metrics.pck(pred, gt, 150.0) - brute_pck(pred.tolist(), gt.tolist(), 150.0)))
        bauc = sum(brute_pck(pred.tolist(), gt.tolist(), t) for t in grid) / len(grid)
        worst["auc"] = max(worst["auc"], abs(metrics.auc(pred, gt, grid) - bauc))
        R, s, t = random_similarity(rng)
        worst["p2_exact"] = max(worst["p2_exact"], metrics.mpjpe_p2(s * gt @ R.T + t, gt))
    return [CheckResult(f"metric {k}", v < METRIC_TOL, f"max |diff| {v:.2e} over {n_pairs} pairs")
            for k, v in worst.items()]


# ---------------------------------------------------------------- persistence

def checkpoint_roundtrip(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    J, w = 16, 16
    model = build_model(J, w, 0.5, np.random.default_rng(seed))
    for bn in model.batchnorms():
        bn.set_buffers(rng.normal(size=w), rng.uniform(0.5, 2, size=w))
    stats = NormStats(rng.normal(size=2 * J), rng.uniform(1, 2, 2 * J),
                      rng.normal(size=3 * J), rng.uniform(1, 2, 3 * J))
    blob = dumps_checkpoint(model, stats, "selfcheck", 0)
    loaded = loads_checkpoint(blob)
    same = all(np.array_equal(p.data, q.data) for (_, p), (_, q)
               in zip(model.named_parameters(), loaded.model.named_parameters()))
    x = rng.normal(size=(8, 2 * J))
    same_out = np.array_equal(model.predict(x), loaded.model.predict(x))
    try:
        loads_checkpoint(blob[:-10])
        rejects = False
    except ValueError:
        rejects = True
    return [CheckResult("checkpoint round trip", same and same_out, "bit-exact" if same and same_out else "mismatch"),
            CheckResult("checkpoint rejects truncation", rejects, "CRC error raised" if rejects else "accepted")]


def run_selfcheck(fault: bool = False, n_pairs: int = 1000) -> list[CheckResult]:
    results = []
    for name, fn in (("gradients", lambda: gradient_battery(fault=fault)),
                     ("metrics", lambda: metric_battery(n_pairs, fault=fault)),
                     ("checkpoint", checkpoint_roundtrip)):
        t0 = time.perf_counter()
        part = fn()
        dt = time.perf_counter() - t0
        for r in part:
            r.seconds = dt / len(part)
        results.extend(part)
    return results


def format_results(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  status  detail"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {'PASS' if r.passed else 'FAIL':6}  {r.detail}")
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
