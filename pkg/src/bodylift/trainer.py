"""Training loops for the full model (supervised / semi-supervised) and the baseline."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tensor
from .checkpoint import save_checkpoint
from .data import NormStats, PoseSample, compute_norm_stats, stack2d, stack3d
from .losses import (LOG_COLUMNS, LossBreakdown, LossWeights, adversarial_generator_loss,
                     loss_discriminator, loss_est, loss_perceptual, loss_rec, total_semi)
from .metrics import EvalOptions, evaluate
from .model import BaselineNet, BodyConceptNet, build_model

log = logging.getLogger("bodylift.trainer")

MODES = ("supervised", "semi", "baseline")


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "supervised"
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 25
    seed: int = 0
    width: int = 1024
    dropout: float = 0.5
    num_joints: int = 16
    root_index: int = 0
    detach_reencoder: bool = False
    reencode_source: str = "generator"  # or "decoder"
    disc_steps: int = 1
    lr_decay: float | None = None  # per-epoch multiplicative factor; None disables
    patience: int = 10  # in evaluations
    eval_every: int = 1  # epochs
    checkpoint_path: str | None = None
    joint_set: str = ""

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        elif isinstance(self.weights, (list, tuple)):
            self.weights = LossWeights.from_sequence(self.weights)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 (batch norm)")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.reencode_source not in ("generator", "decoder"):
            raise ValueError("reencode_source must be 'generator' or 'decoder'")
        if self.disc_steps < 1:
            raise ValueError("disc_steps must be at least 1")

    def to_json(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d


@dataclass
class TrainLogEntry:
    step: int
    epoch: int
    losses: LossBreakdown
    disc_loss: float = 0.0
    val_mpjpe: float | None = None


@dataclass
class TrainResult:
    model: BodyConceptNet | BaselineNet
    stats: NormStats
    log: list[TrainLogEntry]
    best_val_mpjpe: float | None
    best_epoch: int | None
    steps: int


# ---------------------------------------------------------------- helpers

class _Streams:
    """Independent generators so optional work never shifts other draws."""

    def __init__(self, seed: int):
        children = np.random.SeedSequence(seed).spawn(5)
        self.init, self.shuffle, self.dropout, self.shuffle_ul, self.dropout_ul = (
            np.random.default_rng(c) for c in children)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    chunks = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    return [c for c in chunks if len(c) >= 2]


def _cycle_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    while True:
        yield from _epoch_batches(n, batch_size, rng)


def snapshot(model) -> list[np.ndarray]:
    arrays = [p.data.copy() for _, p in model.named_parameters()]
    for bn in model.batchnorms():
        arrays += [bn.state.running_mean.copy(), bn.state.running_var.copy()]
    return arrays


def restore(model, arrays: list[np.ndarray]) -> None:
    it = iter(arrays)
    for _, p in model.named_parameters():
        p.data = next(it).copy()
    for bn in model.batchnorms():
        bn.set_buffers(next(it), next(it))


def write_log_csv(entries: Sequence[TrainLogEntry], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS + ("epoch", "val_mpjpe"))
        for e in entries:
            b = e.losses
            w.writerow([e.step, repr(b.est), repr(b.perceptual_labeled), repr(b.rec),
                        repr(b.disc_unlabeled), repr(b.perceptual_unlabeled), repr(b.total),
                        repr(e.disc_loss), e.epoch, "" if e.val_mpjpe is None else repr(e.val_mpjpe)])


# ---------------------------------------------------------------- training core

class _Trainer:
    def __init__(self, labeled, val, unlabeled, cfg: TrainConfig):
        if not labeled:
            raise ValueError("no labeled training samples")
        if any(s.pose3d is None for s in labeled):
            raise ValueError("supervised training needs pose3d on every labeled sample")
        J = labeled[0].pose2d.shape[0]
        if J != cfg.num_joints:
            cfg = replace(cfg, num_joints=J)
        self.cfg = cfg
        self.val = list(val) if val else []
        self.streams = _Streams(cfg.seed)
        self.stats = compute_norm_stats(labeled)
        self.x2 = self.stats.normalize2d(stack2d(labeled))
        self.y3 = self.stats.normalize3d(stack3d(labeled))
        self.u2 = self.stats.normalize2d(stack2d(unlabeled)) if unlabeled else None
        kind = "baseline" if cfg.mode == "baseline" else "full"
        self.model = build_model(J, cfg.width, cfg.dropout, self.streams.init, kind=kind)
        self.opt = AdamState(lr=cfg.lr)
        self.disc_opt = AdamState(lr=cfg.lr)
        self.params = self.model.lifting_parameters()
        self.disc_params = self.model.discriminator_parameters()
        self.entries: list[TrainLogEntry] = []
        self.step = 0

    # one optimizer step on a labeled batch (plus an unlabeled batch in semi mode)
    def _step_full(self, idx: np.ndarray, idx_u: np.ndarray | None) -> tuple[LossBreakdown, float]:
        m, cfg, w = self.model, self.cfg, self.cfg.weights
        rng = self.streams.dropout
        x2, y3 = Tensor(self.x2[idx]), Tensor(self.y3[idx])
        f2d = m.encode2d(x2, True, rng)
        h3d = m.encode3d(y3, True, rng)
        rec = loss_rec(m.decode(h3d, True, rng), m.decode(f2d, True, rng), y3)
        est = loss_est(m.generate(x2, f2d, True, rng), y3)
        perc = loss_perceptual(f2d, h3d)

        adv = perc_ul = None
        disc_value = 0.0
        if idx_u is not None and (w.disc_unlabeled > 0 or w.perceptual_unlabeled > 0):
            rng_u = self.streams.dropout_ul
            xu = Tensor(self.u2[idx_u])
            fu = m.encode2d(xu, True, rng_u)
            if w.perceptual_unlabeled > 0:
                if cfg.reencode_source == "generator":
                    pu = m.generate(xu, fu, True, rng_u)
                else:
                    pu = m.decode(fu, True, rng_u)
                hu = m.encode3d(pu, True, rng_u, frozen=cfg.detach_reencoder)
                perc_ul = loss_perceptual(fu, hu)
            if w.disc_unlabeled > 0:
                real, fake = h3d.detach(), fu.detach()
                for _ in range(cfg.disc_steps):
                    ad.zero_grads(self.disc_params)
                    d_loss = loss_discriminator(m.discriminate(real), m.discriminate(fake))
                    if not math.isfinite(float(d_loss.data)):
                        raise TrainingAborted(f"non-finite discriminator loss at step {self.step}")
                    d_loss.backward()
                    ad.adam_step(self.disc_params, self.disc_opt)
                    disc_value = float(d_loss.data)
                adv = adversarial_generator_loss(m.discriminate(fu, frozen=True))

        total, breakdown = total_semi(est, perc, rec, adv, perc_ul, w)
        self._apply(total, breakdown)
        return breakdown, disc_value

    def _step_baseline(self, idx: np.ndarray) -> tuple[LossBreakdown, float]:
        rng = self.streams.dropout
        x2, y3 = Tensor(self.x2[idx]), Tensor(self.y3[idx])
        est = loss_est(self.model.generate(x2, True, rng), y3)
        total, breakdown = total_semi(est, None, None, None, None, self.cfg.weights)
        self._apply(total, breakdown)
        return breakdown, 0.0

    def _apply(self, total, breakdown: LossBreakdown) -> None:
        if not math.isfinite(breakdown.total):
            raise TrainingAborted(f"non-finite loss at step {self.step}: {breakdown}")
        ad.zero_grads(self.params)
        if isinstance(total, Tensor):
            total.backward()
        ad.adam_step(self.params, self.opt)

    def validate(self) -> float | None:
        if not self.val:
            return None
        opts = EvalOptions(root_index=self.cfg.root_index, per_action=False)
        return evaluate(self.model, self.val, self.stats, opts).mpjpe_p1

    def _save(self, path) -> None:
        save_checkpoint(self.model, self.stats, path, self.cfg.joint_set, self.cfg.root_index)

    def run(self) -> TrainResult:
        cfg = self.cfg
        unl = None
        if cfg.mode == "semi":
            unl = _cycle_batches(len(self.u2), cfg.batch_size, self.streams.shuffle_ul)
        best_val, best_epoch, best_state = None, None, None
        since_best = 0
        last_good = snapshot(self.model)
        for epoch in range(cfg.epochs):
            if cfg.lr_decay is not None:
                self.opt.lr = self.disc_opt.lr = cfg.lr * cfg.lr_decay ** epoch
            for idx in _epoch_batches(len(self.x2), cfg.batch_size, self.streams.shuffle):
                # unlabeled batches are drawn even when their losses are switched off
                idx_u = next(unl) if unl is not None else None
                try:
                    if cfg.mode == "baseline":
                        breakdown, d = self._step_baseline(idx)
                    else:
                        breakdown, d = self._step_full(idx, idx_u)
                except (TrainingAborted, FloatingPointError) as exc:
                    restore(self.model, last_good)
                    if cfg.checkpoint_path:
                        self._save(cfg.checkpoint_path)
                    raise TrainingAborted(str(exc)) from exc
                self.step += 1
                self.entries.append(TrainLogEntry(self.step, epoch, breakdown, d))
            last_good = snapshot(self.model)
            if self.val and (epoch + 1) % cfg.eval_every == 0:
                v = self.validate()
                self.entries[-1].val_mpjpe = v
                log.info("epoch %d step %d loss %.4f val MPJPE %.2f mm",
                         epoch + 1, self.step, self.entries[-1].losses.total, v)
                if best_val is None or v < best_val:
                    best_val, best_epoch, best_state = v, epoch + 1, snapshot(self.model)
                    since_best = 0
                    if cfg.checkpoint_path:
                        self._save(cfg.checkpoint_path)
                else:
                    since_best += 1
                    if since_best >= cfg.patience:
                        log.info("early stop after %d evaluations without improvement", since_best)
                        break
            elif self.entries:
                log.info("epoch %d step %d loss %.4f", epoch + 1, self.step, self.entries[-1].losses.total)
        if best_state is not None:
            restore(self.model, best_state)
        elif cfg.checkpoint_path:
            self._save(cfg.checkpoint_path)
        return TrainResult(self.model, self.stats, self.entries, best_val, best_epoch, self.step)


def train_supervised(labeled: Sequence[PoseSample], val: Sequence[PoseSample] | None,
                     cfg: TrainConfig) -> TrainResult:
    return _Trainer(labeled, val, None, replace(cfg, mode="supervised")).run()


def train_semi(labeled: Sequence[PoseSample], unlabeled: Sequence[PoseSample],
               val: Sequence[PoseSample] | None, cfg: TrainConfig) -> TrainResult:
    if not unlabeled:
        warnings.warn("semi-supervised training without unlabeled samples; falling back to supervised")
        return train_supervised(labeled, val, cfg)
    return _Trainer(labeled, val, unlabeled, replace(cfg, mode="semi")).run()


def train_baseline(labeled: Sequence[PoseSample], val: Sequence[PoseSample] | None,
                   cfg: TrainConfig) -> TrainResult:
    return _Trainer(labeled, val, None, replace(cfg, mode="baseline")).run()


def train(cfg: TrainConfig, labeled, val=None, unlabeled=None) -> TrainResult:
    if cfg.mode == "semi":
        return train_semi(labeled, unlabeled or [], val, cfg)
    if cfg.mode == "baseline":
        return train_baseline(labeled, val, cfg)
    return train_supervised(labeled, val, cfg)
