"""Training objectives for supervised and semi-supervised lifting.

Reductions: estimation and reconstruction losses average the per-sample
Euclidean norm over the batch; the perceptual loss averages the absolute
difference over batch and feature width.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from . import autodiff as ad
from .autodiff import Tensor

LOG_COLUMNS = ("step", "est", "perc_l", "rec", "disc_ul", "perc_ul", "total", "disc_loss")


@dataclass(frozen=True)
class LossWeights:
    est: float = 10.0
    perceptual: float = 1.0
    rec: float = 1.0
    disc_unlabeled: float = 0.1
    perceptual_unlabeled: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")

    def as_tuple(self) -> tuple[float, ...]:
        return (self.est, self.perceptual, self.rec, self.disc_unlabeled, self.perceptual_unlabeled)

    @classmethod
    def from_sequence(cls, values) -> "LossWeights":
        return cls(*[float(v) for v in values])


@dataclass
class LossBreakdown:
    est: float = 0.0
    perceptual_labeled: float = 0.0
    rec: float = 0.0
    disc_unlabeled: float = 0.0
    perceptual_unlabeled: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


def loss_est(pred: Tensor, gt: Tensor) -> Tensor:
    return ad.mean_row_norm(pred, gt)


def loss_rec(recon_from_h3d: Tensor, recon_from_f2d: Tensor, gt: Tensor) -> Tensor:
    """Both decoder reconstructions are supervised against the same ground truth."""
    return ad.add(ad.mean_row_norm(recon_from_h3d, gt), ad.mean_row_norm(recon_from_f2d, gt))


def loss_perceptual(f2d: Tensor, h3d: Tensor) -> Tensor:
    return ad.l1_loss(f2d, h3d)


def loss_discriminator(real_logits: Tensor, fake_logits: Tensor) -> Tensor:
    """Discriminator objective: 3D-encoder features are real, 2D-encoder features fake."""
    return ad.add(ad.bce_with_logit(real_logits, 1.0), ad.bce_with_logit(fake_logits, 0.0))


def adversarial_generator_loss(fake_logits: Tensor) -> Tensor:
    """Non-saturating encoder objective ``-E[log D(f2d)]``."""
    return ad.bce_with_logit(fake_logits, 1.0)


def _weighted(terms: list[tuple[float, Tensor | float | None]]):
    total = None
    for w, t in terms:
        if t is None or w == 0.0:
            continue
        term = ad.scale(t, w) if isinstance(t, Tensor) else w * float(t)
        if total is None:
            total = term
        elif isinstance(total, Tensor) or isinstance(term, Tensor):
            total = ad.add(total if isinstance(total, Tensor) else Tensor(total),
                           term if isinstance(term, Tensor) else Tensor(term))
        else:
            total = total + term
    return 0.0 if total is None else total


def _val(t) -> float:
    if t is None:
        return 0.0
    return float(t.data) if isinstance(t, Tensor) else float(t)


def total_supervised(est, perceptual, rec, weights: LossWeights):
    """Labeled objective ``l1*est + l2*perceptual + l3*rec``.

    Components may be tensors (the total is then a differentiable tensor)
    or plain floats. Returns ``(total, breakdown)``.
    """
    return total_semi(est, perceptual, rec, None, None, weights)


def total_semi(est, perceptual, rec, disc_unlabeled, perceptual_unlabeled, weights: LossWeights):
    """Five-term objective; unlabeled terms passed as ``None`` contribute nothing."""
    w = weights
    total = _weighted([(w.est, est), (w.perceptual, perceptual), (w.rec, rec),
                       (w.disc_unlabeled, disc_unlabeled),
                       (w.perceptual_unlabeled, perceptual_unlabeled)])
    breakdown = LossBreakdown(_val(est), _val(perceptual), _val(rec), _val(disc_unlabeled),
                              _val(perceptual_unlabeled), _val(total))
    return total, breakdown
