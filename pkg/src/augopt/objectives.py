"""Training objectives: the contrastive loss and the two adversarial roles.

The contrastive loss scores each transformed embedding against every
untransformed embedding in the batch with scaled dot products
(sim = <zm_i, z_j> / tau) and asks the matching index to win:

  loss = sum_i [ logsumexp_{j != i}(sim_ij) - sim_ii ]

The transform network wants this loss large (harder views) while also
keeping transformed images classifiable; the encoder wants it small.  Both
roles share one weighting configuration:

  transform objective  = -a0 * contrastive + a1 * bce(preds on transformed)
  encoder objective    =  a2 * contrastive + a3 * bce(preds on transformed)
                                           + a4 * bce(preds on originals)

Supervised terms apply only to the labeled rows of a batch; callers pass the
already-selected predictions and labels, or None when a weight is zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, matmul

__all__ = [
    "ObjectiveConfig",
    "contrastive_loss",
    "bce",
    "m_objective",
    "encoder_objective",
]

_BCE_EPS = 1e-7
_MASK_OFFSET = 1e30


@dataclass(frozen=True)
class ObjectiveConfig:
    """Loss weights a0..a4, the similarity temperature, and the choice of
    raw dot products (default) versus cosine similarity."""

    alpha0: float = 1.0
    alpha1: float = 0.0
    alpha2: float = 1.0
    alpha3: float = 0.0
    alpha4: float = 0.0
    tau: float = 1.0
    use_cosine: bool = False

    def __post_init__(self):
        for name in ("alpha0", "alpha1", "alpha2", "alpha3", "alpha4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")

    @property
    def alphas(self) -> tuple:
        return (self.alpha0, self.alpha1, self.alpha2, self.alpha3, self.alpha4)


def _row_normalize(z: Tensor) -> Tensor:
    sq = (z * z).sum(axis=1, keepdims=True)
    return z / (sq + 1e-12).sqrt()


def contrastive_loss(zm: Tensor, z: Tensor, cfg: ObjectiveConfig) -> Tensor:
    """Batch contrastive loss between transformed embeddings zm and
    untransformed embeddings z, both [B, D] with B >= 2.

    Negatives are the other untransformed embeddings only.  The excluded
    diagonal is pushed to -1e30 before the logsumexp, and the row max is
    subtracted as a constant for stability, so the result is finite for any
    finite input.
    """
    if zm.data.ndim != 2 or z.data.ndim != 2:
        raise ValueError(f"embeddings must be 2-d, got {zm.data.shape} and {z.data.shape}")
    if zm.data.shape != z.data.shape:
        raise ValueError(f"embedding shapes differ: {zm.data.shape} vs {z.data.shape}")
    B = zm.data.shape[0]
    if B < 2:
        raise ValueError(f"contrastive loss needs a batch of >= 2, got {B}")

    if cfg.use_cosine:
        zm = _row_normalize(zm)
        z = _row_normalize(z)
    sim = matmul(zm, z.transpose()) * (1.0 / cfg.tau)
    positives = sim.diagonal()

    dt = sim.data.dtype
    off_diag = sim - Tensor((np.eye(B) * _MASK_OFFSET).astype(dt))
    row_max = Tensor(off_diag.data.max(axis=1, keepdims=True))  # constant shift
    lse = (off_diag - row_max).exp().sum(axis=1, keepdims=True).log() + row_max
    return (lse.reshape(B) - positives).sum()


def bce(pred: Tensor, labels: Tensor) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to
    [1e-7, 1 - 1e-7] before the logs."""
    if pred.data.shape != labels.data.shape:
        raise ValueError(f"prediction shape {pred.data.shape} != labels {labels.data.shape}")
    y = labels.data
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    p = pred.clip(_BCE_EPS, 1.0 - _BCE_EPS)
    return -(labels * p.log() + (1.0 - labels) * (1.0 - p).log()).mean()


def _supervised_term(preds: Tensor | None, labels: Tensor | None, weight: float, role: str):
    if weight == 0:
        return None
    if preds is None or labels is None:
        raise ValueError(f"{role} weight is nonzero but predictions or labels are missing")
    return bce(preds, labels) * weight


def m_objective(zm: Tensor, z: Tensor, preds_m: Tensor | None,
                labels: Tensor | None, cfg: ObjectiveConfig) -> Tensor:
    """Objective minimized by the transform network: make views hard for the
    contrastive task while keeping them classifiable."""
    out = contrastive_loss(zm, z, cfg) * (-cfg.alpha0)
    sup = _supervised_term(preds_m, labels, cfg.alpha1, "transform supervision")
    return out if sup is None else out + sup


def encoder_objective(zm: Tensor, z: Tensor, preds_m: Tensor | None, preds: Tensor | None,
                      labels: Tensor | None, cfg: ObjectiveConfig) -> Tensor:
    """Objective minimized by the encoder, head, and classifier."""
    out = contrastive_loss(zm, z, cfg) * cfg.alpha2
    sup_m = _supervised_term(preds_m, labels, cfg.alpha3, "transformed-view supervision")
    sup = _supervised_term(preds, labels, cfg.alpha4, "original-view supervision")
    if sup_m is not None:
        out = out + sup_m
    if sup is not None:
        out = out + sup
    return out
