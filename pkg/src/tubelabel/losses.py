"""Supervised loss values and analytic gradients.

Covers per-frame cross-entropy, the dice coefficient, the tube matching
loss over short frame tubes, and the combined self-training objective.
Everything is computed in float64 and returns plain floats/arrays; the
gradients are analytic so no autodiff framework is needed (finite
differences serve only as a test oracle).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyLabel, ShapeMismatch
from .tensor_io import IGNORE, LabelMap, SoftSegMap

LOG_CLAMP = 1e-12
"""Probabilities are clamped below at this value before taking logs."""


@dataclass(frozen=True)
class LossConfig:
    """Objective weights.  The regularizer itself is out of scope, so its
    weight multiplies a zero term; it is kept so the objective shape stays
    recognizable."""

    lambda_seg_s: float = 1.0
    lambda_seg_t: float = 1.0
    lambda_reg: float = 0.0
    tube_length: int = 2

    def __post_init__(self):
        if min(self.lambda_seg_s, self.lambda_seg_t, self.lambda_reg) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.tube_length < 1:
            raise ValueError("tube_length must be >= 1")


@dataclass(frozen=True)
class TubePair:
    """Aligned prediction and ground-truth tubes (short frame sequences)."""

    pred: tuple[SoftSegMap, ...]
    gt: tuple[LabelMap, ...]

    def __post_init__(self):
        if not self.pred or len(self.pred) != len(self.gt):
            raise ShapeMismatch(
                f"tube lengths differ: {len(self.pred)} pred vs {len(self.gt)} gt"
            )
        k, hw = self.pred[0].num_classes, self.pred[0].shape_hw
        for m in self.pred:
            if m.num_classes != k or m.shape_hw != hw:
                raise ShapeMismatch("prediction tube frames disagree in shape")
        for m in self.gt:
            if m.shape_hw != hw:
                raise ShapeMismatch("gt tube frames disagree in shape")

    @property
    def num_classes(self) -> int:
        return self.pred[0].num_classes


def cross_entropy(pred: SoftSegMap, gt: LabelMap) -> float:
    """Mean of -log p(gt label) over non-IGNORE pixels."""
    if pred.shape_hw != gt.shape_hw:
        raise ShapeMismatch(f"pred {pred.shape_hw} vs gt {gt.shape_hw}")
    labels = gt.data
    valid = labels != IGNORE
    if not valid.any():
        raise EmptyLabel("all pixels are IGNORE")
    idx = labels[valid].astype(np.int64)
    if idx.max() >= pred.num_classes:
        raise ValueError(f"label {idx.max()} out of range for K={pred.num_classes}")
    ys, xs = np.nonzero(valid)
    p = pred.data[idx, ys, xs].astype(np.float64)
    return float(-np.log(np.maximum(p, LOG_CLAMP)).mean())


def dice(p: np.ndarray, q: np.ndarray) -> float:
    """2*sum(pq) / (sum(p^2) + sum(q^2)); empty-vs-empty (0/0) counts as 1."""
    if p.shape != q.shape:
        raise ShapeMismatch(f"dice operands {p.shape} vs {q.shape}")
    p = p.astype(np.float64, copy=False)
    q = q.astype(np.float64, copy=False)
    num = 2.0 * float((p * q).sum())
    den = float((p * p).sum() + (q * q).sum())
    if den == 0.0:
        return 1.0
    return num / den


def tube_loss_arrays(pred: np.ndarray, gt: np.ndarray) -> tuple[float, np.ndarray]:
    """tube_matching_loss on raw arrays: pred (L, K, H, W) any float dtype,
    gt (L, H, W) uint16.  Exposed so gradient checks can evaluate the loss
    at float64 perturbations without a float32 round trip.
    """
    pred = pred.astype(np.float64, copy=False)
    K = pred.shape[1]
    valid = gt != IGNORE
    grad = np.zeros_like(pred)
    loss = 0.0
    for k in range(K):
        p = pred[:, k][valid]
        q = (gt[valid] == k).astype(np.float64)
        S = float(p @ q)
        D = float(p @ p + q @ q)
        if D == 0.0:
            continue
        loss += 1.0 - 2.0 * S / D
        g = np.zeros(valid.shape, dtype=np.float64)
        g[valid] = (4.0 * S * p - 2.0 * q * D) / (D * D)
        grad[:, k] = g
    return float(loss), grad


def tube_matching_loss(t: TubePair) -> tuple[float, list[np.ndarray]]:
    """Sum over classes of (1 - dice) between prediction and one-hot GT tubes.

    Returns the loss and, per tube frame, the float64 gradient array of
    shape (K, H, W).  IGNORE pixels are excluded from every sum and get a
    zero gradient.  For a class k with pooled S = sum(p*q) and
    D = sum(p^2) + sum(q^2), each valid entry contributes
    d(1 - dice)/dp = (4*S*p - 2*q*D) / D^2; classes with D = 0 count as
    dice 1 and contribute nothing.
    """
    pred = np.stack([m.data for m in t.pred])
    gt = np.stack([m.data for m in t.gt])
    loss, grad = tube_loss_arrays(pred, gt)
    return loss, [grad[i] for i in range(len(t.pred))]


def vst_objective(
    pred: list[SoftSegMap], refined: list[LabelMap], cfg: LossConfig | None = None
) -> float:
    """Self-training objective: summed cross-entropy of each frame against
    its refined pseudo labels.  Frames whose labels are entirely IGNORE
    contribute zero; the regularizer weight multiplies a zero placeholder.
    """
    if cfg is None:
        cfg = LossConfig()
    if len(pred) != len(refined):
        raise ShapeMismatch(f"{len(pred)} predictions vs {len(refined)} label maps")
    total = 0.0
    for p, r in zip(pred, refined):
        try:
            total += cross_entropy(p, r)
        except EmptyLabel:
            continue
    return total + cfg.lambda_reg * 0.0
