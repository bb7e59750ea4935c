"""Image- and video-level evaluation of hard label maps.

mIoU treats predicted-IGNORE pixels as misses (they stay in the union),
P-mIoU scores pseudo labels only where they exist and reports the
labeled fraction as coverage, and VPQ (stuff-only video panoptic
quality) scores per-class tubes over sliding windows of consecutive
frames, which is what makes temporally inconsistent errors visible.

All quality values are fractions in [0, 1]; multiply by 100 for the
usual percent scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadSpan, EmptyEvaluation, ShapeMismatch
from .tensor_io import IGNORE, LabelMap

DEFAULT_SPANS = (1, 2, 3, 4)


@dataclass
class ConfusionMatrix:
    """Pixel counts over GT-valid pixels: rows are GT classes, columns are
    predicted classes, with one extra column for predicted IGNORE.
    ``ignored`` counts GT-IGNORE pixels, which are skipped entirely."""

    counts: np.ndarray  # (K, K+1) int64
    ignored: int = 0

    @classmethod
    def empty(cls, num_classes: int) -> ConfusionMatrix:
        return cls(counts=np.zeros((num_classes, num_classes + 1), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def add(self, pred: LabelMap, gt: LabelMap) -> None:
        if pred.shape_hw != gt.shape_hw:
            raise ShapeMismatch(f"pred {pred.shape_hw} vs gt {gt.shape_hw}")
        K = self.num_classes
        valid = gt.data != IGNORE
        self.ignored += int((~valid).sum())
        g = gt.data[valid].astype(np.int64)
        p = pred.data[valid].astype(np.int64)
        if g.size and g.max() >= K:
            raise ValueError(f"gt label {g.max()} out of range for K={K}")
        if ((p >= K) & (p != IGNORE)).any():
            raise ValueError(f"pred label out of range for K={K}")
        p = np.where(p == IGNORE, K, p)
        binc = np.bincount(g * (K + 1) + p, minlength=K * (K + 1))
        self.counts += binc.reshape(K, K + 1)

    def merge(self, other: ConfusionMatrix) -> None:
        self.counts += other.counts
        self.ignored += other.ignored


def _iou_from_counts(counts: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN for inactive classes) and the mean over active ones."""
    K = counts.shape[0]
    diag = counts[:, :K].diagonal().astype(np.float64)
    gt_total = counts.sum(axis=1).astype(np.float64)
    pred_total = counts[:, :K].sum(axis=0).astype(np.float64)
    union = gt_total + pred_total - diag
    active = union > 0
    if not active.any():
        raise EmptyEvaluation("no class is present in either GT or prediction")
    per_class = np.full(K, np.nan)
    per_class[active] = diag[active] / union[active]
    return per_class, float(per_class[active].mean())


def confusion(preds: list[LabelMap], gts: list[LabelMap], num_classes: int) -> ConfusionMatrix:
    """Accumulate one confusion matrix over aligned prediction/GT lists."""
    if len(preds) != len(gts) or not preds:
        raise ShapeMismatch(f"{len(preds)} predictions vs {len(gts)} GT maps")
    cm = ConfusionMatrix.empty(num_classes)
    for p, g in zip(preds, gts):
        cm.add(p, g)
    return cm


def miou(
    preds: list[LabelMap], gts: list[LabelMap], num_classes: int
) -> tuple[np.ndarray, float]:
    """Mean IoU over classes present in GT or prediction.

    Predicted-IGNORE pixels count against the union (a pseudo label that
    abstains still misses GT pixels).  Returns (per-class IoU with NaN
    for absent classes, mean).
    """
    return _iou_from_counts(confusion(preds, gts, num_classes).counts)


def p_miou(
    pseudo: list[LabelMap], gts: list[LabelMap], num_classes: int
) -> tuple[float, float]:
    """(mIoU over labeled pixels only, coverage) for pseudo-label quality.

    Coverage is the labeled fraction among GT-valid pixels; comparisons
    between strategies are only fair at matched coverage.
    """
    cm = confusion(pseudo, gts, num_classes)
    K = num_classes
    gt_valid = int(cm.counts.sum())
    labeled = int(cm.counts[:, :K].sum())
    if gt_valid == 0 or labeled == 0:
        raise EmptyEvaluation("no labeled pixel overlaps valid GT")
    _, mean = _iou_from_counts(cm.counts[:, :K])
    return mean, labeled / gt_valid


@dataclass
class VpqAccumulator:
    """Window tallies for video panoptic quality with classes as stuff.

    For every span w in ``spans`` and every window of w consecutive
    frames (stride 1), each class's prediction tube is matched against
    its GT tube; a tube IoU strictly above 0.5 is a TP contributing its
    IoU, otherwise nonempty tubes count as FP/FN.  Tallies accumulate
    across windows and clips before any division.
    """

    num_classes: int
    spans: tuple[int, ...] = DEFAULT_SPANS
    tp: np.ndarray = field(init=False)
    fp: np.ndarray = field(init=False)
    fn: np.ndarray = field(init=False)
    iou_sum: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.spans or len(set(self.spans)) != len(self.spans):
            raise BadSpan(f"spans must be nonempty and unique, got {self.spans}")
        shape = (len(self.spans), self.num_classes)
        self.tp = np.zeros(shape, dtype=np.int64)
        self.fp = np.zeros(shape, dtype=np.int64)
        self.fn = np.zeros(shape, dtype=np.int64)
        self.iou_sum = np.zeros(shape, dtype=np.float64)

    def add_clip(self, preds: list[LabelMap], gts: list[LabelMap]) -> None:
        n = len(preds)
        if n != len(gts) or n == 0:
            raise ShapeMismatch(f"{len(preds)} predictions vs {len(gts)} GT maps")
        for w in self.spans:
            if w < 1 or w > n:
                raise BadSpan(f"span {w} outside 1..{n}")
        K = self.num_classes
        frame_cm = [confusion([p], [g], K).counts for p, g in zip(preds, gts)]
        for si, w in enumerate(self.spans):
            for start in range(n - w + 1):
                win = np.sum(frame_cm[start : start + w], axis=0)
                inter = win[:, :K].diagonal().astype(np.float64)
                gt_ct = win.sum(axis=1).astype(np.float64)
                pred_ct = win[:, :K].sum(axis=0).astype(np.float64)
                union = gt_ct + pred_ct - inter
                iou = np.divide(inter, union, out=np.zeros(K), where=union > 0)
                is_tp = (gt_ct > 0) & (pred_ct > 0) & (iou > 0.5)
                self.tp[si] += is_tp
                self.fp[si] += (pred_ct > 0) & ~is_tp
                self.fn[si] += (gt_ct > 0) & ~is_tp
                self.iou_sum[si] += np.where(is_tp, iou, 0.0)

    def merge(self, other: VpqAccumulator) -> None:
        if other.spans != self.spans or other.num_classes != self.num_classes:
            raise ShapeMismatch("cannot merge accumulators with different spans/classes")
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.iou_sum += other.iou_sum

    def result(self) -> tuple[list[float], float]:
        """Per-span quality (mean over active classes) and the span mean."""
        per_span = []
        for si in range(len(self.spans)):
            denom = self.tp[si] + 0.5 * self.fp[si] + 0.5 * self.fn[si]
            active = denom > 0
            if not active.any():
                raise EmptyEvaluation(f"span {self.spans[si]}: no active class")
            per_span.append(float((self.iou_sum[si][active] / denom[active]).mean()))
        return per_span, float(np.mean(per_span))

    def per_class_quality(self) -> np.ndarray:
        """(num_spans, K) quality values, NaN where a class was never active."""
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return np.divide(
            self.iou_sum, denom, out=np.full(denom.shape, np.nan), where=denom > 0
        )


def vpq_s(
    preds: list[LabelMap],
    gts: list[LabelMap],
    num_classes: int,
    spans: tuple[int, ...] = DEFAULT_SPANS,
) -> tuple[list[float], float]:
    """Video panoptic quality of one clip; see VpqAccumulator for pooling."""
    acc = VpqAccumulator(num_classes=num_classes, spans=tuple(spans))
    acc.add_clip(preds, gts)
    return acc.result()
