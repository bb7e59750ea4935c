"""Temporal aggregation of soft maps with occlusion-masked warped neighbors.

Each frame's prediction is averaged with the flow-warped predictions of
its adjacent frames, but only at pixels where the warp is trustworthy
(occlusion mask 1).  Neighbors always contribute their original
predictions, never previously aggregated ones, so frames can be
processed in any order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .flow_warp import DEFAULT_ALPHA_OCC, DEFAULT_OCC_TH, bilinear_warp, occlusion_mask
from .tensor_io import SUM_TOL, ClipManifest, FlowField, ImageFrame, SoftSegMap


@dataclass(frozen=True)
class Neighbor:
    """A neighbor frame's prediction, image, and the flow (target -> neighbor)."""

    pred: SoftSegMap
    img: ImageFrame
    flow: FlowField


@dataclass(frozen=True)
class AggregatedClip:
    """Aggregated soft maps plus per-frame support counts (1 + visible neighbors)."""

    frames: tuple[SoftSegMap, ...]
    support: tuple[np.ndarray, ...]


def aggregate_frame(
    target: SoftSegMap,
    target_img: ImageFrame,
    neighbors: list[Neighbor],
    alpha_occ: float = DEFAULT_ALPHA_OCC,
    th: float = DEFAULT_OCC_TH,
) -> tuple[SoftSegMap, np.ndarray]:
    """Average the target prediction with visible warped neighbor predictions.

    Per pixel the output is (P + sum of visible warped neighbor maps) /
    (1 + number of visible neighbors); with no visible neighbor the
    target passes through bit-identically.  Warped maps are renormalized
    per pixel only where bilinear border bleed pushed their channel sum
    off 1 by more than SUM_TOL.  Returns the fused map and the float32
    support count.
    """
    hw = target.shape_hw
    if target_img.shape_hw != hw:
        raise ShapeMismatch(f"target image {target_img.shape_hw} vs pred {hw}")
    # neighbors accumulate separately and join the target in one addition,
    # so with <= 2 neighbors the result is independent of their order
    nacc = np.zeros(target.data.shape, dtype=np.float64)
    support = np.ones(hw, dtype=np.float64)
    for nb in neighbors:
        if nb.pred.num_classes != target.num_classes or nb.pred.shape_hw != hw:
            raise ShapeMismatch(f"neighbor pred {nb.pred.data.shape} vs target {target.data.shape}")
        mask = occlusion_mask(target_img, nb.img, nb.flow, alpha_occ, th).data.astype(bool)
        warped, _ = bilinear_warp(nb.pred.data, nb.flow.data)
        w = warped.astype(np.float64)
        sums = w.sum(axis=0)
        renorm = mask & (np.abs(sums - 1.0) > SUM_TOL) & (sums > 0.0)
        w = np.where(renorm[None], w / np.where(sums > 0.0, sums, 1.0)[None], w)
        nacc += np.where(mask[None], w, 0.0)
        support += mask
    fused = ((target.data.astype(np.float64) + nacc) / support[None]).astype(np.float32)
    return SoftSegMap(fused, frame_id=target.frame_id), support.astype(np.float32)


def aggregate_clip(
    clip: ClipManifest,
    alpha_occ: float = DEFAULT_ALPHA_OCC,
    th: float = DEFAULT_OCC_TH,
) -> AggregatedClip:
    """Aggregate every frame of a clip with its existing +-1 neighbors.

    First/last frames use their single neighbor.  Raises MissingFile if
    the manifest lacks a flow toward an existing neighbor.
    """
    n = len(clip)
    frames: list[SoftSegMap] = []
    support: list[np.ndarray] = []
    for i in range(n):
        target = clip.load_pred(i)
        target_img = clip.load_image(i)
        neighbors = []
        for off in (-1, 1):
            j = i + off
            if 0 <= j < n:
                neighbors.append(
                    Neighbor(pred=clip.load_pred(j), img=clip.load_image(j), flow=clip.load_flow(i, off))
                )
        fused, sup = aggregate_frame(target, target_img, neighbors, alpha_occ, th)
        frames.append(fused)
        support.append(sup)
    return AggregatedClip(frames=tuple(frames), support=tuple(support))
