"""Backward warping along a flow field and occlusion-mask computation.

Soft maps are warped with bilinear interpolation, hard label maps with
nearest-neighbor sampling (categorical ids must not be blended).  Samples
falling outside the grid use zero padding and are reported out-of-bounds
so callers can exclude them from aggregation and consensus checks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch
from .tensor_io import IGNORE, FlowField, ImageFrame, LabelMap, SoftSegMap

DEFAULT_OCC_TH = 0.7
"""Cutoff on the soft occlusion value above which a warp counts as visible."""

DEFAULT_ALPHA_OCC = 50.0
"""Decay rate of the soft occlusion value with warping error."""


@dataclass(frozen=True)
class OcclusionMask:
    """Validity of a warp: data = (soft > th) and in-bounds, soft = raw values."""

    data: np.ndarray  # (H, W) uint8 in {0, 1}
    soft: np.ndarray  # (H, W) float32 in (0, 1]


def _sample_coords(flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Absolute (x, y) source coordinates per pixel, in float64."""
    _, H, W = flow.shape
    gy, gx = np.mgrid[0:H, 0:W]
    x = gx + flow[0].astype(np.float64)
    y = gy + flow[1].astype(np.float64)
    return x, y


def bilinear_warp(src: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly sample a (C, H, W) array at positions displaced by ``flow``.

    Returns the warped array (float32) and a boolean (H, W) mask that is
    True where the bilinear support is not fully inside the grid.  Out-of-
    grid corners contribute zero.
    """
    if src.ndim != 3 or flow.shape[1:] != src.shape[1:]:
        raise ShapeMismatch(f"src {src.shape} vs flow {flow.shape}")
    C, H, W = src.shape
    x, y = _sample_coords(flow)
    x0 = np.floor(x)
    y0 = np.floor(y)
    wx = x - x0
    wy = y - y0
    out = np.zeros((C, H, W), dtype=np.float64)
    src64 = src.astype(np.float64)
    for dy, dx, wgt in (
        (0, 0, (1.0 - wx) * (1.0 - wy)),
        (0, 1, wx * (1.0 - wy)),
        (1, 0, (1.0 - wx) * wy),
        (1, 1, wx * wy),
    ):
        cx = (x0 + dx).astype(np.int64)
        cy = (y0 + dy).astype(np.int64)
        valid = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
        cxc = np.clip(cx, 0, W - 1)
        cyc = np.clip(cy, 0, H - 1)
        out += np.where(valid, wgt, 0.0) * src64[:, cyc, cxc]
    oob = ~((x >= 0.0) & (x <= W - 1.0) & (y >= 0.0) & (y <= H - 1.0))
    return out.astype(np.float32), oob


def nearest_warp(src: np.ndarray, flow: np.ndarray, fill: int = IGNORE) -> np.ndarray:
    """Nearest-neighbor sample a (H, W) integer array; out-of-bounds -> fill."""
    if src.ndim != 2 or flow.shape[1:] != src.shape:
        raise ShapeMismatch(f"src {src.shape} vs flow {flow.shape}")
    H, W = src.shape
    x, y = _sample_coords(flow)
    cx = np.floor(x + 0.5).astype(np.int64)
    cy = np.floor(y + 0.5).astype(np.int64)
    valid = (cx >= 0) & (cx < W) & (cy >= 0) & (cy < H)
    out = np.full((H, W), fill, dtype=src.dtype)
    out[valid] = src[cy[valid], cx[valid]]
    return out


def warp_soft(src: SoftSegMap, flow: FlowField) -> SoftSegMap:
    """Warp a soft map onto the flow's "from" frame.

    The result may violate the sum-to-1 invariant near borders (zero
    padding); callers renormalize or mask out-of-bounds pixels.
    """
    warped, _ = bilinear_warp(src.data, flow.data)
    return SoftSegMap(warped, frame_id=flow.direction[0])


def warp_labels(src: LabelMap, flow: FlowField) -> LabelMap:
    """Warp a label map onto the flow's "from" frame; out-of-bounds -> IGNORE."""
    return LabelMap(nearest_warp(src.data, flow.data, fill=IGNORE))


def occlusion_mask(
    target_img: ImageFrame,
    neighbor_img: ImageFrame,
    flow: FlowField,
    alpha_occ: float = DEFAULT_ALPHA_OCC,
    th: float = DEFAULT_OCC_TH,
) -> OcclusionMask:
    """Occlusion mask from warping error between target and warped neighbor.

    soft(p) = exp(-alpha_occ * ||target(p) - warp(neighbor)(p)||_2), the
    norm taken over RGB channels; data = (soft > th) and not out-of-bounds.
    """
    if target_img.shape_hw != neighbor_img.shape_hw or target_img.shape_hw != flow.shape_hw:
        raise ShapeMismatch(
            f"target {target_img.data.shape} / neighbor {neighbor_img.data.shape} "
            f"/ flow {flow.data.shape}"
        )
    if alpha_occ <= 0:
        raise ValueError(f"alpha_occ must be > 0, got {alpha_occ}")
    warped, oob = bilinear_warp(neighbor_img.data, flow.data)
    diff = target_img.data.astype(np.float64) - warped.astype(np.float64)
    err = np.sqrt((diff * diff).sum(axis=0))
    # exp underflows for extreme alpha_occ * err; keep soft strictly positive
    soft = np.maximum(np.exp(-alpha_occ * err), np.finfo(np.float32).tiny)
    data = ((soft > th) & ~oob).astype(np.uint8)
    return OcclusionMask(data=data, soft=soft.astype(np.float32))
