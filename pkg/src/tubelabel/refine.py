"""Temporal-consensus refinement of pseudo labels.

Two complementary rules against a flow-warped reference label map:

* cut-out drops labels that disagree with a visible warped reference
  (noise removal);
* fill-in copies visible warped reference labels into IGNORE pixels
  (coverage propagation).

Where no trustworthy reference exists (occluded, out of bounds, or the
reference itself is IGNORE), cut-out keeps the current label by default;
consensus is only enforceable where a valid reference exists.  The
strict variant drops every pixel lacking visible agreement instead.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeMismatch
from .flow_warp import OcclusionMask, warp_labels
from .tensor_io import IGNORE, FlowField, LabelMap


def _warp_reference(
    current: LabelMap, reference: LabelMap, flow: FlowField, mask: OcclusionMask
) -> tuple[np.ndarray, np.ndarray]:
    """Warped reference labels and the validity of each as a consensus source."""
    if current.shape_hw != reference.shape_hw:
        raise ShapeMismatch(f"current {current.shape_hw} vs reference {reference.shape_hw}")
    if flow.shape_hw != current.shape_hw or mask.data.shape != current.data.shape:
        raise ShapeMismatch("flow/mask dims disagree with label maps")
    ref = warp_labels(reference, flow).data
    usable = (mask.data != 0) & (ref != IGNORE)
    return ref, usable


def refine_cutout(
    current: LabelMap,
    reference: LabelMap,
    flow: FlowField,
    mask: OcclusionMask,
    strict: bool = False,
) -> LabelMap:
    """Keep a label only where a usable warped reference agrees with it.

    Pixels without a usable reference keep their label; pass strict=True
    to drop those too (the literal consensus rule).  IGNORE pixels stay
    IGNORE.  Never introduces a label.
    """
    ref, usable = _warp_reference(current, reference, flow, mask)
    cur = current.data
    agree = usable & (cur == ref)
    keep = agree if strict else (agree | ~usable)
    out = np.where((cur != IGNORE) & keep, cur, IGNORE).astype(np.uint16)
    return LabelMap(out)


def refine_fillin(
    current: LabelMap, reference: LabelMap, flow: FlowField, mask: OcclusionMask
) -> LabelMap:
    """Fill IGNORE pixels with the usable warped reference label.

    Labeled pixels pass through verbatim; never removes or changes an
    existing label.
    """
    ref, usable = _warp_reference(current, reference, flow, mask)
    cur = current.data
    out = np.where((cur == IGNORE) & usable, ref, cur).astype(np.uint16)
    return LabelMap(out)
