"""Brute-force reference implementations used only by the test suite.

Everything here is written as straight-line per-pixel loops and set
arithmetic, trading speed for obviousness, so the vectorized production
code can be checked against an independent derivation.  Nothing in the
package imports this module.
"""

from __future__ import annotations

import math

import numpy as np

from .tensor_io import IGNORE, LabelMap, SoftSegMap

# --- warping ---------------------------------------------------------------


def oracle_bilinear(src: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Textbook bilinear backward warp; mirrors bilinear_warp's contract."""
    C, H, W = src.shape
    out = np.zeros((C, H, W), dtype=np.float64)
    oob = np.zeros((H, W), dtype=bool)
    for r in range(H):
        for c in range(W):
            x = c + float(flow[0, r, c])
            y = r + float(flow[1, r, c])
            if not (0.0 <= x <= W - 1.0 and 0.0 <= y <= H - 1.0):
                oob[r, c] = True
            x0, y0 = math.floor(x), math.floor(y)
            wx, wy = x - x0, y - y0
            for ch in range(C):
                v = 0.0
                for dy, dx, w in (
                    (0, 0, (1 - wx) * (1 - wy)),
                    (0, 1, wx * (1 - wy)),
                    (1, 0, (1 - wx) * wy),
                    (1, 1, wx * wy),
                ):
                    yy, xx = y0 + dy, x0 + dx
                    if 0 <= xx < W and 0 <= yy < H:
                        v += w * float(src[ch, yy, xx])
                out[ch, r, c] = v
    return out.astype(np.float32), oob


def oracle_nearest(src: np.ndarray, flow: np.ndarray, fill: int = IGNORE) -> np.ndarray:
    """Round-half-up nearest-neighbor warp; out of bounds -> fill."""
    H, W = src.shape
    out = np.full((H, W), fill, dtype=src.dtype)
    for r in range(H):
        for c in range(W):
            x = c + float(flow[0, r, c])
            y = r + float(flow[1, r, c])
            cx = math.floor(x + 0.5)
            cy = math.floor(y + 0.5)
            if 0 <= cx < W and 0 <= cy < H:
                out[r, c] = src[cy, cx]
    return out


# --- losses -----------------------------------------------------------------


def oracle_cross_entropy(pred: SoftSegMap, gt: LabelMap) -> float:
    total, n = 0.0, 0
    H, W = gt.shape_hw
    for r in range(H):
        for c in range(W):
            lab = int(gt.data[r, c])
            if lab == IGNORE:
                continue
            p = max(float(pred.data[lab, r, c]), 1e-12)
            total += -math.log(p)
            n += 1
    return total / n


def oracle_dice(p: np.ndarray, q: np.ndarray) -> float:
    num = 0.0
    den = 0.0
    for a, b in zip(p.ravel().tolist(), q.ravel().tolist()):
        num += 2.0 * a * b
        den += a * a + b * b
    if den == 0.0:
        return 1.0
    return num / den


def oracle_tube_loss(pred_frames: list[SoftSegMap], gt_frames: list[LabelMap]) -> float:
    """Sum over classes of 1 - dice between flat prediction and one-hot GT
    tubes, IGNORE pixels dropped; classes empty on both sides contribute 0."""
    K = pred_frames[0].num_classes
    loss = 0.0
    for k in range(K):
        ps: list[float] = []
        qs: list[float] = []
        for pm, gm in zip(pred_frames, gt_frames):
            H, W = gm.shape_hw
            for r in range(H):
                for c in range(W):
                    lab = int(gm.data[r, c])
                    if lab == IGNORE:
                        continue
                    ps.append(float(pm.data[k, r, c]))
                    qs.append(1.0 if lab == k else 0.0)
        d = oracle_dice(np.array(ps), np.array(qs))
        loss += 1.0 - d
    return loss


# --- clip-adaptive pseudo-label generation ------------------------------------


def _frame_conf_argmax(m: SoftSegMap) -> tuple[list[list[float]], list[list[int]]]:
    K, H, W = m.data.shape
    conf = [[0.0] * W for _ in range(H)]
    arg = [[0] * W for _ in range(H)]
    for r in range(H):
        for c in range(W):
            best_k, best_v = 0, float(m.data[0, r, c])
            for k in range(1, K):
                v = float(m.data[k, r, c])
                if v > best_v:
                    best_k, best_v = k, v
            conf[r][c] = best_v
            arg[r][c] = best_k
    return conf, arg


def oracle_alg1(
    clips: list[list[SoftSegMap]],
    theta0: float,
    alpha: float,
    beta: float,
    gamma: float,
) -> tuple[list[list[LabelMap]], list[list[float]]]:
    """Clip-adaptive pseudo labels, transcribed as plain loops.

    Per clip: pool max-confidences per argmax class over all frames,
    sort descending, pick the value at floor(alpha * theta^gamma * n)
    (clamped; absent classes keep theta), EMA the thresholds once, then
    label every frame with the updated thresholds using a strict >.
    Returns per-clip labels and the theta vector after each clip.
    """
    K = clips[0][0].num_classes
    theta = [float(theta0)] * K
    all_labels: list[list[LabelMap]] = []
    trace: list[list[float]] = []
    for frames in clips:
        pools: list[list[float]] = [[] for _ in range(K)]
        cached = [_frame_conf_argmax(m) for m in frames]
        for conf, arg in cached:
            for row_c, row_a in zip(conf, arg):
                for v, k in zip(row_c, row_a):
                    pools[k].append(v)
        new_theta = []
        for k in range(K):
            pool = sorted(pools[k], reverse=True)
            if not pool:
                psi_k = theta[k]
            else:
                idx = math.floor(alpha * theta[k] ** gamma * len(pool))
                idx = min(max(idx, 0), len(pool) - 1)
                psi_k = pool[idx]
            new_theta.append(beta * theta[k] + (1.0 - beta) * psi_k)
        theta = new_theta
        trace.append(list(theta))
        clip_labels = []
        for conf, arg in cached:
            H, W = len(conf), len(conf[0])
            lab = np.full((H, W), IGNORE, dtype=np.uint16)
            for r in range(H):
                for c in range(W):
                    if conf[r][c] > theta[arg[r][c]]:
                        lab[r, c] = arg[r][c]
            clip_labels.append(LabelMap(lab))
        all_labels.append(clip_labels)
    return all_labels, trace


# --- refinement ---------------------------------------------------------------


def oracle_refine(
    current: LabelMap,
    reference: LabelMap,
    flow: np.ndarray,
    mask: np.ndarray,
    mode: str,
    strict: bool = False,
) -> LabelMap:
    """Per-pixel case analysis of both refinement rules."""
    H, W = current.shape_hw
    ref_w = oracle_nearest(reference.data, flow)
    out = np.full((H, W), IGNORE, dtype=np.uint16)
    for r in range(H):
        for c in range(W):
            cur = int(current.data[r, c])
            ref = int(ref_w[r, c])
            usable = bool(mask[r, c]) and ref != IGNORE
            if mode == "cutout":
                if cur == IGNORE:
                    continue
                if usable:
                    out[r, c] = cur if cur == ref else IGNORE
                else:
                    out[r, c] = IGNORE if strict else cur
            else:  # fillin
                if cur != IGNORE:
                    out[r, c] = cur
                elif usable:
                    out[r, c] = ref
    return LabelMap(out)


# --- metrics -------------------------------------------------------------------


def oracle_miou(
    preds: list[LabelMap], gts: list[LabelMap], num_classes: int
) -> tuple[list[float], float]:
    """Set-arithmetic mIoU; NaN for classes absent from GT and prediction."""
    per_class: list[float] = []
    active_vals = []
    for k in range(num_classes):
        inter = union = 0
        for pm, gm in zip(preds, gts):
            H, W = gm.shape_hw
            for r in range(H):
                for c in range(W):
                    g = int(gm.data[r, c])
                    if g == IGNORE:
                        continue
                    p = int(pm.data[r, c])
                    if g == k and p == k:
                        inter += 1
                    if g == k or p == k:
                        union += 1
        if union == 0:
            per_class.append(float("nan"))
        else:
            per_class.append(inter / union)
            active_vals.append(inter / union)
    return per_class, sum(active_vals) / len(active_vals)


def oracle_vpq(
    preds: list[LabelMap],
    gts: list[LabelMap],
    num_classes: int,
    spans: tuple[int, ...],
) -> tuple[list[float], float]:
    """Window-enumeration VPQ using explicit (t, y, x) pixel sets."""
    n = len(preds)
    per_span = []
    for w in spans:
        tp = [0] * num_classes
        fp = [0] * num_classes
        fn = [0] * num_classes
        iou_sum = [0.0] * num_classes
        for start in range(n - w + 1):
            for k in range(num_classes):
                pred_tube = set()
                gt_tube = set()
                for t in range(start, start + w):
                    H, W = gts[t].shape_hw
                    for r in range(H):
                        for c in range(W):
                            g = int(gts[t].data[r, c])
                            if g == IGNORE:
                                continue
                            if int(preds[t].data[r, c]) == k:
                                pred_tube.add((t, r, c))
                            if g == k:
                                gt_tube.add((t, r, c))
                if not pred_tube and not gt_tube:
                    continue
                inter = len(pred_tube & gt_tube)
                union = len(pred_tube | gt_tube)
                iou = inter / union if union else 0.0
                if pred_tube and gt_tube and iou > 0.5:
                    tp[k] += 1
                    iou_sum[k] += iou
                else:
                    if pred_tube:
                        fp[k] += 1
                    if gt_tube:
                        fn[k] += 1
        vals = []
        for k in range(num_classes):
            denom = tp[k] + 0.5 * fp[k] + 0.5 * fn[k]
            if denom > 0:
                vals.append(iou_sum[k] / denom)
        per_span.append(sum(vals) / len(vals))
    return per_span, sum(per_span) / len(per_span)
