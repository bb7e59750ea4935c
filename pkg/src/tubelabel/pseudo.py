"""Pseudo-label generation under four threshold strategies.

Strategies differ in the unit over which per-class confidence pools are
built and in how thresholds evolve:

* fixed: one constant threshold for every class, no state;
* class_balanced: per-image top-alpha quantile per class, no momentum;
* instance_adaptive: per-image pools, EMA thresholds carried across
  frames and clips;
* clip_adaptive: per-clip pools over temporally aggregated predictions,
  one EMA update per clip, the same thresholds applied to every frame
  of that clip.

All strategies emit a label only where the (aggregated) max probability
strictly exceeds the per-class threshold; everything else is IGNORE.
Thresholds are EMA state, so clips are always processed in manifest
order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .aggregate import AggregatedClip, aggregate_clip
from .errors import ShapeMismatch
from .flow_warp import DEFAULT_ALPHA_OCC, DEFAULT_OCC_TH
from .tensor_io import IGNORE, ClipManifest, LabelMap, SoftSegMap, save_array

THETA0 = 0.9
"""Initial per-class threshold before any update."""

STRATEGIES = ("fixed", "class_balanced", "instance_adaptive", "clip_adaptive")

REPORT_FILENAME = "report.json"


@dataclass(frozen=True)
class ThresholdState:
    """Per-class thresholds theta (float64, in [0,1]) plus an update counter."""

    theta: np.ndarray
    clips_seen: int = 0

    def __post_init__(self):
        if self.theta.ndim != 1:
            raise ShapeMismatch(f"theta must be a vector, got shape {self.theta.shape}")
        if ((self.theta < 0.0) | (self.theta > 1.0)).any():
            raise ValueError("thresholds must lie in [0,1]")

    @classmethod
    def initial(cls, num_classes: int, theta0: float = THETA0) -> ThresholdState:
        return cls(theta=np.full(num_classes, float(theta0)), clips_seen=0)


@dataclass(frozen=True)
class PseudoConfig:
    strategy: str = "clip_adaptive"
    alpha: float = 0.5  # proportion of the pool that stays above threshold
    beta: float = 0.9  # EMA momentum
    gamma: float = 1.0  # decay exponent on the previous threshold
    fixed_threshold: float = 0.9  # strategy="fixed" only

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r} (one of {STRATEGIES})")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0,1]")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must be in [0,1)")
        if self.gamma < 0.0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 <= self.fixed_threshold <= 1.0:
            raise ValueError("fixed_threshold must be in [0,1]")


@dataclass(frozen=True)
class ConfidencePool:
    """Descending max-probability values per class, pooled over one unit."""

    pools: tuple[np.ndarray, ...]

    @property
    def num_classes(self) -> int:
        return len(self.pools)


def fixed_threshold_labels(pred: SoftSegMap, theta: np.ndarray) -> LabelMap:
    """argmax where the max probability strictly exceeds that class's theta.

    Everything else is IGNORE; argmax ties go to the lowest class index.
    """
    if theta.shape != (pred.num_classes,):
        raise ShapeMismatch(f"theta shape {theta.shape} vs K={pred.num_classes}")
    conf = pred.data.max(axis=0).astype(np.float64)
    cls = pred.data.argmax(axis=0)
    keep = conf > theta[cls]
    labels = np.where(keep, cls, IGNORE).astype(np.uint16)
    return LabelMap(labels)


def pool_confidences(preds: list[SoftSegMap]) -> ConfidencePool:
    """Pool per-class max probabilities over the given frames, sorted descending."""
    if not preds:
        raise ShapeMismatch("cannot pool an empty list of predictions")
    K = preds[0].num_classes
    per_class: list[list[np.ndarray]] = [[] for _ in range(K)]
    for m in preds:
        if m.num_classes != K or m.shape_hw != preds[0].shape_hw:
            raise ShapeMismatch("pooled frames disagree in shape")
        conf = m.data.max(axis=0).astype(np.float64).ravel()
        cls = m.data.argmax(axis=0).ravel()
        for k in range(K):
            per_class[k].append(conf[cls == k])
    pools = tuple(np.sort(np.concatenate(vs))[::-1] if vs else np.empty(0) for vs in per_class)
    return ConfidencePool(pools=pools)


def psi(pool_k: np.ndarray, theta_prev_k: float, alpha: float, gamma: float) -> float:
    """Select the pool value at index floor(alpha * theta_prev^gamma * |pool|).

    The index is clamped to the pool; an empty pool returns theta_prev
    unchanged so absent classes keep their threshold.
    """
    n = len(pool_k)
    if n == 0:
        return float(theta_prev_k)
    idx = int(np.floor(alpha * theta_prev_k**gamma * n))
    return float(pool_k[min(max(idx, 0), n - 1)])


def update_thresholds(
    state: ThresholdState, pools: ConfidencePool, cfg: PseudoConfig
) -> ThresholdState:
    """One EMA step: theta <- beta*theta + (1-beta)*psi, all classes from old theta."""
    theta = state.theta
    new = np.array(
        [
            cfg.beta * theta[k] + (1.0 - cfg.beta) * psi(pools.pools[k], theta[k], cfg.alpha, cfg.gamma)
            for k in range(len(theta))
        ]
    )
    return ThresholdState(theta=new, clips_seen=state.clips_seen + 1)


def generate_clip_labels(
    agg: AggregatedClip, state: ThresholdState, cfg: PseudoConfig
) -> tuple[list[LabelMap], ThresholdState]:
    """Clip-adaptive unit step: pool over the whole clip, update thresholds
    once, then threshold every frame with the same updated vector."""
    if cfg.strategy != "clip_adaptive":
        raise ValueError(f"generate_clip_labels requires strategy=clip_adaptive, got {cfg.strategy}")
    pools = pool_confidences(list(agg.frames))
    new_state = update_thresholds(state, pools, cfg)
    labels = [fixed_threshold_labels(f, new_state.theta) for f in agg.frames]
    return labels, new_state


def _identity_clip(clip: ClipManifest) -> AggregatedClip:
    frames = tuple(clip.load_pred(i) for i in range(len(clip)))
    hw = (clip.height, clip.width)
    return AggregatedClip(frames=frames, support=tuple(np.ones(hw, np.float32) for _ in frames))


def generate_dataset_labels(
    clips: list[ClipManifest],
    cfg: PseudoConfig,
    out_dir: str | Path,
    alpha_occ: float = DEFAULT_ALPHA_OCC,
    th: float = DEFAULT_OCC_TH,
    use_aggregation: bool = True,
    theta0: float = THETA0,
) -> dict:
    """Emit pseudo labels for every frame of every clip and a JSON report.

    Clips run sequentially in list order (the EMA makes order matter).
    Aggregation applies to the clip_adaptive strategy only; image-unit
    strategies always read raw per-frame predictions.  Set
    use_aggregation=False to threshold raw predictions under
    clip_adaptive too.  Returns the report dictionary, which is also
    written to out_dir/report.json.
    """
    if not clips:
        raise ShapeMismatch("no clips to label")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    K = clips[0].num_classes
    state = ThresholdState.initial(K, theta0)
    last_theta = state.theta
    class_counts = np.zeros(K, dtype=np.int64)
    total_pixels = 0
    label_paths: dict[str, list[str]] = {}
    for clip in clips:
        if cfg.strategy == "clip_adaptive":
            agg = aggregate_clip(clip, alpha_occ, th) if use_aggregation else _identity_clip(clip)
            labels, state = generate_clip_labels(agg, state, cfg)
            last_theta = state.theta
        else:
            labels = []
            for i in range(len(clip)):
                pred = clip.load_pred(i)
                if cfg.strategy == "fixed":
                    theta = np.full(K, cfg.fixed_threshold)
                elif cfg.strategy == "class_balanced":
                    pools = pool_confidences([pred])
                    theta = np.array([psi(p, 1.0, cfg.alpha, 0.0) for p in pools.pools])
                else:  # instance_adaptive
                    pools = pool_confidences([pred])
                    state = update_thresholds(state, pools, cfg)
                    theta = state.theta
                last_theta = theta
                labels.append(fixed_threshold_labels(pred, theta))
        paths = []
        for i, lm in enumerate(labels):
            rel = f"{clip.clip_id}/frame_{i:03d}_label.npy"
            save_array(out_dir / rel, lm.data)
            paths.append(rel)
            valid = lm.data != IGNORE
            class_counts += np.bincount(lm.data[valid].astype(np.int64), minlength=K)
            total_pixels += lm.data.size
        label_paths[clip.clip_id] = paths
    report = {
        "strategy": cfg.strategy,
        "num_clips": len(clips),
        "num_frames": sum(len(c) for c in clips),
        "final_theta": [float(t) for t in last_theta],
        "class_proportion": [float(c) / total_pixels for c in class_counts],
        "overall_proportion": float(class_counts.sum()) / total_pixels,
        "labels": label_paths,
    }
    (out_dir / REPORT_FILENAME).write_text(json.dumps(report, indent=2))
    return report
