"""Synthetic video clips with exact ground truth, exact flow, and noisy predictions.

Each clip shows translating rectangles/disks over a static textured
background.  Shape velocities are integer pixels/frame, so the analytic
flow is exactly consistent with the rendered labels and images under
nearest sampling, and warping error is exactly zero on non-occluded
pixels.  Predictions are the ground truth corrupted by three knobs:

* label_flip_prob: pixels flip to a wrong class, concentrated in a
  spatially smooth per-frame "difficulty" field (so errors form blobs
  rather than salt-and-pepper, and correlate with low confidence);
* softmax_temperature: one-hot labels are smoothed by a per-pixel
  temperature proportional to the same difficulty field, which keeps
  maps normalized by construction and makes confidences vary;
* flicker_prob: a whole shape's predicted class swaps in isolated
  frames, producing temporally inconsistent but confident errors.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import IoError
from .tensor_io import ClipManifest, load_manifest, save_array, write_manifest

META_FILENAME = "synth_meta.json"
MANIFEST_FILENAME = "manifest.json"

BACKGROUND_CLASS = 0


@dataclass(frozen=True)
class NoiseConfig:
    label_flip_prob: float = 0.0
    softmax_temperature: float = 0.25
    flicker_prob: float = 0.0


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    num_clips: int = 2
    frames_per_clip: int = 5
    height: int = 48
    width: int = 64
    num_classes: int = 4
    shape_count: int = 3
    velocity_range: float = 2.0
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.frames_per_clip < 2:
            raise ValueError("frames_per_clip must be >= 2")
        if self.num_clips < 1 or self.shape_count < 1:
            raise ValueError("num_clips and shape_count must be >= 1")
        if min(self.height, self.width) < 16:
            raise ValueError("height and width must be >= 16")
        n = self.noise
        for name, p in (("label_flip_prob", n.label_flip_prob), ("flicker_prob", n.flicker_prob)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {p}")
        if n.softmax_temperature <= 0.0:
            raise ValueError("softmax_temperature must be > 0")


@dataclass(frozen=True)
class ShapeSpec:
    """One moving shape: geometry at t=0 plus a constant integer velocity."""

    kind: str  # "rect" | "disk"
    class_id: int
    half_w: int
    half_h: int
    cx: int
    cy: int
    vx: int
    vy: int

    def center(self, t: int) -> tuple[int, int]:
        return self.cx + self.vx * t, self.cy + self.vy * t


def shape_mask(s: ShapeSpec, t: int, H: int, W: int) -> np.ndarray:
    """Boolean occupancy of shape s at frame t."""
    cx, cy = s.center(t)
    gy, gx = np.mgrid[0:H, 0:W]
    if s.kind == "rect":
        return (np.abs(gx - cx) <= s.half_w) & (np.abs(gy - cy) <= s.half_h)
    rx = (gx - cx) / max(s.half_w, 1)
    ry = (gy - cy) / max(s.half_h, 1)
    return rx * rx + ry * ry <= 1.0


def owner_map(shapes: list[ShapeSpec], t: int, H: int, W: int) -> np.ndarray:
    """Index of the topmost shape per pixel (later shapes on top), -1 = background."""
    owner = np.full((H, W), -1, dtype=np.int32)
    for i, s in enumerate(shapes):
        owner[shape_mask(s, t, H, W)] = i
    return owner


def gt_frame(shapes: list[ShapeSpec], t: int, H: int, W: int) -> np.ndarray:
    """Ground-truth label map at frame t, uint16."""
    owner = owner_map(shapes, t, H, W)
    gt = np.full((H, W), BACKGROUND_CLASS, dtype=np.uint16)
    for i, s in enumerate(shapes):
        gt[owner == i] = s.class_id
    return gt


def flow_frame(shapes: list[ShapeSpec], t: int, offset: int, H: int, W: int) -> np.ndarray:
    """Flow for direction (t -> t+offset): per pixel, displacement to its source.

    A material point of shape s at pixel p in frame t sits at
    p + v_s * offset in frame t+offset; background is static.
    """
    owner = owner_map(shapes, t, H, W)
    flow = np.zeros((2, H, W), dtype=np.float32)
    for i, s in enumerate(shapes):
        sel = owner == i
        flow[0][sel] = s.vx * offset
        flow[1][sel] = s.vy * offset
    return flow


def analytic_nonoccluded(
    shapes: list[ShapeSpec], t: int, offset: int, H: int, W: int
) -> np.ndarray:
    """Pixels of frame t whose source in frame t+offset shows the same surface.

    A pixel is non-occluded iff its source location is inside the image
    and is owned by the same shape (or background) there.
    """
    owner_t = owner_map(shapes, t, H, W)
    owner_j = owner_map(shapes, t + offset, H, W)
    flow = flow_frame(shapes, t, offset, H, W)
    gy, gx = np.mgrid[0:H, 0:W]
    qx = gx + flow[0].astype(np.int64)
    qy = gy + flow[1].astype(np.int64)
    inb = (qx >= 0) & (qx < W) & (qy >= 0) & (qy < H)
    ok = np.zeros((H, W), dtype=bool)
    ok[inb] = owner_j[qy[inb], qx[inb]] == owner_t[inb]
    return ok


def _smooth_field(rng: np.random.Generator, H: int, W: int, cell: int = 8) -> np.ndarray:
    """Spatially smooth field in [0,1]: bilinear upsample of a coarse grid."""
    gh, gw = H // cell + 2, W // cell + 2
    grid = rng.random((gh, gw))
    y = np.arange(H) / cell
    x = np.arange(W) / cell
    y0 = y.astype(np.int64)
    x0 = x.astype(np.int64)
    wy = (y - y0)[:, None]
    wx = (x - x0)[None, :]
    return (
        grid[np.ix_(y0, x0)] * (1 - wy) * (1 - wx)
        + grid[np.ix_(y0 + 1, x0)] * wy * (1 - wx)
        + grid[np.ix_(y0, x0 + 1)] * (1 - wy) * wx
        + grid[np.ix_(y0 + 1, x0 + 1)] * wy * wx
    )


# Fixed, well-separated base colors; class k -> palette[k % len].
_PALETTE = np.array(
    [
        [0.35, 0.35, 0.35],
        [0.85, 0.20, 0.20],
        [0.20, 0.75, 0.25],
        [0.20, 0.30, 0.85],
        [0.85, 0.75, 0.15],
        [0.70, 0.20, 0.80],
        [0.15, 0.75, 0.75],
        [0.90, 0.50, 0.15],
    ],
    dtype=np.float64,
)


def _sample_shapes(cfg: SynthConfig, rng: np.random.Generator) -> list[ShapeSpec]:
    H, W = cfg.height, cfg.width
    vmax = max(0, int(round(cfg.velocity_range)))
    min_half = 2
    max_half = max(min_half + 1, min(H, W) // 4)
    shapes = []
    for i in range(cfg.shape_count):
        half_w = int(rng.integers(min_half, max_half + 1))
        half_h = int(rng.integers(min_half, max_half + 1))
        cx = int(rng.integers(half_w, max(half_w + 1, W - half_w)))
        cy = int(rng.integers(half_h, max(half_h + 1, H - half_h)))
        vx = int(rng.integers(-vmax, vmax + 1))
        vy = int(rng.integers(-vmax, vmax + 1))
        kind = "rect" if rng.random() < 0.5 else "disk"
        class_id = 1 + i % (cfg.num_classes - 1)
        shapes.append(ShapeSpec(kind, class_id, half_w, half_h, cx, cy, vx, vy))
    return shapes


def _render_image(
    shapes: list[ShapeSpec],
    textures: list[np.ndarray],
    background: np.ndarray,
    t: int,
) -> np.ndarray:
    """Compose the frame: background plus each shape's texture, translated."""
    _, H, W = background.shape
    img = background.copy()
    for s, tex in zip(shapes, textures):
        mask = shape_mask(s, t, H, W)
        ys, xs = np.nonzero(mask)
        cx, cy = s.center(t)
        ly = ys - (cy - s.half_h)
        lx = xs - (cx - s.half_w)
        img[:, ys, xs] = tex[:, ly, lx]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _make_textures(
    cfg: SynthConfig, shapes: list[ShapeSpec], rng: np.random.Generator
) -> tuple[np.ndarray, list[np.ndarray]]:
    H, W = cfg.height, cfg.width
    bg_color = _PALETTE[BACKGROUND_CLASS]
    background = bg_color[:, None, None] + rng.uniform(-0.15, 0.15, size=(3, H, W))
    background = np.clip(background, 0.0, 1.0)
    textures = []
    for s in shapes:
        th, tw = 2 * s.half_h + 1, 2 * s.half_w + 1
        base = _PALETTE[s.class_id % len(_PALETTE)]
        tex = base[:, None, None] + rng.uniform(-0.15, 0.15, size=(3, th, tw))
        textures.append(np.clip(tex, 0.0, 1.0))
    return background, textures


def _corrupt_labels(
    gt: np.ndarray,
    shapes: list[ShapeSpec],
    owner: np.ndarray,
    flicker_classes: dict[int, int],
    cfg: SynthConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Predicted hard labels and the per-pixel difficulty field for a frame."""
    K = cfg.num_classes
    H, W = gt.shape
    label = gt.astype(np.int64)
    for shape_idx, new_class in flicker_classes.items():
        label[owner == shape_idx] = new_class
    d = _smooth_field(rng, H, W)
    p_f = cfg.noise.label_flip_prob
    if p_f > 0.0:
        flip = rng.random((H, W)) < np.clip(2.0 * p_f * d, 0.0, 1.0)
        # flip to a uniformly random *other* class
        shift = rng.integers(1, K, size=(H, W))
        label = np.where(flip, (label + shift) % K, label)
    return label.astype(np.uint16), d


def _soften(label: np.ndarray, difficulty: np.ndarray, cfg: SynthConfig) -> np.ndarray:
    """One-hot-smooth hard labels with a per-pixel temperature, normalized."""
    K = cfg.num_classes
    temp = cfg.noise.softmax_temperature * (0.5 + 1.5 * difficulty)
    e = np.exp(-1.0 / temp)  # underflows to 0 as T -> 0: exact one-hot
    denom = 1.0 + (K - 1) * e
    p_hot = 1.0 / denom
    p_other = e / denom
    probs = np.broadcast_to(p_other, (K,) + label.shape).copy()
    ky, kx = np.mgrid[0 : label.shape[0], 0 : label.shape[1]]
    probs[label, ky, kx] = p_hot
    probs /= probs.sum(axis=0, keepdims=True)
    return probs.astype(np.float32)


def generate(cfg: SynthConfig, out_dir: str | Path) -> list[ClipManifest]:
    """Generate clips under out_dir and return the parsed manifest.

    Deterministic given cfg.seed; each clip draws from its own generator
    seeded by (seed, clip index), so clips are independent of ordering.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create {out_dir}: {e}") from None
    H, W, K, N = cfg.height, cfg.width, cfg.num_classes, cfg.frames_per_clip
    clip_dicts = []
    meta_clips = []
    try:
        for ci in range(cfg.num_clips):
            rng = np.random.default_rng([cfg.seed, ci])
            clip_id = f"clip_{ci:03d}"
            clip_dir = out_dir / clip_id
            clip_dir.mkdir(parents=True, exist_ok=True)
            shapes = _sample_shapes(cfg, rng)
            background, textures = _make_textures(cfg, shapes, rng)

            # flicker plan: shape -> swapped class, per frame, independent draws
            flicker_plan: list[dict[int, int]] = []
            for t in range(N):
                events: dict[int, int] = {}
                for si, s in enumerate(shapes):
                    if rng.random() < cfg.noise.flicker_prob:
                        new_class = int(rng.integers(0, K - 1))
                        if new_class >= s.class_id:
                            new_class += 1
                        events[si] = new_class
                flicker_plan.append(events)

            frames = []
            for t in range(N):
                owner = owner_map(shapes, t, H, W)
                gt = gt_frame(shapes, t, H, W)
                img = _render_image(shapes, textures, background, t)
                label, difficulty = _corrupt_labels(
                    gt, shapes, owner, flicker_plan[t], cfg, rng
                )
                pred = _soften(label, difficulty, cfg)
                stem = f"frame_{t:03d}"
                save_array(clip_dir / f"{stem}_image.npy", img)
                save_array(clip_dir / f"{stem}_gt.npy", gt)
                save_array(clip_dir / f"{stem}_pred.npy", pred)
                flow_entry = {}
                for off, tag in ((-1, "m1"), (1, "p1")):
                    if 0 <= t + off < N:
                        save_array(
                            clip_dir / f"{stem}_flow_{tag}.npy",
                            flow_frame(shapes, t, off, H, W),
                        )
                        flow_entry[f"{off:+d}"] = f"{clip_id}/{stem}_flow_{tag}.npy"
                frames.append(
                    {
                        "image": f"{clip_id}/{stem}_image.npy",
                        "pred": f"{clip_id}/{stem}_pred.npy",
                        "flow": flow_entry,
                        "gt": f"{clip_id}/{stem}_gt.npy",
                    }
                )
            clip_dicts.append({"clip_id": clip_id, "num_classes": K, "frames": frames})
            meta_clips.append(
                {
                    "clip_id": clip_id,
                    "shapes": [asdict(s) for s in shapes],
                    "flicker": [
                        {str(si): nc for si, nc in events.items()} for events in flicker_plan
                    ],
                }
            )
        manifest_path = write_manifest(out_dir / MANIFEST_FILENAME, clip_dicts)
        (out_dir / META_FILENAME).write_text(
            json.dumps({"config": asdict(cfg), "clips": meta_clips}, indent=2)
        )
    except OSError as e:
        raise IoError(str(e)) from None
    return load_manifest(manifest_path)


def load_meta(out_dir: str | Path) -> dict:
    """Read the generation metadata (shape geometry, flicker events)."""
    doc = json.loads((Path(out_dir) / META_FILENAME).read_text())
    for clip in doc["clips"]:
        clip["shapes"] = [ShapeSpec(**s) for s in clip["shapes"]]
        clip["flicker"] = [
            {int(k): v for k, v in events.items()} for events in clip["flicker"]
        ]
    return doc
