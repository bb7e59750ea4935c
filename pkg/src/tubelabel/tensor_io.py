"""Core array types and the on-disk formats (NPY arrays, JSON manifests).

All arrays are exchanged as NPY v1.0 files: C-order, little-endian,
dtype float32 for probabilities/images/flow and uint16 for label maps.
Loaded objects are immutable after construction and safe to share
across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    InconsistentDims,
    MalformedFile,
    MissingFile,
    SchemaError,
    ShapeMismatch,
)

IGNORE = 65535
"""Sentinel for unlabeled pixels in uint16 label maps."""

SUM_TOL = 1e-3
"""Tolerance on the per-pixel probability sum of a soft map."""

_ALLOWED_DTYPES = (np.dtype(np.float32), np.dtype(np.uint16))


@dataclass(frozen=True)
class SoftSegMap:
    """Per-frame class-probability volume of shape (K, H, W), float32."""

    data: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeMismatch(f"soft map must be rank 3 (K,H,W), got {self.data.shape}")
        if self.data.dtype != np.float32:
            raise ShapeMismatch(f"soft map must be float32, got {self.data.dtype}")

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    @property
    def shape_hw(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


@dataclass(frozen=True)
class LabelMap:
    """Hard per-pixel class assignment of shape (H, W), uint16; IGNORE=65535."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ShapeMismatch(f"label map must be rank 2 (H,W), got {self.data.shape}")
        if self.data.dtype != np.uint16:
            raise ShapeMismatch(f"label map must be uint16, got {self.data.dtype}")

    @property
    def shape_hw(self) -> tuple[int, int]:
        return self.data.shape


@dataclass(frozen=True)
class ImageFrame:
    """RGB frame of shape (3, H, W), float32 in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 3:
            raise ShapeMismatch(f"image must have shape (3,H,W), got {self.data.shape}")
        if self.data.dtype != np.float32:
            raise ShapeMismatch(f"image must be float32, got {self.data.dtype}")

    @property
    def shape_hw(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


@dataclass(frozen=True)
class FlowField:
    """Pixel displacement field of shape (2, H, W), float32.

    Channel 0 is dx (columns), channel 1 is dy (rows).  ``direction``
    is the (from_frame, to_frame) pair: for every pixel of the "from"
    frame the field gives the displacement to its source location in
    the "to" frame (backward-warp convention).
    """

    data: np.ndarray
    direction: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != 2:
            raise ShapeMismatch(f"flow must have shape (2,H,W), got {self.data.shape}")
        if self.data.dtype != np.float32:
            raise ShapeMismatch(f"flow must be float32, got {self.data.dtype}")

    @property
    def shape_hw(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]


@dataclass(frozen=True)
class FrameEntry:
    """One frame of a clip: paths to its image, prediction, flows, and GT."""

    image: Path
    pred: Path
    flow: dict[int, Path] = field(default_factory=dict)
    gt: Optional[Path] = None


@dataclass(frozen=True)
class ClipManifest:
    """Ordered description of one video clip's frames and array files."""

    clip_id: str
    num_classes: int
    frames: tuple[FrameEntry, ...]
    height: int = 0
    width: int = 0

    def __len__(self) -> int:
        return len(self.frames)

    def load_pred(self, i: int) -> SoftSegMap:
        return SoftSegMap(load_array(self.frames[i].pred, 3), frame_id=i)

    def load_image(self, i: int) -> ImageFrame:
        return ImageFrame(load_array(self.frames[i].image, 3))

    def load_gt(self, i: int) -> LabelMap:
        path = self.frames[i].gt
        if path is None:
            raise MissingFile(f"clip {self.clip_id} frame {i} has no ground truth")
        return LabelMap(load_array(path, 2))

    def load_flow(self, i: int, offset: int) -> FlowField:
        try:
            path = self.frames[i].flow[offset]
        except KeyError:
            raise MissingFile(
                f"clip {self.clip_id} frame {i} has no flow for offset {offset:+d}"
            ) from None
        return FlowField(load_array(path, 3), direction=(i, i + offset))


def _read_npy_header(path: Path):
    """Return (shape, dtype) of an NPY file, rejecting anything non-v1/C-order."""
    try:
        f = open(path, "rb")
    except FileNotFoundError:
        raise MissingFile(str(path)) from None
    with f:
        try:
            version = np.lib.format.read_magic(f)
        except ValueError as e:
            raise MalformedFile(f"{path}: {e}") from None
        if version[0] != 1:
            raise MalformedFile(f"{path}: NPY version {version[0]}.{version[1]}, expected 1.x")
        shape, fortran_order, dtype = np.lib.format.read_array_header_1_0(f)
    if fortran_order:
        raise MalformedFile(f"{path}: Fortran-order arrays are not supported")
    if dtype not in _ALLOWED_DTYPES:
        raise MalformedFile(f"{path}: dtype {dtype}, expected float32 or uint16")
    return shape, dtype


def load_array(path: str | Path, expected_rank: int) -> np.ndarray:
    """Load an NPY array, failing loudly on malformed files or wrong rank."""
    path = Path(path)
    shape, _ = _read_npy_header(path)
    if len(shape) != expected_rank:
        raise ShapeMismatch(f"{path}: rank {len(shape)}, expected {expected_rank}")
    arr = np.load(path, allow_pickle=False)
    return arr


def save_array(path: str | Path, arr: np.ndarray) -> Path:
    """Save an array as NPY v1.0, C-order, forcing a supported dtype."""
    path = Path(path)
    if arr.dtype not in _ALLOWED_DTYPES:
        raise MalformedFile(f"refusing to write dtype {arr.dtype} (use float32 or uint16)")
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, np.ascontiguousarray(arr))
    return path


def validate_softseg(m: SoftSegMap) -> list[str]:
    """Check SoftSegMap invariants; an empty list means the map is valid.

    Each diagnostic names the first offending pixel and the reason:
    non-finite values, values outside [0, 1], or a per-pixel channel
    sum deviating from 1 by more than SUM_TOL.
    """
    diags: list[str] = []
    data = m.data
    finite = np.isfinite(data)
    if not finite.all():
        k, y, x = np.unravel_index(int(np.argmin(finite)), data.shape)
        diags.append(f"non-finite value at (class={k}, y={y}, x={x})")
        return diags
    in_range = (data >= 0.0) & (data <= 1.0)
    if not in_range.all():
        k, y, x = np.unravel_index(int(np.argmin(in_range)), data.shape)
        diags.append(f"value {data[k, y, x]!r} out of [0,1] at (class={k}, y={y}, x={x})")
    sums = data.sum(axis=0, dtype=np.float64)
    bad = np.abs(sums - 1.0) > SUM_TOL
    if bad.any():
        y, x = np.unravel_index(int(np.argmax(bad)), sums.shape)
        diags.append(f"pixel (y={y}, x={x}) sums to {sums[y, x]:.6f} (tolerance {SUM_TOL})")
    return diags


def _frame_from_json(obj: dict, base: Path, clip_id: str, idx: int) -> FrameEntry:
    if not isinstance(obj, dict):
        raise SchemaError(f"clip {clip_id} frame {idx}: expected object, got {type(obj).__name__}")
    for key in ("image", "pred", "flow"):
        if key not in obj:
            raise SchemaError(f"clip {clip_id} frame {idx}: missing key '{key}'")
    if not isinstance(obj["flow"], dict):
        raise SchemaError(f"clip {clip_id} frame {idx}: 'flow' must be an object")
    flow: dict[int, Path] = {}
    for off_str, p in obj["flow"].items():
        try:
            off = int(off_str)
        except ValueError:
            raise SchemaError(
                f"clip {clip_id} frame {idx}: flow offset {off_str!r} is not an integer"
            ) from None
        if off == 0:
            raise SchemaError(f"clip {clip_id} frame {idx}: flow offset 0 is not allowed")
        flow[off] = base / p
    gt = base / obj["gt"] if obj.get("gt") else None
    return FrameEntry(image=base / obj["image"], pred=base / obj["pred"], flow=flow, gt=gt)


def _check_frame_files(clip_id: str, idx: int, entry: FrameEntry, K: int, hw: list):
    """Verify existence and dimensions of every array a frame references."""
    specs = [("image", entry.image, 3), ("pred", entry.pred, 3)]
    specs += [(f"flow[{off:+d}]", p, 3) for off, p in sorted(entry.flow.items())]
    if entry.gt is not None:
        specs.append(("gt", entry.gt, 2))
    for name, path, rank in specs:
        shape, _ = _read_npy_header(path)  # raises MissingFile / MalformedFile
        if len(shape) != rank:
            raise InconsistentDims(f"clip {clip_id} frame {idx} {name}: rank {len(shape)} != {rank}")
        if name == "pred":
            k, h, w = shape
            if k != K:
                raise InconsistentDims(f"clip {clip_id} frame {idx} pred: K={k} != num_classes={K}")
        elif name == "image":
            c, h, w = shape
            if c != 3:
                raise InconsistentDims(f"clip {clip_id} frame {idx} image: {c} channels != 3")
        elif name.startswith("flow"):
            c, h, w = shape
            if c != 2:
                raise InconsistentDims(f"clip {clip_id} frame {idx} {name}: {c} channels != 2")
        else:
            h, w = shape
        if hw and (h, w) != tuple(hw):
            raise InconsistentDims(
                f"clip {clip_id} frame {idx} {name}: ({h},{w}) != clip dims {tuple(hw)}"
            )
        if not hw:
            hw.extend([h, w])


def load_manifest(path: str | Path) -> list[ClipManifest]:
    """Parse a manifest JSON file into a list of validated ClipManifests.

    Clips are returned in file order and frames in listed order; this
    ordering drives the threshold EMA and must be deterministic.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    base = path.parent
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SchemaError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("clips"), list):
        raise SchemaError(f"{path}: top level must be an object with a 'clips' list")
    clips: list[ClipManifest] = []
    global_k: Optional[int] = None
    for ci, cobj in enumerate(doc["clips"]):
        if not isinstance(cobj, dict):
            raise SchemaError(f"{path}: clip {ci} is not an object")
        for key in ("clip_id", "num_classes", "frames"):
            if key not in cobj:
                raise SchemaError(f"{path}: clip {ci} missing key '{key}'")
        clip_id = cobj["clip_id"]
        K = cobj["num_classes"]
        if not isinstance(clip_id, str) or not isinstance(K, int) or K < 2:
            raise SchemaError(f"{path}: clip {ci} has invalid clip_id or num_classes")
        if not isinstance(cobj["frames"], list) or not cobj["frames"]:
            raise SchemaError(f"{path}: clip {clip_id} has no frames")
        if global_k is None:
            global_k = K
        elif K != global_k:
            raise InconsistentDims(f"clip {clip_id}: num_classes {K} != {global_k} of first clip")
        frames = tuple(
            _frame_from_json(fobj, base, clip_id, fi) for fi, fobj in enumerate(cobj["frames"])
        )
        hw: list = []
        for fi, entry in enumerate(frames):
            _check_frame_files(clip_id, fi, entry, K, hw)
        clips.append(
            ClipManifest(clip_id=clip_id, num_classes=K, frames=frames, height=hw[0], width=hw[1])
        )
    return clips


def write_manifest(path: str | Path, clips: list[dict]) -> Path:
    """Write a manifest JSON document with the given clip dictionaries."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"clips": clips}, indent=2))
    return path
