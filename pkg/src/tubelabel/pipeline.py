"""End-to-end orchestration: synth -> aggregate -> gen -> refine -> eval.

Stages write under a single output directory and are skipped when their
primary output already exists (pass force=True to redo).  Every run
writes a summary JSON with stage timings, SHA-256 hashes of all NPY
outputs, and the final metrics, so reruns and worker-count changes can
be checked for bit-identical results.

Parallelism is per clip and only in stages whose clips are independent
(aggregate, refine, eval); pseudo-label generation stays sequential
because its thresholds are an EMA folded across clips in manifest
order.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .aggregate import aggregate_clip
from .errors import MissingFile, SchemaError, TubeLabelError
from .flow_warp import DEFAULT_ALPHA_OCC, DEFAULT_OCC_TH, occlusion_mask
from .losses import LossConfig
from .metrics import DEFAULT_SPANS, ConfusionMatrix, VpqAccumulator, _iou_from_counts
from .pseudo import THETA0, PseudoConfig, generate_dataset_labels
from .refine import refine_cutout, refine_fillin
from .synth import MANIFEST_FILENAME, NoiseConfig, SynthConfig, generate
from .tensor_io import ClipManifest, LabelMap, load_array, load_manifest, save_array, write_manifest

REFINE_MODES = ("cutout", "fillin", "none")

SUMMARY_FILENAME = "run_summary.json"


@dataclass(frozen=True)
class PipelineConfig:
    out_dir: Path
    workers: int = 1
    force: bool = False
    manifest: Optional[Path] = None  # use existing data instead of synth
    synth: SynthConfig = field(default_factory=SynthConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    alpha_occ: float = DEFAULT_ALPHA_OCC
    th: float = DEFAULT_OCC_TH
    theta0: float = THETA0
    refine_mode: str = "cutout"
    strict_consensus: bool = False
    reference_offset: int = -1
    spans: tuple[int, ...] = DEFAULT_SPANS

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.refine_mode not in REFINE_MODES:
            raise ValueError(f"refine_mode must be one of {REFINE_MODES}")
        if self.reference_offset == 0:
            raise ValueError("reference_offset must be nonzero")
        self.synth.validate()


def _take(table: dict, key: str, cls, **extra):
    """Build a nested config dataclass from a TOML table section."""
    sub = dict(table.get(key, {}))
    sub.update(extra)
    try:
        return cls(**sub)
    except TypeError as e:
        raise SchemaError(f"[{key}] section: {e}") from None


def load_config(path: str | Path, **overrides) -> PipelineConfig:
    """Parse a pipeline TOML file; keyword arguments override file values."""
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as e:
        raise SchemaError(f"{path}: {e}") from None
    synth_tab = dict(doc.get("synth", {}))
    noise = _take(synth_tab, "noise", NoiseConfig)
    synth_tab.pop("noise", None)
    if "seed" in overrides and overrides["seed"] is not None:
        synth_tab["seed"] = overrides.pop("seed")
    else:
        overrides.pop("seed", None)
    try:
        synth_cfg = SynthConfig(noise=noise, **synth_tab)
    except TypeError as e:
        raise SchemaError(f"[synth] section: {e}") from None
    warp_tab = doc.get("warp", {})
    refine_tab = doc.get("refine", {})
    metrics_tab = doc.get("metrics", {})
    kwargs = dict(
        out_dir=Path(doc["out_dir"]) if "out_dir" in doc else None,
        workers=int(doc.get("workers", 1)),
        manifest=Path(doc["manifest"]) if "manifest" in doc else None,
        synth=synth_cfg,
        pseudo=_take(doc, "pseudo", PseudoConfig),
        loss=_take(doc, "loss", LossConfig),
        alpha_occ=float(warp_tab.get("alpha_occ", DEFAULT_ALPHA_OCC)),
        th=float(warp_tab.get("th", DEFAULT_OCC_TH)),
        theta0=float(doc.get("theta0", THETA0)),
        refine_mode=refine_tab.get("mode", "cutout"),
        strict_consensus=bool(refine_tab.get("strict_consensus", False)),
        reference_offset=int(refine_tab.get("reference_offset", -1)),
        spans=tuple(metrics_tab.get("spans", DEFAULT_SPANS)),
    )
    for k, v in overrides.items():
        if v is not None:
            kwargs[k] = v
    if kwargs["out_dir"] is None:
        raise SchemaError(f"{path}: out_dir missing (set it in the file or pass --out)")
    try:
        return PipelineConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise SchemaError(f"{path}: {e}") from None


def _hash_outputs(root: Path) -> dict[str, str]:
    """SHA-256 of every NPY file under root, keyed by relative path."""
    hashes = {}
    for p in sorted(root.rglob("*.npy")):
        hashes[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return hashes


def _relative_to_dir(path: Path, base: Path) -> str:
    return os.path.relpath(path.resolve(), base.resolve())


def write_aggregated_clip(clip: ClipManifest, agg_dir: Path, alpha_occ: float, th: float) -> dict:
    """Aggregate one clip, save its maps, and return its manifest entry.

    Predictions point at the aggregated files; images, flows, and GT
    refer back to the original files so downstream stages can keep using
    one manifest.
    """
    agg = aggregate_clip(clip, alpha_occ, th)
    frames = []
    for i, (fused, sup) in enumerate(zip(agg.frames, agg.support)):
        rel = f"{clip.clip_id}/frame_{i:03d}_agg.npy"
        save_array(agg_dir / rel, fused.data)
        save_array(agg_dir / f"{clip.clip_id}/frame_{i:03d}_support.npy", sup)
        entry = clip.frames[i]
        frames.append(
            {
                "image": _relative_to_dir(entry.image, agg_dir),
                "pred": rel,
                "flow": {f"{o:+d}": _relative_to_dir(p, agg_dir) for o, p in sorted(entry.flow.items())},
                "gt": _relative_to_dir(entry.gt, agg_dir) if entry.gt else None,
            }
        )
    return {"clip_id": clip.clip_id, "num_classes": clip.num_classes, "frames": frames}


def _label_paths(labels_dir: Path, clip: ClipManifest) -> list[Path]:
    report_path = labels_dir / "report.json"
    if report_path.exists():
        mapping = json.loads(report_path.read_text()).get("labels", {})
        if clip.clip_id in mapping:
            return [labels_dir / rel for rel in mapping[clip.clip_id]]
    found = sorted((labels_dir / clip.clip_id).glob("frame_*_label.npy"))
    if len(found) != len(clip):
        raise MissingFile(
            f"{labels_dir}: expected {len(clip)} labels for clip {clip.clip_id}, found {len(found)}"
        )
    return found


def load_labels(labels_dir: str | Path, clip: ClipManifest) -> list[LabelMap]:
    """Load one clip's emitted label maps from a labels directory."""
    return [LabelMap(load_array(p, 2)) for p in _label_paths(Path(labels_dir), clip)]


def refine_clip_labels(
    clip: ClipManifest,
    labels: list[LabelMap],
    mode: str,
    offset: int,
    strict: bool,
    alpha_occ: float,
    th: float,
) -> list[LabelMap]:
    """Refine each frame against its reference at ``offset`` frames away.

    Frames without that neighbor (clip ends) pass through unchanged.
    """
    out = []
    fn = refine_fillin if mode == "fillin" else refine_cutout
    for i, cur in enumerate(labels):
        j = i + offset
        if not 0 <= j < len(clip) or offset not in clip.frames[i].flow:
            out.append(cur)
            continue
        flow = clip.load_flow(i, offset)
        mask = occlusion_mask(clip.load_image(i), clip.load_image(j), flow, alpha_occ, th)
        if mode == "fillin":
            out.append(fn(labels[i], labels[j], flow, mask))
        else:
            out.append(refine_cutout(labels[i], labels[j], flow, mask, strict=strict))
    return out


def evaluate_labels(
    clips: list[ClipManifest],
    labels_dir: Path,
    spans: tuple[int, ...],
    workers: int = 1,
) -> dict:
    """mIoU, P-mIoU + coverage, and VPQ of emitted labels against manifest GT."""
    if not clips:
        raise MissingFile("no clips to evaluate")
    K = clips[0].num_classes

    def one(clip: ClipManifest):
        preds = load_labels(labels_dir, clip)
        gts = [clip.load_gt(i) for i in range(len(clip))]
        cm = ConfusionMatrix.empty(K)
        for p, g in zip(preds, gts):
            cm.add(p, g)
        acc = VpqAccumulator(num_classes=K, spans=spans)
        acc.add_clip(preds, gts)
        return cm, acc

    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(one, clips))
    total_cm = ConfusionMatrix.empty(K)
    total_acc = VpqAccumulator(num_classes=K, spans=spans)
    for cm, acc in results:  # manifest order, independent of completion order
        total_cm.merge(cm)
        total_acc.merge(acc)
    per_class, mean_iou = _iou_from_counts(total_cm.counts)
    labeled = int(total_cm.counts[:, :K].sum())
    gt_valid = int(total_cm.counts.sum())
    p_per_class, p_mean = _iou_from_counts(total_cm.counts[:, :K])
    per_span, vpq_mean = total_acc.result()
    return {
        "num_classes": K,
        "miou": {"per_class": [None if v != v else v for v in per_class], "mean": mean_iou},
        "p_miou": {
            "per_class": [None if v != v else v for v in p_per_class],
            "mean": p_mean,
            "coverage": labeled / gt_valid if gt_valid else 0.0,
        },
        "vpq": {"spans": list(spans), "per_span": per_span, "mean": vpq_mean},
    }


def run_pipeline(cfg: PipelineConfig) -> dict:
    """Run all stages, returning (and writing) the run summary."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary: dict = {"stages": {}, "metrics": None}

    def record(name: str, skipped: bool, seconds: float, root: Optional[Path]):
        summary["stages"][name] = {
            "skipped": skipped,
            "seconds": round(seconds, 6),
            "outputs": _hash_outputs(root) if root is not None else {},
        }

    # synth
    data_dir = out / "data"
    t0 = time.perf_counter()
    if cfg.manifest is not None:
        clips = load_manifest(cfg.manifest)
        record("synth", True, time.perf_counter() - t0, None)
    elif (data_dir / MANIFEST_FILENAME).exists() and not cfg.force:
        clips = load_manifest(data_dir / MANIFEST_FILENAME)
        record("synth", True, time.perf_counter() - t0, data_dir)
    else:
        clips = generate(cfg.synth, data_dir)
        record("synth", False, time.perf_counter() - t0, data_dir)

    # aggregate (clip_adaptive consumes it; other strategies bypass)
    agg_dir = out / "agg"
    t0 = time.perf_counter()
    use_agg = cfg.pseudo.strategy == "clip_adaptive"
    if not use_agg:
        record("aggregate", True, time.perf_counter() - t0, None)
        gen_input = clips
    elif (agg_dir / MANIFEST_FILENAME).exists() and not cfg.force:
        gen_input = load_manifest(agg_dir / MANIFEST_FILENAME)
        record("aggregate", True, time.perf_counter() - t0, agg_dir)
    else:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            entries = list(
                pool.map(lambda c: write_aggregated_clip(c, agg_dir, cfg.alpha_occ, cfg.th), clips)
            )
        write_manifest(agg_dir / MANIFEST_FILENAME, entries)
        gen_input = load_manifest(agg_dir / MANIFEST_FILENAME)
        record("aggregate", False, time.perf_counter() - t0, agg_dir)

    # gen: thresholds are an EMA across clips, so this stage is sequential
    labels_dir = out / "labels"
    t0 = time.perf_counter()
    if (labels_dir / "report.json").exists() and not cfg.force:
        record("gen", True, time.perf_counter() - t0, labels_dir)
    else:
        generate_dataset_labels(
            gen_input,
            cfg.pseudo,
            labels_dir,
            alpha_occ=cfg.alpha_occ,
            th=cfg.th,
            use_aggregation=False,  # aggregation already materialized above
            theta0=cfg.theta0,
        )
        record("gen", False, time.perf_counter() - t0, labels_dir)

    # refine
    if cfg.refine_mode == "none":
        record("refine", True, 0.0, None)
        eval_dir = labels_dir
    else:
        refined_dir = out / "refined"
        eval_dir = refined_dir
        t0 = time.perf_counter()
        if (refined_dir / "report.json").exists() and not cfg.force:
            record("refine", True, time.perf_counter() - t0, refined_dir)
        else:

            def refine_one(clip: ClipManifest) -> tuple[str, list[str]]:
                labels = load_labels(labels_dir, clip)
                refined = refine_clip_labels(
                    clip, labels, cfg.refine_mode, cfg.reference_offset,
                    cfg.strict_consensus, cfg.alpha_occ, cfg.th,
                )
                rels = []
                for i, lm in enumerate(refined):
                    rel = f"{clip.clip_id}/frame_{i:03d}_label.npy"
                    save_array(refined_dir / rel, lm.data)
                    rels.append(rel)
                return clip.clip_id, rels

            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                mapping = dict(pool.map(refine_one, clips))
            (refined_dir / "report.json").write_text(
                json.dumps(
                    {
                        "mode": cfg.refine_mode,
                        "strict_consensus": cfg.strict_consensus,
                        "reference_offset": cfg.reference_offset,
                        "labels": mapping,
                    },
                    indent=2,
                )
            )
            record("refine", False, time.perf_counter() - t0, refined_dir)

    # eval
    t0 = time.perf_counter()
    metrics = evaluate_labels(clips, eval_dir, cfg.spans, cfg.workers)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2))
    record("eval", False, time.perf_counter() - t0, None)
    summary["metrics"] = metrics

    (out / SUMMARY_FILENAME).write_text(json.dumps(summary, indent=2))
    return summary
