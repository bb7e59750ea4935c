"""Command-line interface.

Subcommands mirror the pipeline stages (synth, aggregate, gen, refine,
eval) plus warp/loss inspection utilities and the full pipeline runner.
Machine-readable output is JSON; eval also prints an aligned text table.
Exit codes: 0 success, 1 domain error (diagnostics on stderr), 2 usage.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .errors import MissingFile, TubeLabelError
from .flow_warp import DEFAULT_ALPHA_OCC, DEFAULT_OCC_TH, occlusion_mask, warp_labels, warp_soft
from .losses import (
    LossConfig,
    TubePair,
    cross_entropy,
    tube_loss_arrays,
    tube_matching_loss,
    vst_objective,
)
from .metrics import DEFAULT_SPANS, VpqAccumulator, confusion, _iou_from_counts
from .pseudo import THETA0, PseudoConfig, generate_dataset_labels
from .synth import NoiseConfig, SynthConfig, generate
from .tensor_io import ClipManifest, load_manifest, save_array


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _spans(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _find_clip(clips: list[ClipManifest], clip_id: str) -> ClipManifest:
    for c in clips:
        if c.clip_id == clip_id:
            return c
    raise MissingFile(f"clip {clip_id!r} not in manifest ({', '.join(c.clip_id for c in clips)})")


def _emit(obj: dict) -> None:
    json.dump(obj, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _add_warp_params(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha-occ", type=float, default=DEFAULT_ALPHA_OCC,
                   help="decay rate of the soft occlusion value")
    p.add_argument("--th", type=float, default=DEFAULT_OCC_TH,
                   help="visibility cutoff on the soft occlusion value")


def cmd_synth(args) -> None:
    if args.config:
        cfg = pl.load_config(args.config, out_dir=Path(args.out), seed=args.seed).synth
    else:
        cfg = SynthConfig(
            seed=args.seed if args.seed is not None else 0,
            num_clips=args.num_clips,
            frames_per_clip=args.frames_per_clip,
            height=args.height,
            width=args.width,
            num_classes=args.num_classes,
            shape_count=args.shape_count,
            velocity_range=args.velocity_range,
            noise=NoiseConfig(
                label_flip_prob=args.label_flip_prob,
                softmax_temperature=args.softmax_temperature,
                flicker_prob=args.flicker_prob,
            ),
        )
    clips = generate(cfg, args.out)
    _emit({
        "out": str(args.out),
        "clips": [c.clip_id for c in clips],
        "frames": sum(len(c) for c in clips),
    })


def cmd_warp(args) -> None:
    clips = load_manifest(args.manifest)
    clip = _find_clip(clips, args.clip)
    src_i, dst_i = args.from_frame, args.to
    offset = dst_i - src_i
    flow = clip.load_flow(src_i, offset)
    mask = occlusion_mask(clip.load_image(src_i), clip.load_image(dst_i), flow,
                          args.alpha_occ, args.th)
    out = Path(args.out)
    stem = f"warp_{clip.clip_id}_{src_i:03d}_from_{dst_i:03d}"
    written = {}
    if args.labels:
        warped = warp_labels(clip.load_gt(dst_i), flow)
        written["labels"] = str(save_array(out / f"{stem}_labels.npy", warped.data))
    else:
        warped = warp_soft(clip.load_pred(dst_i), flow)
        written["pred"] = str(save_array(out / f"{stem}_pred.npy", warped.data))
    written["mask"] = str(save_array(out / f"{stem}_mask.npy", mask.data.astype(np.uint16)))
    written["soft"] = str(save_array(out / f"{stem}_soft.npy", mask.soft))
    _emit({"clip": clip.clip_id, "from": src_i, "to": dst_i,
           "visible_fraction": float(mask.data.mean()), "written": written})


def cmd_aggregate(args) -> None:
    clips = load_manifest(args.manifest)
    out = Path(args.out)
    entries = [pl.write_aggregated_clip(c, out, args.alpha_occ, args.th) for c in clips]
    path = pl.write_manifest(out / "manifest.json", entries)
    _emit({"manifest": str(path), "clips": len(entries)})


def cmd_gen(args) -> None:
    clips = load_manifest(args.manifest)
    cfg = PseudoConfig(strategy=args.strategy, alpha=args.alpha, beta=args.beta,
                       gamma=args.gamma, fixed_threshold=args.fixed_threshold)
    report = generate_dataset_labels(
        clips, cfg, args.out,
        alpha_occ=args.alpha_occ, th=args.th,
        use_aggregation=not args.no_aggregate, theta0=args.theta0,
    )
    _emit({k: v for k, v in report.items() if k != "labels"})


def cmd_refine(args) -> None:
    clips = load_manifest(args.manifest)
    out = Path(args.out)
    mapping = {}
    for clip in clips:
        labels = pl.load_labels(args.labels, clip)
        refined = pl.refine_clip_labels(clip, labels, args.mode, args.offset,
                                        args.strict_consensus, args.alpha_occ, args.th)
        rels = []
        for i, lm in enumerate(refined):
            rel = f"{clip.clip_id}/frame_{i:03d}_label.npy"
            save_array(out / rel, lm.data)
            rels.append(rel)
        mapping[clip.clip_id] = rels
    (out / "report.json").write_text(json.dumps({
        "mode": args.mode, "strict_consensus": args.strict_consensus,
        "reference_offset": args.offset, "labels": mapping,
    }, indent=2))
    _emit({"out": str(out), "mode": args.mode, "clips": len(mapping)})


def _table(rows: list[tuple[str, str]]) -> str:
    width = max(len(name) for name, _ in rows)
    return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)


def cmd_eval(args) -> None:
    clips = load_manifest(args.manifest)
    K = clips[0].num_classes
    preds_dir = Path(args.preds)
    all_preds, all_gts = [], []
    for clip in clips:
        all_preds.append(pl.load_labels(preds_dir, clip))
        all_gts.append([clip.load_gt(i) for i in range(len(clip))])
    report: dict = {"metric": args.metric, "num_classes": K}
    rows: list[tuple[str, str]] = []
    if args.metric in ("miou", "pmiou"):
        cm = confusion([p for c in all_preds for p in c], [g for c in all_gts for g in c], K)
        counts = cm.counts if args.metric == "miou" else cm.counts[:, :K]
        per_class, mean = _iou_from_counts(counts)
        report["per_class"] = [None if v != v else v for v in per_class]
        report["mean"] = mean
        rows += [(f"class {k}", "absent" if v != v else f"{100*v:6.2f}") for k, v in enumerate(per_class)]
        rows.append(("mean", f"{100*mean:6.2f}"))
        if args.metric == "pmiou":
            coverage = int(cm.counts[:, :K].sum()) / int(cm.counts.sum())
            report["coverage"] = coverage
            rows.append(("coverage", f"{100*coverage:6.2f}"))
    else:
        acc = VpqAccumulator(num_classes=K, spans=args.spans)
        for preds, gts in zip(all_preds, all_gts):
            acc.add_clip(preds, gts)
        per_span, mean = acc.result()
        report["spans"] = list(args.spans)
        report["per_span"] = per_span
        report["mean"] = mean
        rows += [(f"span {w}", f"{100*v:6.2f}") for w, v in zip(args.spans, per_span)]
        rows.append(("mean", f"{100*mean:6.2f}"))
    print(_table(rows))
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(json.dumps(report, indent=2))


def cmd_loss(args) -> None:
    clips = load_manifest(args.manifest)
    clip = _find_clip(clips, args.clip)
    frames = [int(t) for t in args.frames.split(",")]
    preds = [clip.load_pred(i) for i in frames]
    gts = [clip.load_gt(i) for i in frames]
    tube = TubePair(tuple(preds), tuple(gts))
    loss, grads = tube_matching_loss(tube)
    report = {
        "clip": clip.clip_id,
        "frames": frames,
        "cross_entropy": {str(i): cross_entropy(p, g) for i, p, g in zip(frames, preds, gts)},
        "tube_matching_loss": loss,
        "vst_objective": vst_objective(preds, gts, LossConfig()),
    }
    if args.grad_check:
        rng = np.random.default_rng(0)
        eps = 1e-4
        worst = 0.0
        checked = 0
        pred_arr = np.stack([p.data for p in preds]).astype(np.float64)
        gt_arr = np.stack([g.data for g in gts])
        for _ in range(50):
            l = int(rng.integers(len(frames)))
            k = int(rng.integers(clip.num_classes))
            y = int(rng.integers(clip.height))
            x = int(rng.integers(clip.width))
            analytic = grads[l][k, y, x]
            if abs(analytic) <= 1e-6:
                continue
            plus = pred_arr.copy()
            minus = pred_arr.copy()
            plus[l, k, y, x] += eps
            minus[l, k, y, x] -= eps
            fd = (tube_loss_arrays(plus, gt_arr)[0] - tube_loss_arrays(minus, gt_arr)[0]) / (2 * eps)
            worst = max(worst, abs(fd - analytic) / abs(analytic))
            checked += 1
        report["grad_check"] = {"coords_checked": checked, "max_rel_err": worst}
    _emit(report)


def cmd_pipeline(args) -> None:
    cfg = pl.load_config(
        args.config,
        out_dir=Path(args.out) if args.out else None,
        workers=args.workers,
        force=args.force,
        seed=args.seed,
    )
    summary = pl.run_pipeline(cfg)
    _emit({
        "out_dir": str(cfg.out_dir),
        "stages": {name: {"skipped": s["skipped"], "seconds": s["seconds"]}
                   for name, s in summary["stages"].items()},
        "metrics": summary["metrics"],
    })


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tubelabel",
        description="Flow-guided aggregation, pseudo-labeling, and video metrics "
                    "for soft segmentation maps.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic clips with GT and exact flow")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="pipeline TOML; its [synth] section is used")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--num-clips", type=_positive_int, default=2)
    p.add_argument("--frames-per-clip", type=_positive_int, default=5)
    p.add_argument("--height", type=_positive_int, default=48)
    p.add_argument("--width", type=_positive_int, default=64)
    p.add_argument("--num-classes", type=_positive_int, default=4)
    p.add_argument("--shape-count", type=_positive_int, default=3)
    p.add_argument("--velocity-range", type=float, default=2.0)
    p.add_argument("--label-flip-prob", type=float, default=0.0)
    p.add_argument("--softmax-temperature", type=float, default=0.25)
    p.add_argument("--flicker-prob", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("warp", help="warp a neighbor frame onto a target frame")
    p.add_argument("--manifest", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--from", dest="from_frame", type=int, required=True, metavar="T1")
    p.add_argument("--to", type=int, required=True, metavar="T2")
    p.add_argument("--labels", action="store_true", help="warp GT labels instead of predictions")
    p.add_argument("--out", default=".")
    _add_warp_params(p)
    p.set_defaults(func=cmd_warp)

    p = sub.add_parser("aggregate", help="write temporally aggregated predictions")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _add_warp_params(p)
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("gen", help="emit pseudo labels under a threshold strategy")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", default="clip_adaptive",
                   choices=("fixed", "class_balanced", "instance_adaptive", "clip_adaptive"))
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=0.9)
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--fixed-threshold", type=float, default=0.9)
    p.add_argument("--theta0", type=float, default=THETA0)
    p.add_argument("--no-aggregate", action="store_true",
                   help="threshold raw predictions even under clip_adaptive")
    _add_warp_params(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("refine", help="temporal-consensus refinement of emitted labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--labels", required=True, help="directory produced by gen")
    p.add_argument("--mode", choices=("cutout", "fillin"), default="cutout")
    p.add_argument("--strict-consensus", action="store_true",
                   help="also drop labels lacking a usable reference")
    p.add_argument("--offset", type=int, default=-1, help="reference frame offset")
    p.add_argument("--out", required=True)
    _add_warp_params(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("eval", help="score emitted labels against manifest GT")
    p.add_argument("--manifest", required=True)
    p.add_argument("--preds", required=True, help="directory of emitted label maps")
    p.add_argument("--metric", choices=("miou", "pmiou", "vpq"), default="miou")
    p.add_argument("--spans", type=_spans, default=DEFAULT_SPANS)
    p.add_argument("--report", help="also write the report JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("loss", help="loss components for a frame tube")
    p.add_argument("--manifest", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--frames", required=True, help="comma-separated frame indices")
    p.add_argument("--grad-check", action="store_true")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("pipeline", help="run synth -> aggregate -> gen -> refine -> eval")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override out_dir from the config")
    p.add_argument("--workers", type=_positive_int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--force", action="store_true", help="redo stages whose outputs exist")
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except TubeLabelError as e:
        print(f"error [{args.command}]: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
