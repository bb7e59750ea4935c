from __future__ import annotations

import json

import numpy as np
import pytest

from tubelabel.errors import MissingFile, SchemaError
from tubelabel.metrics import miou, vpq_s
from tubelabel.pipeline import (
    PipelineConfig,
    evaluate_labels,
    load_config,
    load_labels,
    refine_clip_labels,
    run_pipeline,
    write_aggregated_clip,
)
from tubelabel.pseudo import PseudoConfig, generate_dataset_labels
from tubelabel.synth import NoiseConfig, SynthConfig, generate
from tubelabel.tensor_io import IGNORE, LabelMap, load_manifest, write_manifest

from conftest import PROPERTY_CASES


def _toml(tmp_path, body: str):
    p = tmp_path / "cfg.toml"
    p.write_text(body)
    return p


SMALL = """
out_dir = "{out}"
workers = 1

[synth]
seed = 7
num_clips = 2
frames_per_clip = 3
height = 16
width = 16
num_classes = 3
shape_count = 2

[synth.noise]
label_flip_prob = 0.15
softmax_temperature = 0.3
flicker_prob = 0.2

[pseudo]
strategy = "clip_adaptive"
alpha = 0.6
beta = 0.8

[refine]
mode = "cutout"

[metrics]
spans = [1, 2, 3]
"""


class TestConfig:
    def test_full_file(self, tmp_path):
        cfg = load_config(_toml(tmp_path, SMALL.format(out=tmp_path / "run")))
        assert cfg.synth.seed == 7 and cfg.synth.noise.flicker_prob == 0.2
        assert cfg.pseudo.alpha == 0.6 and cfg.pseudo.beta == 0.8
        assert cfg.spans == (1, 2, 3) and cfg.refine_mode == "cutout"

    def test_overrides_win(self, tmp_path):
        path = _toml(tmp_path, SMALL.format(out=tmp_path / "run"))
        cfg = load_config(path, workers=4, seed=99, out_dir=tmp_path / "other")
        assert cfg.workers == 4 and cfg.synth.seed == 99
        assert cfg.out_dir == tmp_path / "other"
        # None overrides are ignored rather than clearing file values
        cfg = load_config(path, workers=None, seed=None)
        assert cfg.workers == 1 and cfg.synth.seed == 7

    def test_missing_out_dir(self, tmp_path):
        with pytest.raises(SchemaError):
            load_config(_toml(tmp_path, "[synth]\nseed = 1\n"))

    def test_bad_toml(self, tmp_path):
        with pytest.raises(SchemaError):
            load_config(_toml(tmp_path, "out_dir = \n"))

    def test_unknown_keys_rejected(self, tmp_path):
        with pytest.raises(SchemaError):
            load_config(_toml(tmp_path, 'out_dir = "x"\n[pseudo]\nbogus = 1\n'))
        with pytest.raises(SchemaError):
            load_config(_toml(tmp_path, 'out_dir = "x"\n[synth]\nbogus = 1\n'))

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFile):
            load_config(tmp_path / "absent.toml")

    def test_config_validation(self, tmp_path):
        with pytest.raises(ValueError):
            PipelineConfig(out_dir=tmp_path, workers=0)
        with pytest.raises(ValueError):
            PipelineConfig(out_dir=tmp_path, refine_mode="polish")
        with pytest.raises(ValueError):
            PipelineConfig(out_dir=tmp_path, reference_offset=0)


def _small_cfg(out_dir, **kw) -> PipelineConfig:
    synth = SynthConfig(seed=5, num_clips=2, frames_per_clip=3, height=16, width=16,
                        num_classes=3, shape_count=2,
                        noise=NoiseConfig(label_flip_prob=0.15, flicker_prob=0.2))
    return PipelineConfig(out_dir=out_dir, synth=synth, spans=(1, 2), **kw)


class TestRun:
    def test_end_to_end_layout(self, tmp_path):
        summary = run_pipeline(_small_cfg(tmp_path / "run"))
        out = tmp_path / "run"
        for sub in ("data", "agg", "labels", "refined"):
            assert (out / sub).is_dir()
        assert (out / "metrics.json").exists() and (out / "run_summary.json").exists()
        m = summary["metrics"]
        assert set(m) == {"num_classes", "miou", "p_miou", "vpq"}
        assert 0.0 <= m["p_miou"]["mean"] <= 1.0
        assert 0.0 <= m["p_miou"]["coverage"] <= 1.0
        assert m["vpq"]["spans"] == [1, 2]
        assert set(summary["stages"]) == {"synth", "aggregate", "gen", "refine", "eval"}
        assert not summary["stages"]["synth"]["skipped"]

    def test_rerun_skips_and_reproduces(self, tmp_path):
        first = run_pipeline(_small_cfg(tmp_path / "run"))
        second = run_pipeline(_small_cfg(tmp_path / "run"))
        for stage in ("synth", "aggregate", "gen", "refine"):
            assert second["stages"][stage]["skipped"]
            assert second["stages"][stage]["outputs"] == first["stages"][stage]["outputs"]
        assert second["metrics"] == first["metrics"]

    def test_force_redoes_stages_identically(self, tmp_path):
        first = run_pipeline(_small_cfg(tmp_path / "run"))
        forced = run_pipeline(_small_cfg(tmp_path / "run", force=True))
        for stage in ("synth", "aggregate", "gen", "refine"):
            assert not forced["stages"][stage]["skipped"]
            assert forced["stages"][stage]["outputs"] == first["stages"][stage]["outputs"]

    def test_existing_manifest_skips_synth(self, tmp_path):
        data = generate(SynthConfig(seed=1, num_clips=1, frames_per_clip=3, height=16, width=16),
                        tmp_path / "data")
        cfg = PipelineConfig(out_dir=tmp_path / "run", manifest=tmp_path / "data" / "manifest.json",
                             spans=(1, 2))
        summary = run_pipeline(cfg)
        assert summary["stages"]["synth"]["skipped"]
        assert summary["stages"]["synth"]["outputs"] == {}
        assert not (tmp_path / "run" / "data").exists()

    def test_refine_none_evaluates_raw_labels(self, tmp_path):
        summary = run_pipeline(_small_cfg(tmp_path / "run", refine_mode="none"))
        assert summary["stages"]["refine"]["skipped"]
        assert not (tmp_path / "run" / "refined").exists()

    def test_image_unit_strategy_skips_aggregation(self, tmp_path):
        cfg = _small_cfg(tmp_path / "run", pseudo=PseudoConfig(strategy="fixed", fixed_threshold=0.5))
        summary = run_pipeline(cfg)
        assert summary["stages"]["aggregate"]["skipped"]
        assert not (tmp_path / "run" / "agg").exists()


class TestPieces:
    def test_aggregated_manifest_loads_and_points_back(self, tmp_path):
        clips = generate(SynthConfig(seed=2, num_clips=1, frames_per_clip=3, height=16, width=16),
                         tmp_path / "data")
        entries = [write_aggregated_clip(c, tmp_path / "agg", 50.0, 0.7) for c in clips]
        path = write_manifest(tmp_path / "agg" / "manifest.json", entries)
        agg_clips = load_manifest(path)
        assert len(agg_clips) == 1 and len(agg_clips[0]) == 3
        # preds come from the aggregation, everything else from the source
        pred = agg_clips[0].load_pred(0)
        assert pred.shape_hw == (16, 16)
        assert (agg_clips[0].load_gt(1).data == clips[0].load_gt(1).data).all()
        assert (agg_clips[0].load_image(2).data == clips[0].load_image(2).data).all()

    def test_load_labels_glob_fallback(self, tmp_path):
        clips = generate(SynthConfig(seed=3, num_clips=1, frames_per_clip=3, height=16, width=16),
                         tmp_path / "data")
        generate_dataset_labels(clips, PseudoConfig(strategy="fixed", fixed_threshold=0.5),
                                tmp_path / "labels")
        via_report = [lm.data for lm in load_labels(tmp_path / "labels", clips[0])]
        (tmp_path / "labels" / "report.json").unlink()
        via_glob = [lm.data for lm in load_labels(tmp_path / "labels", clips[0])]
        assert all((a == b).all() for a, b in zip(via_report, via_glob))
        (tmp_path / "labels" / "clip_000" / "frame_000_label.npy").unlink()
        with pytest.raises(MissingFile):
            load_labels(tmp_path / "labels", clips[0])

    def test_refine_passthrough_at_clip_edges(self, tmp_path):
        clips = generate(SynthConfig(seed=4, num_clips=1, frames_per_clip=3, height=16, width=16,
                                     noise=NoiseConfig(label_flip_prob=0.3)),
                         tmp_path / "data")
        clip = clips[0]
        labels = [LabelMap(clip.load_pred(i).data.argmax(axis=0).astype(np.uint16))
                  for i in range(3)]
        refined = refine_clip_labels(clip, labels, "cutout", -1, False, 50.0, 0.7)
        assert (refined[0].data == labels[0].data).all()  # no frame -1
        assert ((refined[1].data == labels[1].data) | (refined[1].data == IGNORE)).all()

    def test_evaluate_matches_direct_metric_calls(self, tmp_path):
        clips = generate(SynthConfig(seed=6, num_clips=2, frames_per_clip=3, height=16, width=16,
                                     noise=NoiseConfig(label_flip_prob=0.2)),
                         tmp_path / "data")
        generate_dataset_labels(clips, PseudoConfig(strategy="fixed", fixed_threshold=0.0),
                                tmp_path / "labels")
        got = evaluate_labels(clips, tmp_path / "labels", (1, 2), workers=2)
        preds = [p for c in clips for p in load_labels(tmp_path / "labels", c)]
        gts = [c.load_gt(i) for c in clips for i in range(len(c))]
        _, want_miou = miou(preds, gts, clips[0].num_classes)
        assert got["miou"]["mean"] == want_miou
        acc_spans = []
        for c in clips:
            ps = load_labels(tmp_path / "labels", c)
            gs = [c.load_gt(i) for i in range(len(c))]
            acc_spans.append((ps, gs))
        # VPQ pools tallies over clips before dividing, so compare via vpq_s
        # only in the single-clip case
        single = evaluate_labels(clips[:1], tmp_path / "labels", (1, 2), workers=1)
        want_spans, want_mean = vpq_s(*acc_spans[0], clips[0].num_classes, (1, 2))
        assert single["vpq"]["per_span"] == want_spans
        assert single["vpq"]["mean"] == want_mean


class TestProperties:
    def test_property_worker_count_never_changes_outputs(self, tmp_path):
        # every NPY file and the metrics must hash identically whether the
        # clip-parallel stages run on one thread or several
        rng = np.random.default_rng(95)
        compared = 0
        i = 0
        while compared < PROPERTY_CASES:
            synth = SynthConfig(
                seed=int(rng.integers(0, 10_000)),
                num_clips=int(rng.integers(2, 4)),
                frames_per_clip=int(rng.integers(2, 4)),
                height=16,
                width=16,
                num_classes=int(rng.integers(2, 5)),
                shape_count=int(rng.integers(1, 4)),
                noise=NoiseConfig(
                    label_flip_prob=float(rng.uniform(0, 0.3)),
                    flicker_prob=float(rng.uniform(0, 0.3)),
                ),
            )
            strategy = ("clip_adaptive", "instance_adaptive", "fixed")[i % 3]
            mode = ("cutout", "fillin")[i % 2]
            kw = dict(pseudo=PseudoConfig(strategy=strategy), refine_mode=mode, spans=(1, 2))
            a = run_pipeline(PipelineConfig(out_dir=tmp_path / f"a{i}", synth=synth, workers=1, **kw))
            b = run_pipeline(PipelineConfig(out_dir=tmp_path / f"b{i}", synth=synth,
                                            workers=int(rng.integers(2, 5)), **kw))
            assert a["metrics"] == b["metrics"]
            for stage in ("synth", "aggregate", "gen", "refine"):
                ha = a["stages"][stage]["outputs"]
                hb = b["stages"][stage]["outputs"]
                assert ha == hb
                compared += len(ha)
            i += 1
        assert compared >= PROPERTY_CASES


def test_summary_json_round_trips(tmp_path):
    summary = run_pipeline(_small_cfg(tmp_path / "run"))
    on_disk = json.loads((tmp_path / "run" / "run_summary.json").read_text())
    assert on_disk == summary
