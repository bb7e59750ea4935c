from __future__ import annotations

import json

import numpy as np
import pytest

from tubelabel.cli import main
from tubelabel.tensor_io import IGNORE, load_array, load_manifest, save_array


def _run(capsys, *argv) -> dict:
    assert main(list(argv)) == 0
    return json.loads(capsys.readouterr().out)


@pytest.fixture()
def dataset(tmp_path, capsys):
    out = tmp_path / "data"
    _run(capsys, "synth", "--out", str(out), "--seed", "3", "--num-clips", "2",
         "--frames-per-clip", "3", "--height", "16", "--width", "16",
         "--num-classes", "3", "--label-flip-prob", "0.2", "--flicker-prob", "0.2")
    return out


class TestSynth:
    def test_reports_layout(self, tmp_path, capsys):
        out = _run(capsys, "synth", "--out", str(tmp_path / "d"), "--seed", "1",
                   "--num-clips", "1", "--frames-per-clip", "2",
                   "--height", "16", "--width", "16")
        assert out["clips"] == ["clip_000"] and out["frames"] == 2
        assert (tmp_path / "d" / "manifest.json").exists()


class TestWarp:
    def test_writes_maps_and_mask(self, dataset, tmp_path, capsys):
        out = _run(capsys, "warp", "--manifest", str(dataset / "manifest.json"),
                   "--clip", "clip_000", "--from", "1", "--to", "0",
                   "--out", str(tmp_path / "w"))
        assert 0.0 <= out["visible_fraction"] <= 1.0
        assert load_array(out["written"]["pred"], 3).shape == (3, 16, 16)
        assert set(np.unique(load_array(out["written"]["mask"], 2))) <= {0, 1}

    def test_labels_mode(self, dataset, tmp_path, capsys):
        out = _run(capsys, "warp", "--manifest", str(dataset / "manifest.json"),
                   "--clip", "clip_000", "--from", "1", "--to", "2", "--labels",
                   "--out", str(tmp_path / "w"))
        warped = load_array(out["written"]["labels"], 2)
        assert ((warped < 3) | (warped == IGNORE)).all()

    def test_unknown_clip_fails_cleanly(self, dataset, tmp_path, capsys):
        rc = main(["warp", "--manifest", str(dataset / "manifest.json"),
                   "--clip", "nope", "--from", "0", "--to", "1", "--out", str(tmp_path)])
        assert rc == 1
        assert "error [warp]" in capsys.readouterr().err


class TestStages:
    def test_aggregate_gen_refine_eval_chain(self, dataset, tmp_path, capsys):
        agg = _run(capsys, "aggregate", "--manifest", str(dataset / "manifest.json"),
                   "--out", str(tmp_path / "agg"))
        assert agg["clips"] == 2
        gen = _run(capsys, "gen", "--manifest", agg["manifest"], "--no-aggregate",
                   "--strategy", "clip_adaptive", "--alpha", "0.6",
                   "--out", str(tmp_path / "labels"))
        assert gen["strategy"] == "clip_adaptive"
        assert 0.0 <= gen["overall_proportion"] <= 1.0
        ref = _run(capsys, "refine", "--manifest", str(dataset / "manifest.json"),
                   "--labels", str(tmp_path / "labels"), "--mode", "cutout",
                   "--out", str(tmp_path / "refined"))
        assert ref["clips"] == 2
        assert main(["eval", "--manifest", str(dataset / "manifest.json"),
                     "--preds", str(tmp_path / "refined"), "--metric", "pmiou",
                     "--report", str(tmp_path / "r.json")]) == 0
        table = capsys.readouterr().out
        assert "coverage" in table and "mean" in table
        report = json.loads((tmp_path / "r.json").read_text())
        assert report["metric"] == "pmiou" and 0.0 <= report["coverage"] <= 1.0

    def test_eval_vpq_table(self, dataset, capsys):
        # GT against itself: every span scores 100
        labels_dir = dataset.parent / "self"
        clips = load_manifest(dataset / "manifest.json")
        for clip in clips:
            for i in range(len(clip)):
                save_array(labels_dir / clip.clip_id / f"frame_{i:03d}_label.npy",
                           clip.load_gt(i).data)
        assert main(["eval", "--manifest", str(dataset / "manifest.json"),
                     "--preds", str(labels_dir), "--metric", "vpq",
                     "--spans", "1,2,3"]) == 0
        out = capsys.readouterr().out
        for line in out.strip().splitlines():
            assert line.endswith("100.00")

    def test_loss_grad_check(self, dataset, capsys):
        out = _run(capsys, "loss", "--manifest", str(dataset / "manifest.json"),
                   "--clip", "clip_001", "--frames", "0,1", "--grad-check")
        assert out["tube_matching_loss"] >= 0.0
        gc = out["grad_check"]
        assert gc["coords_checked"] > 0 and gc["max_rel_err"] < 1e-4


class TestPipelineCommand:
    def test_runs_from_config(self, tmp_path, capsys):
        cfg = tmp_path / "p.toml"
        cfg.write_text(
            f'out_dir = "{tmp_path / "run"}"\n'
            "[synth]\nseed = 2\nnum_clips = 2\nframes_per_clip = 3\n"
            "height = 16\nwidth = 16\nnum_classes = 3\n"
            "[synth.noise]\nlabel_flip_prob = 0.2\n"
            "[metrics]\nspans = [1, 2]\n"
        )
        out = _run(capsys, "pipeline", "--config", str(cfg))
        assert set(out["stages"]) == {"synth", "aggregate", "gen", "refine", "eval"}
        assert 0.0 <= out["metrics"]["p_miou"]["mean"] <= 1.0
        # --seed overrides the file without editing it
        out2 = _run(capsys, "pipeline", "--config", str(cfg),
                    "--out", str(tmp_path / "run2"), "--seed", "3")
        assert out2["metrics"] != out["metrics"]

    def test_missing_config_is_domain_error(self, tmp_path, capsys):
        assert main(["pipeline", "--config", str(tmp_path / "nope.toml")]) == 1
        assert "error [pipeline]" in capsys.readouterr().err


class TestUsage:
    def test_no_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2

    def test_bad_choice_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--manifest", "m", "--preds", "p", "--metric", "bogus"])
        assert exc.value.code == 2

    def test_bad_span_string(self):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--manifest", "m", "--preds", "p", "--spans", "1,x"])
        assert exc.value.code == 2
