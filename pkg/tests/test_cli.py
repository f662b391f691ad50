import hashlib
import json

import numpy as np
import pytest
from PIL import Image

from cluegaze import dataio
from cluegaze.cli import main
from cluegaze.engine import load_checkpoint

TOY_ARGS = ["--set", "model.channels=16", "--set", "model.roi_size=3",
            "--set", "model.num_stages=2"]


def run(argv):
    return main(argv)


def synth(tmp_path, name="data", clips=2, frames=5, seed=1):
    out = tmp_path / name
    code = run(["synth", "--out", str(out), "--clips", str(clips),
                "--seed", str(seed), "--frames", str(frames)])
    assert code == 0
    return out / "manifest.json"


class TestSynthCommand:
    def test_creates_manifest(self, tmp_path):
        manifest = synth(tmp_path)
        m = dataio.load_manifest(manifest)
        assert len(m.clips) == 2
        assert m.clips[0].n_frames == 5

    def test_repeatable_hash(self, tmp_path):
        m1 = synth(tmp_path, "a", seed=9)
        m2 = synth(tmp_path, "b", seed=9)
        assert hashlib.sha256(m1.read_bytes()).digest() == \
            hashlib.sha256(m2.read_bytes()).digest()

    def test_negative_clips_exit_code_2(self, tmp_path, capsys):
        code = run(["synth", "--out", str(tmp_path / "x"), "--clips", "-1"])
        assert code == 2
        assert "clips" in capsys.readouterr().err

    def test_bad_walk_smoothness_exit_code_2(self, tmp_path):
        code = run(["synth", "--out", str(tmp_path / "x"), "--clips", "1",
                    "--set", "synth.walk_smoothness=2.0"])
        assert code == 2


class TestConfigHandling:
    def test_unknown_key_lists_valid_keys(self, tmp_path, capsys):
        code = run(["synth", "--out", str(tmp_path / "x"), "--clips", "1",
                    "--set", "synth.bogus=1"])
        assert code == 2
        err = capsys.readouterr().err
        assert "synth.bogus" in err
        assert "synth.walk_smoothness" in err  # the valid-key list is printed

    def test_config_file_and_override_precedence(self, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"synth": {"T": 3, "seed": 5}}))
        out = tmp_path / "d"
        code = run(["synth", "--out", str(out), "--clips", "1",
                    "--config", str(cfg_file), "--set", "synth.T=4"])
        assert code == 0
        m = dataio.load_manifest(out / "manifest.json")
        assert m.clips[0].n_frames == 4  # override wins over file

    def test_config_file_unknown_section_rejected(self, tmp_path):
        cfg_file = tmp_path / "cfg.json"
        cfg_file.write_text(json.dumps({"nonsense": {"a": 1}}))
        code = run(["synth", "--out", str(tmp_path / "x"), "--clips", "1",
                    "--config", str(cfg_file)])
        assert code == 2


class TestTrainCommand:
    def test_smoke_run(self, tmp_path):
        manifest = synth(tmp_path)
        out = tmp_path / "run"
        code = run(["train", "--manifest", str(manifest), "--out", str(out),
                    "--quiet", *TOY_ARGS,
                    "--set", "train.iterations=10", "--set", "train.batch_size=2",
                    "--set", "train.checkpoint_every=5"])
        assert code == 0
        rows = (out / "losses.csv").read_text().strip().splitlines()
        assert len(rows) == 11
        ckpt = load_checkpoint(out / "ckpt_000010.ckpt")
        assert ckpt.iteration == 10

    def test_ablation_flag_recorded_in_checkpoint(self, tmp_path):
        manifest = synth(tmp_path)
        out = tmp_path / "run"
        code = run(["train", "--manifest", str(manifest), "--out", str(out),
                    "--quiet", *TOY_ARGS, "--set", "model.use_eye_clue=false",
                    "--set", "train.iterations=2", "--set", "train.batch_size=2",
                    "--set", "train.checkpoint_every=2"])
        assert code == 0
        ckpt = load_checkpoint(out / "ckpt_000002.ckpt")
        assert ckpt.config.use_eye_clue is False
        assert ckpt.config.enabled_clues() == ("head", "face")

    def test_resume_continues_iteration_counter(self, tmp_path):
        manifest = synth(tmp_path)
        first = tmp_path / "first"
        code = run(["train", "--manifest", str(manifest), "--out", str(first),
                    "--quiet", *TOY_ARGS, "--set", "train.iterations=3",
                    "--set", "train.batch_size=2", "--set", "train.checkpoint_every=3"])
        assert code == 0
        second = tmp_path / "second"
        code = run(["train", "--manifest", str(manifest), "--out", str(second),
                    "--quiet", *TOY_ARGS, "--resume", str(first / "ckpt_000003.ckpt"),
                    "--set", "train.iterations=6",
                    "--set", "train.batch_size=2", "--set", "train.checkpoint_every=3"])
        assert code == 0
        ckpt = load_checkpoint(second / "ckpt_000006.ckpt")
        assert ckpt.iteration == 6

        # identical to an uninterrupted 6-iteration run
        straight = tmp_path / "straight"
        code = run(["train", "--manifest", str(manifest), "--out", str(straight),
                    "--quiet", *TOY_ARGS, "--set", "train.iterations=6",
                    "--set", "train.batch_size=2", "--set", "train.checkpoint_every=6"])
        assert code == 0
        a = load_checkpoint(straight / "ckpt_000006.ckpt")
        b = load_checkpoint(second / "ckpt_000006.ckpt")
        for name in a.tensors:
            assert (a.tensors[name] == b.tensors[name]).all(), name


@pytest.fixture
def trained_setup(tmp_path):
    manifest = synth(tmp_path, clips=2, frames=7)
    out = tmp_path / "run"
    code = run(["train", "--manifest", str(manifest), "--out", str(out),
                "--quiet", *TOY_ARGS, "--set", "model.T=7",
                "--set", "train.iterations=3", "--set", "train.batch_size=2",
                "--set", "train.checkpoint_every=3"])
    assert code == 0
    return manifest, out / "ckpt_000003.ckpt"


class TestInferEvalRender:
    def test_infer_writes_one_record_per_frame(self, tmp_path, trained_setup):
        manifest, ckpt = trained_setup
        pred_path = tmp_path / "pred.json"
        code = run(["infer", "--checkpoint", str(ckpt), "--manifest", str(manifest),
                    "--out", str(pred_path)])
        assert code == 0
        records = json.loads(pred_path.read_text())
        assert len(records) == 14  # 2 clips x 7 frames
        clip0 = [r for r in records if r["clip_id"] == "clip0000"]
        assert sorted(r["frame_index"] for r in clip0) == list(range(7))

    def test_eval_of_perfect_predictions_is_zero(self, tmp_path):
        manifest_path = synth(tmp_path, clips=1, frames=5)
        m = dataio.load_manifest(manifest_path)
        records = []
        for entry in m.clips:
            for t in range(entry.n_frames):
                records.append({"clip_id": entry.id, "frame_index": t,
                                "gaze": [float(v) for v in entry.gaze[t]]})
        pred_path = tmp_path / "perfect.json"
        pred_path.write_text(json.dumps(records))
        report_path = tmp_path / "report.json"
        code = run(["eval", "--predictions", str(pred_path),
                    "--manifest", str(manifest_path), "--out", str(report_path)])
        assert code == 0
        report = json.loads(report_path.read_text())
        assert report["splits"]["all"]["mean_deg"] == pytest.approx(0.0, abs=1e-9)

    def test_eval_coverage_failure_exit_code_4(self, tmp_path):
        manifest_path = synth(tmp_path, clips=1, frames=5)
        pred_path = tmp_path / "partial.json"
        pred_path.write_text(json.dumps(
            [{"clip_id": "clip0000", "frame_index": 0, "gaze": [0, 0, -1]}]))
        code = run(["eval", "--predictions", str(pred_path), "--manifest", str(manifest_path)])
        assert code == 4

    def test_render_draws_both_arrows(self, tmp_path, trained_setup):
        manifest, ckpt = trained_setup
        pred_path = tmp_path / "pred.json"
        assert run(["infer", "--checkpoint", str(ckpt), "--manifest", str(manifest),
                    "--out", str(pred_path)]) == 0
        overlays = tmp_path / "overlays"
        code = run(["render", "--manifest", str(manifest), "--predictions", str(pred_path),
                    "--out", str(overlays), "--gt"])
        assert code == 0
        files = sorted(overlays.glob("*.png"))
        assert len(files) == 14
        img = np.asarray(Image.open(files[0]).convert("RGB")).astype(int)
        source = dataio.load_manifest(manifest)
        original = np.asarray(Image.open(
            tmp_path / "data" / source.clips[0].frames[0]).convert("RGB")).astype(int)
        assert (img != original).any()
        cyan = (img[..., 0] < 80) & (img[..., 1] > 200) & (img[..., 2] > 200)
        red = (img[..., 0] > 200) & (img[..., 1] < 80) & (img[..., 2] < 80)
        assert cyan.any(), "prediction arrow missing"
        assert red.any(), "ground-truth arrow missing"

    def test_infer_size_mismatch_exit_code_2(self, tmp_path, trained_setup):
        _, ckpt = trained_setup
        other = synth(tmp_path, name="big", clips=1, frames=7)
        # regenerate at a different resolution
        big = tmp_path / "big128"
        assert run(["synth", "--out", str(big), "--clips", "1", "--frames", "7",
                    "--set", "synth.image_size=128"]) == 0
        code = run(["infer", "--checkpoint", str(ckpt),
                    "--manifest", str(big / "manifest.json"),
                    "--out", str(tmp_path / "x.json")])
        assert code == 2
