import time

import numpy as np
import pytest
import torch

from cluegaze import dataio, synthgen
from cluegaze.engine import (GazeEstimator, ModelConfig, TrainConfig, apply_box_deltas,
                             batch_targets, build_model, clamp_boxes, clips_to_tensor,
                             infer_video, load_checkpoint, lr_at_iteration, make_optimizer,
                             save_checkpoint, train)
from cluegaze.errors import ConfigError, TrainingAbortError
from cluegaze.losses import total_loss

SMALL = ModelConfig.toy(channels=16, roi_size=3, num_stages=2)


def small_manifest(tmp_path, n_clips=3, t=5, seed=7):
    path = synthgen.generate_dataset(synthgen.SynthConfig(seed=seed, T=t), n_clips,
                                     tmp_path / "data")
    return dataio.load_manifest(path)


def clip_frames_tensor(clip):
    return torch.from_numpy(clip.frames).permute(0, 3, 1, 2).unsqueeze(0)


class TestConfig:
    def test_all_clues_disabled_rejected(self):
        with pytest.raises(ConfigError, match="clue"):
            ModelConfig.toy(use_head_clue=False, use_face_clue=False, use_eye_clue=False)

    def test_zero_stages_rejected(self):
        with pytest.raises(ConfigError, match="num_stages"):
            ModelConfig.toy(num_stages=0)

    def test_enabled_clue_order_is_stable(self):
        cfg = ModelConfig.toy(use_face_clue=False)
        assert cfg.enabled_clues() == ("head", "eye")

    def test_full_defaults(self):
        cfg = ModelConfig.full()
        assert (cfg.T, cfg.num_stages, cfg.channels, cfg.attn_heads) == (7, 4, 256, 8)
        assert cfg.image_size == 448
        tc = TrainConfig.full()
        assert (tc.batch_size, tc.iterations, tc.lr_decay_iteration) == (8, 13000, 12000)


class TestLrSchedule:
    def test_backbone_decay_at_threshold(self):
        tc = TrainConfig.full()
        assert lr_at_iteration(1e-4, 11999, tc) == pytest.approx(1e-4)
        assert lr_at_iteration(1e-4, 12000, tc) == pytest.approx(1e-5)
        assert lr_at_iteration(1e-3, 12500, tc) == pytest.approx(1e-4)


class TestForward:
    def test_deterministic_outputs(self, tiny_synth_cfg):
        clip = synthgen.generate_clip(tiny_synth_cfg)
        frames = clip_frames_tensor(clip)
        a = build_model(SMALL, seed=3)
        b = build_model(SMALL, seed=3)
        with torch.no_grad():
            pa, pb = a(frames), b(frames)
        assert torch.equal(pa[-1].fused, pb[-1].fused)
        assert torch.equal(pa[-1].boxes, pb[-1].boxes)

    def test_identity_second_stage_keeps_boxes(self, tiny_synth_cfg):
        clip = synthgen.generate_clip(tiny_synth_cfg)
        model = build_model(SMALL, seed=0)
        stage2 = model.stages[1]
        with torch.no_grad():
            stage2.spatial.attn.out_proj.weight.zero_()
            stage2.spatial.attn.out_proj.bias.zero_()
            stage2.temporal.attn.out_proj.weight.zero_()
            stage2.temporal.attn.out_proj.bias.zero_()
            stage2.dynamic.generator.weight.zero_()
            stage2.dynamic.generator.bias.zero_()
            stage2.dynamic.out_proj.bias.zero_()
            for c in model.clues:
                stage2.heads.box_mlps[c].fc2.weight.zero_()
                stage2.heads.box_mlps[c].fc2.bias.zero_()
        with torch.no_grad():
            preds = model(clip_frames_tensor(clip))
        assert torch.equal(preds[1].boxes, preds[0].boxes)

    def test_localization_disabled_freezes_proposals(self, tiny_synth_cfg):
        clip = synthgen.generate_clip(tiny_synth_cfg)
        cfg = ModelConfig.toy(channels=16, roi_size=3, num_stages=3,
                              use_localization_head=False)
        model = build_model(cfg, seed=0)
        with torch.no_grad():
            preds = model(clip_frames_tensor(clip))
        init = clamp_boxes(model.init_proposals).unsqueeze(0)
        for sp in preds:
            assert sp.existence is None and sp.box_deltas is None
            assert torch.equal(sp.boxes, init)

    def test_single_clue_config(self, tiny_synth_cfg):
        clip = synthgen.generate_clip(tiny_synth_cfg)
        cfg = ModelConfig.toy(channels=16, roi_size=3, num_stages=2,
                              use_head_clue=False, use_eye_clue=False)
        model = build_model(cfg, seed=0)
        with torch.no_grad():
            preds = model(clip_frames_tensor(clip))
        assert preds[-1].gaze.shape == (1, 1, 5, 3)
        assert preds[-1].fused.shape == (1, 5, 3)

    def test_interactions_disabled(self, tiny_synth_cfg):
        clip = synthgen.generate_clip(tiny_synth_cfg)
        cfg = ModelConfig.toy(channels=16, roi_size=3, num_stages=2,
                              use_spatial_interaction=False,
                              use_temporal_interaction=False)
        model = build_model(cfg, seed=0)
        assert model.stages[0].spatial is None and model.stages[0].temporal is None
        with torch.no_grad():
            preds = model(clip_frames_tensor(clip))
        assert preds[-1].fused.shape == (1, 5, 3)

    def test_window_longer_than_t_rejected(self, tiny_synth_cfg):
        clip = synthgen.generate_clip(tiny_synth_cfg)
        cfg = ModelConfig.toy(channels=16, roi_size=3, T=3)
        model = build_model(cfg, seed=0)
        with pytest.raises(ConfigError, match="window length"):
            model(clip_frames_tensor(clip))

    def test_tail_window_slices_queries(self, tiny_synth_cfg):
        clip = synthgen.generate_clip(tiny_synth_cfg)
        model = build_model(SMALL, seed=0)
        with torch.no_grad():
            preds = model(clip_frames_tensor(clip)[:, :3])
        assert preds[-1].fused.shape == (1, 3, 3)

    def test_proposals_stay_valid_boxes(self, tiny_synth_cfg):
        clip = synthgen.generate_clip(tiny_synth_cfg)
        model = build_model(SMALL, seed=1)
        # push deltas hard to force clamping
        with torch.no_grad():
            for stage in model.stages:
                for c in model.clues:
                    stage.heads.box_mlps[c].fc2.bias.copy_(
                        torch.tensor([5.0, -5.0, 10.0, -10.0]))
            preds = model(clip_frames_tensor(clip))
        for sp in preds:
            b = sp.boxes
            assert (b[..., 0] >= 0).all() and (b[..., 0] <= 1).all()
            assert (b[..., 1] >= 0).all() and (b[..., 1] <= 1).all()
            assert (b[..., 2] > 0).all() and (b[..., 2] <= 1).all()
            assert (b[..., 3] > 0).all() and (b[..., 3] <= 1).all()

    def test_toy_forward_under_100ms(self, tiny_synth_cfg):
        clip = synthgen.generate_clip(tiny_synth_cfg)
        model = build_model(ModelConfig.toy(num_stages=4), seed=0)
        model.eval()
        frames = clip_frames_tensor(clip)
        with torch.no_grad():
            model(frames)  # warmup
            start = time.perf_counter()
            model(frames)
            elapsed = time.perf_counter() - start
        assert elapsed < 0.100, f"toy forward took {elapsed * 1e3:.1f} ms"


class TestGradientFlow:
    def test_every_parameter_receives_gradient(self, tmp_path):
        manifest = small_manifest(tmp_path)
        model = build_model(SMALL, seed=2)
        clips = [dataio.load_clip(manifest, e) for e in manifest.clips]
        frames = clips_to_tensor(clips)
        targets = batch_targets(clips, model.clues)
        loss, _ = total_loss(model(frames), targets, SMALL.loss)
        loss.backward()
        dead = [name for name, p in model.named_parameters()
                if p.grad is None or p.grad.abs().sum().item() == 0.0]
        assert dead == []


class TestCheckpoint:
    def test_save_load_save_byte_identical(self, tmp_path):
        model = build_model(SMALL, seed=5)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(p1, model, iteration=17, seed=5)
        ckpt = load_checkpoint(p1)
        model2 = ckpt.build_model()
        save_checkpoint(p2, model2, iteration=ckpt.iteration, seed=ckpt.seed)
        assert p1.read_bytes() == p2.read_bytes()

    def test_round_trip_reproduces_forward_bitwise(self, tmp_path, tiny_synth_cfg):
        clip = synthgen.generate_clip(tiny_synth_cfg)
        frames = clip_frames_tensor(clip)
        model = build_model(SMALL, seed=6)
        with torch.no_grad():
            want = model(frames)[-1].fused
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, iteration=0, seed=6)
        restored = load_checkpoint(path).build_model()
        with torch.no_grad():
            got = restored(frames)[-1].fused
        assert torch.equal(want, got)

    def test_config_survives_round_trip(self, tmp_path):
        cfg = ModelConfig.toy(channels=16, roi_size=3, use_eye_clue=False,
                              num_stages=3)
        model = build_model(cfg, seed=0)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model, iteration=4, seed=9)
        ckpt = load_checkpoint(path)
        assert ckpt.config == cfg
        assert ckpt.iteration == 4 and ckpt.seed == 9

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"nope")
        with pytest.raises(ConfigError, match="magic"):
            load_checkpoint(path)


class TestTrain:
    def test_smoke_run_writes_csv_and_checkpoint(self, tmp_path):
        manifest = small_manifest(tmp_path)
        tc = TrainConfig(batch_size=2, iterations=4, checkpoint_every=2, seed=0)
        result = train(manifest, SMALL, tc, out_dir=tmp_path / "run")
        assert len(result.reports) == 4
        lines = (tmp_path / "run" / "losses.csv").read_text().strip().splitlines()
        assert len(lines) == 5  # header + 4 rows
        assert lines[0].startswith("iteration,anchor,gaze_fusion")
        ckpt = load_checkpoint(result.checkpoint_path)
        assert ckpt.iteration == 4

    def test_zero_iterations_equals_initialization(self, tmp_path):
        manifest = small_manifest(tmp_path)
        tc = TrainConfig(batch_size=2, iterations=0, seed=3)
        result = train(manifest, SMALL, tc, out_dir=tmp_path / "run")
        trained = load_checkpoint(result.checkpoint_path).build_model()
        fresh = build_model(SMALL, seed=3)
        for (name, a), (_, b) in zip(trained.state_dict().items(), fresh.state_dict().items()):
            assert torch.equal(a, b), name

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        manifest = small_manifest(tmp_path)
        base = dict(batch_size=2, checkpoint_every=3, seed=1)
        full = train(manifest, SMALL, TrainConfig(iterations=6, **base),
                     out_dir=tmp_path / "full")
        half = train(manifest, SMALL, TrainConfig(iterations=3, **base),
                     out_dir=tmp_path / "half")
        resumed = train(manifest, SMALL, TrainConfig(iterations=6, **base),
                        out_dir=tmp_path / "resumed",
                        resume=load_checkpoint(half.checkpoint_path))
        a = full.model.state_dict()
        b = resumed.model.state_dict()
        for name in a:
            assert torch.equal(a[name], b[name]), name

    def test_nan_parameters_abort_with_batch_id(self, tmp_path):
        manifest = small_manifest(tmp_path)
        model = build_model(SMALL, seed=0)
        with torch.no_grad():
            model.init_queries.fill_(float("nan"))
        path = tmp_path / "poisoned.ckpt"
        save_checkpoint(path, model, iteration=0, seed=0)
        with pytest.raises(TrainingAbortError, match="clip"):
            train(manifest, SMALL, TrainConfig(batch_size=2, iterations=1),
                  resume=load_checkpoint(path))

    def test_empty_manifest_rejected(self, tmp_path):
        manifest = small_manifest(tmp_path, n_clips=0)
        with pytest.raises(ConfigError, match="long enough"):
            train(manifest, SMALL, TrainConfig(iterations=1))


class TestInferVideo:
    def test_exact_length_video_single_window(self):
        cfg = ModelConfig.toy(channels=16, roi_size=3, T=7)
        model = build_model(cfg, seed=0)
        frames = np.random.default_rng(0).random((7, 64, 64, 3)).astype(np.float32)
        out = infer_video(frames, model)
        assert out.gaze.shape == (7, 3)
        assert np.allclose(np.linalg.norm(out.gaze, axis=1), 1.0, atol=1e-9)

    def test_empty_video(self):
        model = build_model(SMALL, seed=0)
        out = infer_video(np.zeros((0, 64, 64, 3), np.float32), model)
        assert out.gaze.shape == (0, 3)

    def test_fifteen_frame_stitch_matches_hand_merge(self):
        cfg = ModelConfig.toy(channels=16, roi_size=3, T=7)
        model = build_model(cfg, seed=1)
        model.eval()
        frames = np.random.default_rng(1).random((15, 64, 64, 3)).astype(np.float32)
        windows = [(0, 7), (4, 11), (8, 15)]
        fused = {}
        for s, e in windows:
            clip = torch.from_numpy(frames[s:e]).permute(0, 3, 1, 2).unsqueeze(0)
            with torch.no_grad():
                fused[(s, e)] = model(clip)[-1].fused[0].double().numpy()
        raw = np.zeros((15, 3))
        for t in range(15):
            parts = [fused[(s, e)][t - s] for s, e in windows if s <= t < e]
            raw[t] = np.mean(np.stack(parts, axis=0), axis=0)
        smooth = np.stack([np.mean(raw[max(0, t - 1): t + 2], axis=0) for t in range(15)])
        want = smooth / np.linalg.norm(smooth, axis=1, keepdims=True)

        got = infer_video(frames, model, stride=4)
        assert np.array_equal(got.gaze, want)

    def test_frame_five_is_mean_of_two_windows(self):
        cfg = ModelConfig.toy(channels=16, roi_size=3, T=7)
        model = build_model(cfg, seed=2)
        model.eval()
        frames = np.random.default_rng(2).random((15, 64, 64, 3)).astype(np.float32)
        a = torch.from_numpy(frames[0:7]).permute(0, 3, 1, 2).unsqueeze(0)
        b = torch.from_numpy(frames[4:11]).permute(0, 3, 1, 2).unsqueeze(0)
        with torch.no_grad():
            f_a = model(a)[-1].fused[0].double().numpy()
            f_b = model(b)[-1].fused[0].double().numpy()
        expected_raw5 = np.mean(np.stack([f_a[5], f_b[1]]), axis=0)
        # recover the raw (pre-smoothing) value by running the merge by hand
        c = torch.from_numpy(frames[8:15]).permute(0, 3, 1, 2).unsqueeze(0)
        with torch.no_grad():
            f_c = model(c)[-1].fused[0].double().numpy()
        raw = np.zeros((15, 3))
        for t in range(15):
            parts = []
            for (s, e), f in (((0, 7), f_a), ((4, 11), f_b), ((8, 15), f_c)):
                if s <= t < e:
                    parts.append(f[t - s])
            raw[t] = np.mean(np.stack(parts), axis=0)
        assert np.array_equal(raw[5], expected_raw5)

    def test_constant_model_output_is_fixed_point(self):
        cfg = ModelConfig.toy(channels=16, roi_size=3, T=7)
        model = build_model(cfg, seed=3)
        with torch.no_grad():
            for stage in model.stages:
                for c in model.clues:
                    mlp = stage.heads.gaze_mlps[c]
                    mlp.fc1.weight.zero_()
                    mlp.fc1.bias.zero_()
                    mlp.fc2.weight.zero_()
                    mlp.fc2.bias.zero_()
                stage.heads.fusion.weight.zero_()
                stage.heads.fusion.bias.copy_(torch.tensor([0.3, 0.0, -0.9]))
        frames = np.random.default_rng(3).random((15, 64, 64, 3)).astype(np.float32)
        out = infer_video(frames, model, stride=4)
        want = np.array([0.3, 0.0, -0.9]) / np.linalg.norm([0.3, 0.0, -0.9])
        assert np.allclose(out.gaze, want[None, :].repeat(15, axis=0), atol=1e-7)


class TestOptimizerGroups:
    def test_two_groups_with_backbone_lr(self):
        model = build_model(SMALL, seed=0)
        tc = TrainConfig()
        opt = make_optimizer(model, tc)
        assert len(opt.param_groups) == 2
        assert opt.param_groups[0]["lr"] == tc.lr_backbone
        assert opt.param_groups[1]["lr"] == tc.lr_other
        n_backbone = sum(p.numel() for p in opt.param_groups[0]["params"])
        assert n_backbone == sum(p.numel() for p in model.backbone.parameters())
