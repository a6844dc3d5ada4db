import math

import pytest
import torch

from latent_talker.core import DTYPE, seeded_generator
from latent_talker.sync import (
    FrozenEncodersError,
    SyncBatch,
    SyncEncoders,
    audio_segment,
    contrastive_loss,
    in_sync_pair,
    infonce,
    l2_normalize,
    load_sync_checkpoint,
    pretrain_sync,
    pretraining_loss,
    sample_offsync,
    save_sync_checkpoint,
    seeded_init,
    sync_score,
    sync_train_step,
    video_window,
)
from latent_talker.world import sample_clip

from helpers import directional_grad_check, params_of


@pytest.fixture(scope="module")
def encoders(cfg):
    enc = SyncEncoders(cfg)
    seeded_init(enc, seeded_generator(0, "enc"))
    return enc


@pytest.fixture(scope="module")
def tiny_encoders(tiny_cfg):
    enc = SyncEncoders(tiny_cfg)
    seeded_init(enc, seeded_generator(1, "enc"))
    return enc


def basis_vec(i, d=32):
    v = torch.zeros(d, dtype=DTYPE)
    v[i] = 1.0
    return v


class TestEmbeddings:
    def test_unit_norm(self, encoders, clip, cfg):
        w = video_window(clip, 10, cfg.sync_half_win)
        emb = encoders.embed_video(w)
        assert abs(float(emb.norm()) - 1.0) < 1e-6
        a = audio_segment(clip, 10, cfg.sync_half_win)
        assert abs(float(encoders.embed_audio(a).norm()) - 1.0) < 1e-6

    def test_deterministic(self, encoders, clip, cfg):
        w = video_window(clip, 12, cfg.sync_half_win)
        assert torch.equal(encoders.embed_video(w), encoders.embed_video(w))

    def test_wrong_window_length(self, encoders, clip):
        with pytest.raises(ValueError, match="window"):
            encoders.embed_video(clip.frames[:3])
        with pytest.raises(ValueError, match="segment"):
            encoders.embed_audio(clip.audio_raw[:2])

    def test_zero_input_zero_head_no_nan(self, cfg):
        enc = SyncEncoders(cfg)
        with torch.no_grad():
            enc.f_v.fc2.weight.zero_()
            enc.f_v.fc2.bias.zero_()
        s = cfg.image_size
        w = torch.zeros(cfg.sync_window, 3, s, s, dtype=DTYPE)
        emb = enc.embed_video(w)
        assert torch.isfinite(emb).all()

    def test_scale_invariance_of_normalization(self):
        gen = seeded_generator(2)
        x = torch.randn(7, generator=gen, dtype=DTYPE)
        a, b = l2_normalize(x), l2_normalize(3.7 * x)
        assert torch.allclose(a, b, atol=1e-9)


class TestSyncScore:
    def test_identical(self):
        v = basis_vec(0)
        assert float(sync_score(v, v, 0.07)) == pytest.approx(1 / 0.07)

    def test_orthogonal(self):
        assert float(sync_score(basis_vec(0), basis_vec(1), 0.3)) == 0.0

    def test_antipodal(self):
        v = basis_vec(2)
        assert float(sync_score(v, -v, 0.5)) == pytest.approx(-2.0)


class TestContrastiveLoss:
    def test_single_pair_is_zero(self):
        v = basis_vec(0).unsqueeze(0)
        assert float(infonce(v, v, 0.07)) == pytest.approx(0.0, abs=1e-12)

    def test_two_orthogonal_pairs(self):
        # S_ii = 1/tau, S_ij = 0: per-direction loss is log(1 + e^{-1/tau})
        tau = 0.07
        v = torch.stack([basis_vec(0), basis_vec(1)])
        loss = float(infonce(v, v, tau))
        expected = math.log1p(math.exp(-1 / tau))
        assert loss == pytest.approx(expected, rel=1e-9)
        assert loss == pytest.approx(6.2487e-7, rel=1e-3)

    def test_uniform_scores(self):
        v = basis_vec(0).repeat(2, 1)
        assert float(infonce(v, v, 0.07)) == pytest.approx(math.log(2.0))

    def test_nonnegative(self):
        gen = seeded_generator(3)
        for trial in range(25):
            v = l2_normalize(torch.randn(4, 8, generator=gen, dtype=DTYPE))
            a = l2_normalize(torch.randn(4, 8, generator=gen, dtype=DTYPE))
            assert float(infonce(v, a, 0.1)) >= 0.0

    def test_permutation_invariance(self, encoders, clip, cfg):
        hw = cfg.sync_half_win
        pairs = [in_sync_pair(clip, k, hw) for k in (5, 15, 25, 35)]
        video = torch.stack([p[0] for p in pairs])
        audio = torch.stack([p[1] for p in pairs])
        base = float(contrastive_loss(encoders, SyncBatch(video, audio)))
        perm = torch.tensor([2, 0, 3, 1])
        permuted = float(contrastive_loss(
            encoders, SyncBatch(video[perm], audio[perm])
        ))
        assert permuted == pytest.approx(base, rel=1e-12)

    def test_alignment_map(self, encoders, clip, cfg):
        hw = cfg.sync_half_win
        pairs = [in_sync_pair(clip, k, hw) for k in (6, 20, 40)]
        video = torch.stack([p[0] for p in pairs])
        audio = torch.stack([p[1] for p in pairs])
        base = float(contrastive_loss(encoders, SyncBatch(video, audio)))
        # audio rows shuffled by perm: video i is now in sync with row
        # alignment[i] = position of i in perm
        perm = torch.tensor([1, 2, 0])
        alignment = torch.tensor([int((perm == i).nonzero()) for i in range(3)])
        shuffled = float(contrastive_loss(
            encoders, SyncBatch(video, audio[perm], alignment=alignment)
        ))
        assert shuffled == pytest.approx(base, rel=1e-12)

    def test_gradients_match_finite_differences(self, tiny_encoders, tiny_clip, tiny_cfg):
        hw = tiny_cfg.sync_half_win
        pairs = [in_sync_pair(tiny_clip, k, hw) for k in (4, 8, 12)]
        video = torch.stack([p[0] for p in pairs])
        audio = torch.stack([p[1] for p in pairs])
        batch = SyncBatch(video, audio)

        def fn():
            return contrastive_loss(tiny_encoders, batch)

        directional_grad_check(fn, params_of(tiny_encoders), seed=4)


class TestOffsync:
    def test_small_shift_rejected(self, clip, cfg):
        with pytest.raises(ValueError):
            sample_offsync(clip, 20, cfg.sync_half_win, cfg.sync_half_win)
        with pytest.raises(ValueError):
            sample_offsync(clip, 20, 0, cfg.sync_half_win)

    def test_shift_indices(self, clip, cfg):
        hw = cfg.sync_half_win
        batch = sample_offsync(clip, 10, 5, hw)
        assert torch.equal(batch.audio_segments[0], audio_segment(clip, 15, hw))
        assert torch.equal(batch.video_windows[0], video_window(clip, 10, hw))
        # mirrored variant: audio fixed, video shifted
        assert torch.equal(batch.audio_segments[1], audio_segment(clip, 10, hw))
        assert torch.equal(batch.video_windows[1], video_window(clip, 15, hw))

    def test_out_of_range_center(self, clip, cfg):
        with pytest.raises(IndexError):
            sample_offsync(clip, 62, 5, cfg.sync_half_win)


class TestPretraining:
    @pytest.fixture(scope="class")
    def small_corpus(self, world, cfg):
        return [sample_clip(world, cfg.seq_len, seed=500 + i) for i in range(8)]

    def test_loss_decreases(self, small_corpus, cfg):
        enc, history = pretrain_sync(
            small_corpus, cfg, steps=120, batch_size=8, seed=1
        )
        head = sum(history[:20]) / 20
        tail = sum(history[-20:]) / 20
        assert tail < head

    def test_freeze_contract(self, small_corpus, cfg):
        enc, _ = pretrain_sync(small_corpus, cfg, steps=5, batch_size=4, seed=2)
        assert enc.frozen
        assert all(not p.requires_grad for p in enc.parameters())
        opt = torch.optim.Adam([torch.zeros(1, requires_grad=True)])
        with pytest.raises(FrozenEncodersError):
            sync_train_step(enc, opt, small_corpus, cfg, 4,
                            seeded_generator(0, "x"))

    def test_deterministic(self, small_corpus, cfg):
        e1, h1 = pretrain_sync(small_corpus, cfg, steps=12, batch_size=4, seed=5)
        e2, h2 = pretrain_sync(small_corpus, cfg, steps=12, batch_size=4, seed=5)
        assert h1 == h2
        for a, b in zip(e1.parameters(), e2.parameters()):
            assert torch.equal(a, b)

    def test_pretraining_loss_gradient(self, tiny_encoders, tiny_world, tiny_cfg):
        clips = [sample_clip(tiny_world, 32, seed=s) for s in (1, 2)]
        from latent_talker.sync import _draw_training_items

        batch = _draw_training_items(clips, tiny_cfg, 3, seeded_generator(6))

        def fn():
            return pretraining_loss(tiny_encoders, *batch)

        directional_grad_check(fn, params_of(tiny_encoders), seed=7)


class TestCheckpoint:
    def test_round_trip(self, encoders, cfg, tmp_path, clip):
        path = tmp_path / "sync.ckpt"
        save_sync_checkpoint(encoders, path)
        loaded = load_sync_checkpoint(path, cfg)
        for a, b in zip(encoders.state_dict().values(), loaded.state_dict().values()):
            assert torch.equal(a, b)
        w = video_window(clip, 9, cfg.sync_half_win)
        assert torch.equal(encoders.embed_video(w), loaded.embed_video(w))

    def test_frozen_flag_persists(self, cfg, tmp_path):
        enc = SyncEncoders(cfg).freeze()
        save_sync_checkpoint(enc, tmp_path / "s.ckpt")
        assert load_sync_checkpoint(tmp_path / "s.ckpt", cfg).frozen

    def test_config_mismatch_rejected(self, encoders, cfg, tmp_path):
        path = tmp_path / "sync.ckpt"
        save_sync_checkpoint(encoders, path)
        other = cfg.with_overrides(sync_embed_dim=16)
        with pytest.raises(IOError, match="config mismatch"):
            load_sync_checkpoint(path, other)
