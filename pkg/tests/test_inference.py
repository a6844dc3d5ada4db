import numpy as np
import pytest
import torch

from latent_talker.core import (
    AudioFeatureSequence,
    DTYPE,
    StylePlus,
    StyleSequence,
    seeded_generator,
)
from latent_talker.inference import (
    GenerationRequest,
    assemble_video,
    frames_to_uint8,
    generate,
    generate_audio_driven,
    generate_motion_controllable,
    read_frame,
)
from latent_talker.model import build_model
from latent_talker.world import factors_from_styles, sample_clip


@pytest.fixture(scope="module")
def model(tiny_cfg):
    return build_model(tiny_cfg, seed=77)


@pytest.fixture(scope="module")
def source_clip(tiny_world):
    return sample_clip(tiny_world, 16, seed=44)


@pytest.fixture(scope="module")
def ref_clip(tiny_world):
    return sample_clip(tiny_world, 16, seed=45)


def encoded_audio(model, clip, n=None):
    with torch.no_grad():
        a = model.encode_audio(clip.audio_raw if n is None
                               else clip.audio_raw[:n])
    return AudioFeatureSequence(a)


def make_request(model, ref_clip, source_clip, mode, n=None, seed=0, **kw):
    return GenerationRequest(
        reference=StylePlus(ref_clip.styles.frames[0]),
        audio=encoded_audio(model, source_clip, n),
        mode=mode,
        motion_source=source_clip.styles if mode == "motion_controllable" else None,
        seed=seed,
        **kw,
    )


class TestRequestValidation:
    def test_bad_mode(self, model, ref_clip, source_clip):
        with pytest.raises(ValueError, match="mode"):
            GenerationRequest(
                reference=StylePlus(ref_clip.styles.frames[0]),
                audio=encoded_audio(model, source_clip),
                mode="telepathic",
            )

    def test_motion_source_required(self, model, ref_clip, source_clip):
        with pytest.raises(ValueError, match="motion source"):
            GenerationRequest(
                reference=StylePlus(ref_clip.styles.frames[0]),
                audio=encoded_audio(model, source_clip),
                mode="motion_controllable",
            )


class TestMotionControllable:
    def test_output_shapes(self, model, tiny_world, ref_clip, source_clip,
                           tiny_cfg):
        req = make_request(model, ref_clip, source_clip, "motion_controllable")
        res = generate(model, tiny_world, req)
        assert res.frames.shape == (16, 3, tiny_cfg.image_size,
                                    tiny_cfg.image_size)
        assert res.styles.shape == (16, tiny_cfg.n_style_layers,
                                    tiny_cfg.style_dim)

    def test_deterministic(self, model, tiny_world, ref_clip, source_clip):
        req = make_request(model, ref_clip, source_clip,
                           "motion_controllable", seed=5)
        r1 = generate(model, tiny_world, req)
        r2 = generate(model, tiny_world, req)
        assert torch.equal(r1.frames, r2.frames)

    def test_seed_changes_output(self, model, tiny_world, ref_clip, source_clip):
        r1 = generate(model, tiny_world, make_request(
            model, ref_clip, source_clip, "motion_controllable", seed=1))
        r2 = generate(model, tiny_world, make_request(
            model, ref_clip, source_clip, "motion_controllable", seed=2))
        assert not torch.equal(r1.frames, r2.frames)

    def test_posterior_mean_ignores_seed(self, model, tiny_world, ref_clip,
                                         source_clip):
        r1 = generate(model, tiny_world, make_request(
            model, ref_clip, source_clip, "motion_controllable", seed=1,
            posterior_mean=True))
        r2 = generate(model, tiny_world, make_request(
            model, ref_clip, source_clip, "motion_controllable", seed=2,
            posterior_mean=True))
        assert torch.equal(r1.frames, r2.frames)

    def test_longer_motion_source_truncated(self, model, tiny_world, ref_clip,
                                            source_clip):
        n = 10
        req = make_request(model, ref_clip, source_clip,
                           "motion_controllable", n=n)
        res = generate(model, tiny_world, req)
        assert len(res) == n

    def test_shorter_motion_source_rejected(self, model, tiny_world, ref_clip,
                                            source_clip, tiny_world_short=None):
        short = StyleSequence(source_clip.styles.frames[:8])
        req = GenerationRequest(
            reference=StylePlus(ref_clip.styles.frames[0]),
            audio=encoded_audio(model, source_clip),
            mode="motion_controllable",
            motion_source=short,
        )
        with pytest.raises(ValueError, match="shorter"):
            generate(model, tiny_world, req)

    def test_unedited_layers_equal_reference(self, model, tiny_world, ref_clip,
                                             source_clip, tiny_cfg):
        req = make_request(model, ref_clip, source_clip, "motion_controllable")
        res = generate(model, tiny_world, req)
        ref = ref_clip.styles.frames[0]
        for t in range(len(res)):
            assert torch.equal(res.styles[t, tiny_cfg.n_edit_layers:],
                               ref[tiny_cfg.n_edit_layers:])


class TestAudioDriven:
    def test_shapes_and_determinism(self, model, tiny_world, ref_clip,
                                    source_clip):
        req = make_request(model, ref_clip, source_clip, "audio_driven", seed=9)
        r1 = generate(model, tiny_world, req)
        r2 = generate(model, tiny_world, req)
        assert len(r1) == 16
        assert torch.equal(r1.frames, r2.frames)

    def test_different_seeds_different_motion(self, model, tiny_world,
                                              ref_clip, source_clip):
        outs = [generate(model, tiny_world, make_request(
            model, ref_clip, source_clip, "audio_driven", seed=s))
            for s in range(4)]
        for i in range(3):
            assert not torch.equal(outs[i].styles, outs[i + 1].styles)

    def test_zero_length_audio(self, model, tiny_world, ref_clip, tiny_cfg):
        req = GenerationRequest(
            reference=StylePlus(ref_clip.styles.frames[0]),
            audio=AudioFeatureSequence(torch.zeros(0, tiny_cfg.audio_dim,
                                                   dtype=DTYPE)),
            mode="audio_driven",
        )
        res = generate(model, tiny_world, req)
        assert len(res) == 0

    def test_unedited_layers_equal_reference(self, model, tiny_world, ref_clip,
                                             source_clip, tiny_cfg):
        res = generate(model, tiny_world, make_request(
            model, ref_clip, source_clip, "audio_driven"))
        ref = ref_clip.styles.frames[0]
        assert torch.equal(res.styles[:, tiny_cfg.n_edit_layers:],
                           ref[tiny_cfg.n_edit_layers:].expand(
                               len(res), -1, -1))


class TestModesShareTail:
    def test_identical_latents_identical_videos(self, model, tiny_world,
                                                ref_clip, source_clip,
                                                tiny_cfg, monkeypatch):
        n = 16
        fixed = [torch.randn(n, tiny_cfg.motion_dim,
                             generator=seeded_generator(i, "fixed"), dtype=DTYPE)
                 for i in range(tiny_cfg.n_edit_layers)]
        calls = {"p": 0, "q": 0}

        def fake_sample_posterior(gp, eps):
            calls["q"] += 1
            return fixed[(calls["q"] - 1) % tiny_cfg.n_edit_layers]

        def fake_sample_prior(prior, flow, audio, w_ref, generator=None,
                              eps=None):
            calls["p"] += 1
            return fixed[(calls["p"] - 1) % tiny_cfg.n_edit_layers]

        import latent_talker.inference as inf

        monkeypatch.setattr(inf, "sample_posterior", fake_sample_posterior)
        monkeypatch.setattr(inf, "sample_prior", fake_sample_prior)
        r_motion = generate_motion_controllable(
            model, tiny_world,
            make_request(model, ref_clip, source_clip, "motion_controllable"))
        r_audio = generate_audio_driven(
            model, tiny_world,
            make_request(model, ref_clip, source_clip, "audio_driven"))
        assert torch.equal(r_motion.frames, r_audio.frames)
        assert torch.equal(r_motion.styles, r_audio.styles)


class TestAssembleVideo:
    def test_png_round_trip(self, model, tiny_world, ref_clip, source_clip,
                            tmp_path):
        res = generate(model, tiny_world, make_request(
            model, ref_clip, source_clip, "audio_driven"))
        paths = assemble_video(res.frames, tmp_path / "vid", fmt="png")
        assert len(paths) == len(res)
        manifest = (tmp_path / "vid" / "manifest.txt").read_text().splitlines()
        assert len(manifest) == len(res)
        expected = frames_to_uint8(res.frames)
        for i, p in enumerate(paths):
            np.testing.assert_array_equal(read_frame(p), expected[i])

    def test_ppm_round_trip(self, model, tiny_world, ref_clip, source_clip,
                            tmp_path):
        res = generate(model, tiny_world, make_request(
            model, ref_clip, source_clip, "audio_driven"))
        paths = assemble_video(res.frames[:3], tmp_path / "vid", fmt="ppm")
        expected = frames_to_uint8(res.frames[:3])
        for i, p in enumerate(paths):
            np.testing.assert_array_equal(read_frame(p), expected[i])

    def test_empty_video(self, tmp_path, tiny_cfg):
        s = tiny_cfg.image_size
        paths = assemble_video(torch.zeros(0, 3, s, s, dtype=DTYPE),
                               tmp_path / "vid")
        assert paths == []
        assert (tmp_path / "vid" / "manifest.txt").read_text() == ""

    def test_bad_format(self, tmp_path, tiny_cfg):
        s = tiny_cfg.image_size
        with pytest.raises(ValueError, match="format"):
            assemble_video(torch.zeros(1, 3, s, s, dtype=DTYPE),
                           tmp_path / "vid", fmt="gif")


class TestBuildModel:
    def test_seeded_construction_deterministic(self, tiny_cfg):
        m1, m2 = build_model(tiny_cfg, seed=3), build_model(tiny_cfg, seed=3)
        for a, b in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(a, b)
        m3 = build_model(tiny_cfg, seed=4)
        assert any(not torch.equal(a, b)
                   for a, b in zip(m1.parameters(), m3.parameters()))

    def test_special_inits_survive(self, tiny_cfg):
        model = build_model(tiny_cfg, seed=5)
        for flow in model.flows:
            for coupling in flow.couplings:
                assert coupling.net.head.weight.abs().max() == 0.0
        for manip in model.manipulators:
            assert manip.ctrl_to_shift.weight.abs().max() == 0.0
            assert manip.ctrl_to_gate.bias.min() == manip.REF_GATE_BIAS
