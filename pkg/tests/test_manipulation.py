import pytest
import torch

from latent_talker.core import DTYPE, seeded_generator
from latent_talker.manipulation import (
    Manipulator,
    Smoother,
    gaussian_kernel1d,
    manipulate_sequence,
)

from helpers import directional_grad_check, params_of


def zeroed(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def rand(shape, seed):
    return torch.randn(*shape, generator=seeded_generator(seed, "manip"),
                       dtype=DTYPE)


class TestGaussianKernel:
    def test_normalized(self):
        k = gaussian_kernel1d(5, 1.0)
        assert float(k.sum()) == pytest.approx(1.0, rel=1e-12)
        assert k.shape == (5,)

    def test_symmetric_peaked(self):
        k = gaussian_kernel1d(7, 1.5)
        assert torch.allclose(k, k.flip(0))
        assert k.argmax() == 3

    def test_even_size_rejected(self):
        with pytest.raises(ValueError):
            gaussian_kernel1d(4, 1.0)


class TestSmoother:
    def test_constant_input_constant_output(self, cfg):
        sm = Smoother(cfg)
        n = 20
        audio = torch.ones(n, cfg.audio_dim, dtype=DTYPE) * 0.7
        motion = torch.ones(n, cfg.motion_dim, dtype=DTYPE) * -0.2
        out = sm(audio, motion)
        assert (out - out[0]).abs().max() < 1e-10

    def test_zero_input_zero_output(self, cfg):
        sm = Smoother(cfg)
        with torch.no_grad():
            sm.conv.bias.zero_()
        out = sm(torch.zeros(8, cfg.audio_dim, dtype=DTYPE),
                 torch.zeros(8, cfg.motion_dim, dtype=DTYPE))
        assert out.abs().max() == 0.0

    def test_smoothing_reduces_roughness(self, cfg):
        # second-difference energy of the smoothed path stays below the
        # conv-only path on i.i.d. noise, averaged over 100 seeds
        n = 32
        full_energy, conv_energy = 0.0, 0.0
        for s in range(100):
            sm = Smoother(cfg)
            with torch.no_grad():
                for p in sm.conv.parameters():
                    p.copy_(0.4 * torch.randn(p.shape,
                                              generator=seeded_generator(s, "w"),
                                              dtype=DTYPE))
            audio = rand((n, cfg.audio_dim), 2 * s)
            motion = rand((n, cfg.motion_dim), 2 * s + 1)
            with torch.no_grad():
                full = sm(audio, motion)
                conv = sm.conv_only(audio, motion)
            full_energy += float((full[2:] - 2 * full[1:-1] + full[:-2]).pow(2).mean())
            conv_energy += float((conv[2:] - 2 * conv[1:-1] + conv[:-2]).pow(2).mean())
        assert full_energy < conv_energy

    def test_shift_equivariance_interior(self, cfg):
        sm = Smoother(cfg)
        n, shift = 40, 3
        audio = rand((n, cfg.audio_dim), 7)
        motion = rand((n, cfg.motion_dim), 8)
        out = sm(audio, motion)
        out_shifted = sm(audio[shift:], motion[shift:])
        # away from the padding boundary the response follows the shift
        margin = cfg.smooth_kernel
        inner = slice(margin, n - shift - margin)
        assert torch.allclose(out[shift:][inner], out_shifted[inner], atol=1e-10)

    def test_length_mismatch(self, cfg):
        sm = Smoother(cfg)
        with pytest.raises(ValueError, match="disagree"):
            sm(torch.zeros(5, cfg.audio_dim, dtype=DTYPE),
               torch.zeros(4, cfg.motion_dim, dtype=DTYPE))


class TestManipulator:
    def test_zero_weights_halve(self, cfg):
        mp = zeroed(Manipulator(cfg))
        w_ref = rand((cfg.style_dim,), 9)
        c = rand((6, cfg.smooth_channels), 10)
        out = mp(w_ref, c)
        assert torch.allclose(out, 0.5 * w_ref.expand(6, -1))

    def test_saturated_gate_reproduces_reference(self, cfg):
        mp = zeroed(Manipulator(cfg))
        with torch.no_grad():
            mp.ctrl_to_gate.bias.fill_(10.0)
        w_ref = rand((cfg.style_dim,), 11)
        c = rand((4, cfg.smooth_channels), 12)
        out = mp(w_ref, c)
        err = (out - w_ref).abs().max() / w_ref.abs().max()
        assert err < 5e-5

    def test_near_identity_at_init(self, cfg):
        mp = Manipulator(cfg)
        with torch.no_grad():
            for layer in (mp.ref_to_gate, mp.ref_to_shift, mp.ctrl_to_gate):
                layer.weight.zero_()
            mp.ref_to_shift.bias.zero_()
        w_ref = rand((cfg.style_dim,), 13)
        c = rand((4, cfg.smooth_channels), 14)
        out = mp(w_ref, c)
        gate = torch.sigmoid(torch.tensor(Manipulator.REF_GATE_BIAS, dtype=DTYPE))
        assert torch.allclose(out, gate * w_ref.expand(4, -1), rtol=1e-10)

    def test_bounded_when_gates_saturate(self, cfg):
        mp = Manipulator(cfg)
        with torch.no_grad():
            mp.ctrl_to_gate.weight.zero_()
            mp.ctrl_to_gate.bias.fill_(30.0)
        w_ref = rand((cfg.style_dim,), 15)
        c = 5.0 * rand((8, cfg.smooth_channels), 16)
        out = mp(w_ref, c)
        bound = w_ref.abs() + mp.ctrl_to_shift.bias.abs() \
            + (mp.ctrl_to_shift.weight.abs().sum(dim=1) * c.abs().max())
        assert (out.abs() <= bound.unsqueeze(0) + 1e-9).all()

    def test_gradient_wrt_reference(self, tiny_cfg):
        mp = Manipulator(tiny_cfg)
        w_ref = rand((tiny_cfg.style_dim,), 17).requires_grad_(True)
        c = rand((5, tiny_cfg.smooth_channels), 18)
        probe = rand((5, tiny_cfg.style_dim), 19)

        def fn():
            return (probe * mp(w_ref, c)).sum()

        directional_grad_check(fn, [w_ref] + params_of(mp), seed=20)


class TestManipulateSequence:
    def _modules(self, cfg, seed=21):
        smoothers = torch.nn.ModuleList(
            Smoother(cfg) for _ in range(cfg.n_edit_layers)
        )
        manipulators = torch.nn.ModuleList(
            Manipulator(cfg) for _ in range(cfg.n_edit_layers)
        )
        gen = seeded_generator(seed, "seqmod")
        with torch.no_grad():
            for m in list(smoothers.parameters()) + list(manipulators.parameters()):
                m.copy_(0.3 * torch.randn(m.shape, generator=gen, dtype=DTYPE))
        return smoothers, manipulators

    def test_unedited_layers_copied_verbatim(self, tiny_cfg):
        smoothers, manipulators = self._modules(tiny_cfg)
        n = 7
        w_ref = rand((tiny_cfg.n_style_layers, tiny_cfg.style_dim), 22)
        audio = rand((n, tiny_cfg.audio_dim), 23)
        motions = [rand((n, tiny_cfg.motion_dim), 24 + i)
                   for i in range(tiny_cfg.n_edit_layers)]
        out = manipulate_sequence(smoothers, manipulators, w_ref, audio, motions)
        for t in range(n):
            assert torch.equal(out[t, tiny_cfg.n_edit_layers:],
                               w_ref[tiny_cfg.n_edit_layers:])

    def test_zero_weight_composition(self, tiny_cfg):
        smoothers = torch.nn.ModuleList(
            zeroed(Smoother(tiny_cfg)) for _ in range(tiny_cfg.n_edit_layers)
        )
        manipulators = torch.nn.ModuleList(
            zeroed(Manipulator(tiny_cfg)) for _ in range(tiny_cfg.n_edit_layers)
        )
        n = 5
        w_ref = rand((tiny_cfg.n_style_layers, tiny_cfg.style_dim), 30)
        audio = rand((n, tiny_cfg.audio_dim), 31)
        motions = [rand((n, tiny_cfg.motion_dim), 32 + i)
                   for i in range(tiny_cfg.n_edit_layers)]
        out = manipulate_sequence(smoothers, manipulators, w_ref, audio, motions)
        for i in range(tiny_cfg.n_edit_layers):
            assert torch.allclose(out[:, i, :], 0.5 * w_ref[i].expand(n, -1))

    def test_per_layer_independence(self, tiny_cfg):
        smoothers, manipulators = self._modules(tiny_cfg, seed=40)
        n = 6
        w_ref = rand((tiny_cfg.n_style_layers, tiny_cfg.style_dim), 41)
        audio = rand((n, tiny_cfg.audio_dim), 42)
        motions = [rand((n, tiny_cfg.motion_dim), 43 + i)
                   for i in range(tiny_cfg.n_edit_layers)]
        base = manipulate_sequence(smoothers, manipulators, w_ref, audio, motions)
        motions2 = [m.clone() for m in motions]
        motions2[1] += 1.0
        changed = manipulate_sequence(smoothers, manipulators, w_ref, audio,
                                      motions2)
        assert torch.equal(base[:, 0, :], changed[:, 0, :])
        assert not torch.equal(base[:, 1, :], changed[:, 1, :])

    def test_missing_motion_is_contract_error(self, tiny_cfg):
        smoothers, manipulators = self._modules(tiny_cfg, seed=50)
        w_ref = rand((tiny_cfg.n_style_layers, tiny_cfg.style_dim), 51)
        audio = rand((4, tiny_cfg.audio_dim), 52)
        with pytest.raises(ValueError, match="one motion sequence per"):
            manipulate_sequence(smoothers, manipulators, w_ref, audio,
                                [rand((4, tiny_cfg.motion_dim), 53)])

    def test_end_to_end_gradient(self, tiny_cfg):
        smoothers, manipulators = self._modules(tiny_cfg, seed=60)
        n = 5
        w_ref = rand((tiny_cfg.n_style_layers, tiny_cfg.style_dim), 61)
        w_ref.requires_grad_(True)
        audio = rand((n, tiny_cfg.audio_dim), 62)
        motions = [rand((n, tiny_cfg.motion_dim), 63 + i).requires_grad_(True)
                   for i in range(tiny_cfg.n_edit_layers)]
        probe = rand((n, tiny_cfg.n_style_layers, tiny_cfg.style_dim), 70)

        def fn():
            out = manipulate_sequence(smoothers, manipulators, w_ref, audio,
                                      motions)
            return (probe * out).sum()

        tensors = [w_ref] + motions + list(smoothers.parameters()) \
            + list(manipulators.parameters())
        directional_grad_check(fn, tensors, seed=71)
