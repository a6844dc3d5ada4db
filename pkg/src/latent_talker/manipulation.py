"""Control-vector smoothing and two-way style-code manipulation.

Sampled motion latents are noisy in time; a fixed Gaussian kernel followed
by a trainable temporal convolution turns the concatenated (audio, motion)
track into a smooth per-frame control vector.  The control vector then
edits the reference code in two gated passes: first the reference re-shapes
the control, then the control re-shapes the reference.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .config import ModelConfig
from .core import DTYPE


def gaussian_kernel1d(size: int, sigma: float, dtype=DTYPE) -> Tensor:
    if size % 2 != 1:
        raise ValueError("kernel size must be odd")
    xs = torch.arange(size, dtype=dtype) - (size - 1) / 2
    k = torch.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


class Smoother(nn.Module):
    """Fixed Gaussian smoothing + trainable Conv1d + LeakyReLU over time.

    Both stages use reflect padding, so the module is zero-phase and maps
    constant tracks to constant tracks.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.register_buffer(
            "kernel", gaussian_kernel1d(config.smooth_kernel, config.smooth_sigma,
                                        dtype=config.torch_dtype)
        )
        self.in_channels = config.audio_dim + config.motion_dim
        self.conv = nn.Conv1d(
            self.in_channels, config.smooth_channels, config.smooth_conv_kernel
        )
        self.to(config.torch_dtype)

    def _gaussian_filter(self, x: Tensor) -> Tensor:
        # x: [B, C, N]; depthwise conv with the shared kernel
        pad = (self.kernel.shape[0] - 1) // 2
        weight = self.kernel.reshape(1, 1, -1).expand(x.shape[1], 1, -1)
        return F.conv1d(F.pad(x, (pad, pad), mode="reflect"), weight,
                        groups=x.shape[1])

    def forward(self, audio: Tensor, motion: Tensor) -> Tensor:
        """[B, N, audio_dim], [B, N, motion_dim] -> controls [B, N, channels]."""
        audio = audio.to(self.kernel.dtype)
        motion = motion.to(self.kernel.dtype)
        squeeze = audio.ndim == 2
        if squeeze:
            audio, motion = audio.unsqueeze(0), motion.unsqueeze(0)
        if audio.shape[1] != motion.shape[1]:
            raise ValueError(
                f"audio ({audio.shape[1]}) and motion ({motion.shape[1]}) "
                "frame counts disagree"
            )
        x = torch.cat([audio, motion], dim=-1).transpose(1, 2)
        x = self._gaussian_filter(x)
        pad = (self.conv.kernel_size[0] - 1) // 2
        x = self.conv(F.pad(x, (pad, pad), mode="reflect"))
        out = F.leaky_relu(x, 0.2).transpose(1, 2)
        return out[0] if squeeze else out

    def conv_only(self, audio: Tensor, motion: Tensor) -> Tensor:
        """Same path without the Gaussian pre-filter (for comparison)."""
        audio = audio.to(self.kernel.dtype)
        motion = motion.to(self.kernel.dtype)
        squeeze = audio.ndim == 2
        if squeeze:
            audio, motion = audio.unsqueeze(0), motion.unsqueeze(0)
        x = torch.cat([audio, motion], dim=-1).transpose(1, 2)
        pad = (self.conv.kernel_size[0] - 1) // 2
        x = self.conv(F.pad(x, (pad, pad), mode="reflect"))
        out = F.leaky_relu(x, 0.2).transpose(1, 2)
        return out[0] if squeeze else out


def _affine_stack(d_in: int, d_out: int, hidden: int, layers: int) -> nn.Module:
    if layers <= 1:
        return nn.Linear(d_in, d_out)
    return nn.Sequential(
        nn.Linear(d_in, hidden), nn.LeakyReLU(0.2), nn.Linear(hidden, d_out)
    )


class Manipulator(nn.Module):
    """Two-way gated edit of a reference style code by a control sequence.

    Initialization biases the output toward the reference (the final
    reference gate starts near saturation and the additive head at zero), so
    an untrained model approximately reproduces the reference frame.
    """

    REF_GATE_BIAS = 4.0

    def __init__(self, config: ModelConfig):
        super().__init__()
        d, c = config.style_dim, config.smooth_channels
        h, layers = config.manip_hidden, config.manip_mlp_layers
        self.ref_to_gate = _affine_stack(d, c, h, layers)    # gates the control
        self.ref_to_shift = _affine_stack(d, c, h, layers)
        self.ctrl_to_gate = _affine_stack(c, d, h, layers)   # gates the reference
        self.ctrl_to_shift = _affine_stack(c, d, h, layers)
        with torch.no_grad():
            final_gate = (self.ctrl_to_gate[-1] if layers > 1
                          else self.ctrl_to_gate)
            final_shift = (self.ctrl_to_shift[-1] if layers > 1
                           else self.ctrl_to_shift)
            final_gate.bias.fill_(self.REF_GATE_BIAS)
            final_shift.weight.zero_()
            final_shift.bias.zero_()
        self.to(config.torch_dtype)
        self._dtype = config.torch_dtype

    def forward(self, w_ref: Tensor, controls: Tensor) -> Tensor:
        """w_ref: [B, style_dim]; controls: [B, N, channels] -> [B, N, style_dim]."""
        w_ref = w_ref.to(self._dtype)
        controls = controls.to(self._dtype)
        squeeze = w_ref.ndim == 1
        if squeeze:
            w_ref, controls = w_ref.unsqueeze(0), controls.unsqueeze(0)
        gate_c = torch.sigmoid(self.ref_to_gate(w_ref)).unsqueeze(1)
        shift_c = self.ref_to_shift(w_ref).unsqueeze(1)
        c_prime = gate_c * controls + shift_c
        gate_w = torch.sigmoid(self.ctrl_to_gate(c_prime))
        out = gate_w * w_ref.unsqueeze(1) + self.ctrl_to_shift(c_prime)
        return out[0] if squeeze else out


def manipulate_sequence(smoothers, manipulators, w_ref: Tensor, audio: Tensor,
                        motions: list[Tensor]) -> Tensor:
    """Assemble the full output style sequence.

    Layers below n_edit get the smoothed, manipulated codes; the remaining
    layers are copied verbatim from the reference into every frame.

    w_ref: [B, L, D]; audio: [B, N, audio_dim]; motions: one [B, N, motion_dim]
    per manipulated layer.  Returns [B, N, L, D].
    """
    if len(manipulators):
        w_ref = w_ref.to(manipulators[0]._dtype)
    squeeze = w_ref.ndim == 2
    if squeeze:
        w_ref = w_ref.unsqueeze(0)
        audio = audio.unsqueeze(0)
        motions = [m.unsqueeze(0) for m in motions]
    n_edit = len(smoothers)
    if len(motions) != n_edit or len(manipulators) != n_edit:
        raise ValueError(
            f"expected one motion sequence per manipulated layer "
            f"({n_edit}), got {len(motions)}"
        )
    b, n = audio.shape[0], audio.shape[1]
    L, d = w_ref.shape[1], w_ref.shape[2]
    out = w_ref.unsqueeze(1).expand(b, n, L, d).clone()
    for i in range(n_edit):
        controls = smoothers[i](audio, motions[i])
        out[:, :, i, :] = manipulators[i](w_ref[:, i, :], controls)
    return out[0] if squeeze else out
