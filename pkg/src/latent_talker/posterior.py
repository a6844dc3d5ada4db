"""Causal recurrent posterior over per-frame motion latents.

One independent block per manipulated style layer infers a diagonal
Gaussian over the motion latent at every frame, conditioned on that
layer's style codes and the audio features up to the current frame.
Style codes enter relative to the first frame, which strips the static
(identity) component and leaves the motion content the latents are meant
to capture.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .config import ModelConfig
from .core import GaussianParams, sample_diag_gaussian


def _promote(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.unsqueeze(0), True
    return x, False


class PosteriorBlock(nn.Module):
    """Posterior for a single style layer."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.stem1 = nn.Linear(config.style_dim, config.post_stem_hidden)
        self.stem2 = nn.Linear(config.post_stem_hidden, config.post_stem_out)
        self.audio_proj = nn.Linear(config.audio_dim, config.post_audio_proj)
        self.rnn = nn.LSTM(
            config.post_stem_out + config.post_audio_proj,
            config.post_rnn_hidden,
            batch_first=True,
        )
        self.head = nn.Linear(config.post_rnn_hidden, 2 * config.motion_dim)
        self.motion_dim = config.motion_dim
        self.to(config.torch_dtype)

    def forward(self, w_layer: Tensor, audio: Tensor) -> GaussianParams:
        """w_layer: [B, N, style_dim] codes of one layer; audio: [B, N, audio_dim]."""
        dtype = self.head.weight.dtype
        w_layer, squeeze = _promote(w_layer.to(dtype))
        audio, _ = _promote(audio.to(dtype))
        if w_layer.shape[1] != audio.shape[1]:
            raise ValueError(
                f"style sequence ({w_layer.shape[1]} frames) and audio "
                f"({audio.shape[1]} frames) disagree"
            )
        rel = w_layer - w_layer[:, :1]
        x = torch.tanh(self.stem2(F.leaky_relu(self.stem1(rel), 0.2)))
        a = self.audio_proj(audio)
        h, _ = self.rnn(torch.cat([x, a], dim=-1))
        out = self.head(h)
        mu, log_sigma = out.chunk(2, dim=-1)
        if squeeze:
            mu, log_sigma = mu[0], log_sigma[0]
        return GaussianParams(mu, log_sigma)


class PosteriorEncoder(nn.Module):
    """One independent posterior block per manipulated style layer."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            PosteriorBlock(config) for _ in range(config.n_edit_layers)
        )
        self.n_edit_layers = config.n_edit_layers

    def forward(self, styles: Tensor, audio: Tensor) -> list[GaussianParams]:
        """styles: [B, N, L, D] full stacks; returns one GaussianParams per
        manipulated layer."""
        return [
            block(styles[..., i, :], audio) for i, block in enumerate(self.blocks)
        ]


def sample_posterior(gp: GaussianParams, eps: Tensor) -> Tensor:
    """Reparameterized motion sample m = mu + sigma * eps."""
    return sample_diag_gaussian(gp.mu, gp.log_sigma, eps)


def posterior_log_prob(gp: GaussianParams, m: Tensor) -> Tensor:
    """Factorized log q(m_{0:T}); sums over frames and channels."""
    return gp.log_prob(m).sum(dim=-1)
