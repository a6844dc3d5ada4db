"""Full trainable model: audio encoder plus per-layer latent machinery.

Each manipulated style layer owns an independent posterior block, prior,
flow, smoother, and manipulator; the audio encoder is shared.  The frozen
world (generator) and sync discriminator are deliberately *not* part of
this module: they receive no gradients and live outside the checkpointed
parameter groups.
"""

from __future__ import annotations

import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .config import ModelConfig
from .core import seed_from
from .manipulation import Manipulator, Smoother, manipulate_sequence
from .posterior import PosteriorEncoder
from .prior_flow import MotionFlow, MotionPrior


class AudioEncoder(nn.Module):
    """Per-frame map from raw audio channels to audio features."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.fc1 = nn.Linear(config.audio_raw_dim, config.audio_enc_hidden)
        self.fc2 = nn.Linear(config.audio_enc_hidden, config.audio_dim)
        self.to(config.torch_dtype)

    def forward(self, raw: Tensor) -> Tensor:
        raw = raw.to(self.fc1.weight.dtype)
        return self.fc2(F.leaky_relu(self.fc1(raw), 0.2))


class TalkerModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.audio_encoder = AudioEncoder(config)
        self.posterior = PosteriorEncoder(config)
        self.priors = nn.ModuleList(
            MotionPrior(config) for _ in range(config.n_edit_layers)
        )
        self.flows = nn.ModuleList(
            MotionFlow(config) for _ in range(config.n_edit_layers)
        )
        self.smoothers = nn.ModuleList(
            Smoother(config) for _ in range(config.n_edit_layers)
        )
        self.manipulators = nn.ModuleList(
            Manipulator(config) for _ in range(config.n_edit_layers)
        )

    def encode_audio(self, raw: Tensor) -> Tensor:
        return self.audio_encoder(raw)

    def manipulate(self, w_ref: Tensor, audio: Tensor, motions: list[Tensor]) -> Tensor:
        return manipulate_sequence(self.smoothers, self.manipulators,
                                   w_ref, audio, motions)

    @property
    def dtype(self):
        return self.audio_encoder.fc1.weight.dtype

    @property
    def flows_initialized(self) -> bool:
        return all(f.initialized for f in self.flows)


def build_model(config: ModelConfig, seed: int) -> TalkerModel:
    """Construct a model whose default initialization is fixed by the seed.

    Module-specific initializations (zero coupling heads, near-identity
    manipulation gates) are applied inside the constructors and survive.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed_from(seed, "model-init"))
        model = TalkerModel(config)
    return model
