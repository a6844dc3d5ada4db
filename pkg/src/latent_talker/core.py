"""Shared numeric primitives, seeding helpers, and tensor-shape contracts.

Everything downstream computes in float64; randomness only ever enters
through explicit seeds or caller-supplied noise so that any run can be
reproduced bit for bit.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import torch
from torch import Tensor

DTYPE = torch.float64

LOG_SIGMA_MIN = -7.0
LOG_SIGMA_MAX = 7.0

LOG_2PI = math.log(2.0 * math.pi)


def seed_from(*parts) -> int:
    """Derive a 63-bit seed from an arbitrary tuple of ints/strings."""
    h = hashlib.sha256("\x1f".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(h[:8], "little") & (2**63 - 1)


def seeded_generator(*parts) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed_from(*parts))
    return g


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """cos(u, v) over the last dimension; zero-norm inputs are a domain error."""
    nu = torch.linalg.vector_norm(u, dim=-1)
    nv = torch.linalg.vector_norm(v, dim=-1)
    if (nu == 0).any() or (nv == 0).any():
        raise ValueError("cosine similarity is undefined for zero-norm vectors")
    return (u * v).sum(dim=-1) / (nu * nv)


def clamp_log_sigma(log_sigma: Tensor) -> Tensor:
    return log_sigma.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX)


def diag_gaussian_log_prob(x: Tensor, mu: Tensor, log_sigma: Tensor) -> Tensor:
    """Log density of a diagonal Gaussian, summed over the last dimension.

    log N(x; mu, diag(sigma^2)) with sigma = exp(log_sigma).  Leading
    dimensions broadcast.
    """
    z = (x - mu) * torch.exp(-log_sigma)
    return (-0.5 * LOG_2PI - log_sigma - 0.5 * z * z).sum(dim=-1)


def sample_diag_gaussian(mu: Tensor, log_sigma: Tensor, eps: Tensor) -> Tensor:
    """Reparameterized draw mu + sigma * eps (differentiable in mu, log_sigma)."""
    return mu + torch.exp(log_sigma) * eps


@dataclass
class GaussianParams:
    """Per-frame diagonal Gaussian parameters over a sequence.

    ``mu`` and ``log_sigma`` share shape [..., n_frames, dim]; log_sigma is
    clamped to [-7, 7] at construction to keep sigma = exp(log_sigma) in a
    sane range.
    """

    mu: Tensor
    log_sigma: Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise ValueError(
                f"mu {tuple(self.mu.shape)} and log_sigma "
                f"{tuple(self.log_sigma.shape)} must share a shape"
            )
        self.log_sigma = clamp_log_sigma(self.log_sigma)

    @property
    def sigma(self) -> Tensor:
        return torch.exp(self.log_sigma)

    def sample(self, eps: Tensor) -> Tensor:
        return sample_diag_gaussian(self.mu, self.log_sigma, eps)

    def log_prob(self, x: Tensor) -> Tensor:
        """Summed over the final (channel) dimension only."""
        return diag_gaussian_log_prob(x, self.mu, self.log_sigma)


def _check_finite(t: Tensor, name: str) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite entries")


@dataclass
class StylePlus:
    """Stack of per-layer style codes controlling one frame: [layers, dim]."""

    codes: Tensor

    def __post_init__(self):
        if self.codes.ndim != 2:
            raise ValueError(f"style codes must be 2-D, got {self.codes.ndim}-D")
        _check_finite(self.codes, "style codes")

    @property
    def n_layers(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]


@dataclass
class StyleSequence:
    """Per-frame style stacks for a clip: [n_frames, layers, dim]."""

    frames: Tensor
    frame_rate: float = 25.0

    def __post_init__(self):
        if self.frames.ndim != 3:
            raise ValueError(f"style sequence must be 3-D, got {self.frames.ndim}-D")
        if self.frames.shape[0] < 2:
            raise ValueError("style sequence needs at least 2 frames")
        _check_finite(self.frames, "style sequence")

    def __len__(self) -> int:
        return self.frames.shape[0]

    def frame(self, t: int) -> StylePlus:
        return StylePlus(self.frames[t])


@dataclass
class AudioFeatureSequence:
    """Encoded per-frame audio features: [n_frames, audio_dim]."""

    features: Tensor

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("audio features must be 2-D [n_frames, dim]")
        _check_finite(self.features, "audio features")

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class MotionLatentSequence:
    """Per-frame motion latents: [n_frames, motion_dim]."""

    latents: Tensor

    def __post_init__(self):
        if self.latents.ndim != 2:
            raise ValueError("motion latents must be 2-D [n_frames, dim]")
        _check_finite(self.latents, "motion latents")

    def __len__(self) -> int:
        return self.latents.shape[0]
