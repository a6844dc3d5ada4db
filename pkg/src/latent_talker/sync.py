"""Contrastive audio-video synchronization discriminator.

Two small encoders embed a short window of frames and the aligned raw-audio
segment into a shared unit sphere; training pulls in-sync pairs together
against both in-batch negatives (other clips) and time-shifted negatives
from the same clip.  After pretraining the encoders are frozen and reused
as a fixed scoring network.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .config import ModelConfig
from .core import DTYPE, seeded_generator
from .tensorio import load_bundle, save_bundle
from .world import SyntheticClip

NORM_EPS = 1e-8
TAU_MIN = 0.01
TAU_MAX = 1.0
SHIFT_MAX = 10


class FrozenEncodersError(RuntimeError):
    """Raised when a parameter update is attempted on frozen encoders."""


def l2_normalize(x: Tensor) -> Tensor:
    return x / (torch.linalg.vector_norm(x, dim=-1, keepdim=True) + NORM_EPS)


class VideoWindowEncoder(nn.Module):
    """Two-layer conv stem over the window, then a fully connected head.

    With pooling "stack" the frames enter as channels so the stem sees
    temporal order (the SyncNet idiom); "mean" runs the stem per frame and
    mean-pools, which is cheaper but order-blind.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        s = config.image_size
        self.window = config.sync_window
        self.pool = config.sync_video_pool
        in_ch = 3 * self.window if self.pool == "stack" else 3
        self.conv1 = nn.Conv2d(in_ch, config.sync_conv1, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(config.sync_conv1, config.sync_conv2, 3,
                               stride=2, padding=1)
        feat = config.sync_conv2 * (s // 4) * (s // 4)
        self.fc1 = nn.Linear(feat, config.sync_video_hidden)
        self.fc2 = nn.Linear(config.sync_video_hidden, config.sync_embed_dim)
        self.to(config.torch_dtype)

    def forward(self, windows: Tensor) -> Tensor:
        windows = windows.to(self.fc1.weight.dtype)
        squeeze = windows.ndim == 4
        if squeeze:
            windows = windows.unsqueeze(0)
        b, w = windows.shape[:2]
        if w != self.window:
            raise ValueError(f"expected a {self.window}-frame window, got {w}")
        if self.pool == "stack":
            x = windows.reshape(b, w * 3, *windows.shape[3:])
            x = F.leaky_relu(self.conv1(x), 0.2)
            x = F.leaky_relu(self.conv2(x), 0.2)
            x = x.reshape(b, -1)
        else:
            x = windows.reshape(b * w, *windows.shape[2:])
            x = F.leaky_relu(self.conv1(x), 0.2)
            x = F.leaky_relu(self.conv2(x), 0.2)
            x = x.reshape(b, w, -1).mean(dim=1)
        x = F.leaky_relu(self.fc1(x), 0.2)
        emb = l2_normalize(self.fc2(x))
        return emb[0] if squeeze else emb


class AudioSegmentEncoder(nn.Module):
    """Fully connected head over the flattened raw-audio segment."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.window = config.sync_window
        self.fc1 = nn.Linear(config.sync_window * config.audio_raw_dim,
                             config.sync_audio_hidden)
        self.fc2 = nn.Linear(config.sync_audio_hidden, config.sync_embed_dim)
        self.to(config.torch_dtype)

    def forward(self, segments: Tensor) -> Tensor:
        segments = segments.to(self.fc1.weight.dtype)
        squeeze = segments.ndim == 2
        if squeeze:
            segments = segments.unsqueeze(0)
        b, w = segments.shape[:2]
        if w != self.window:
            raise ValueError(f"expected a {self.window}-frame segment, got {w}")
        x = F.leaky_relu(self.fc1(segments.reshape(b, -1)), 0.2)
        emb = l2_normalize(self.fc2(x))
        return emb[0] if squeeze else emb


class SyncEncoders(nn.Module):
    """Joint embedding pair plus a learnable temperature."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.f_v = VideoWindowEncoder(config)
        self.f_a = AudioSegmentEncoder(config)
        self.log_tau = nn.Parameter(
            torch.tensor(math.log(config.tau_init), dtype=config.torch_dtype)
        )
        self.frozen = False

    @property
    def tau(self) -> Tensor:
        return torch.exp(self.log_tau.clamp(math.log(TAU_MIN), math.log(TAU_MAX)))

    def embed_video(self, windows: Tensor) -> Tensor:
        return self.f_v(windows)

    def embed_audio(self, segments: Tensor) -> Tensor:
        return self.f_a(segments)

    def freeze(self) -> "SyncEncoders":
        for p in self.parameters():
            p.requires_grad_(False)
            p.grad = None
        self.eval()
        self.frozen = True
        return self


def sync_score(v_emb: Tensor, a_emb: Tensor, tau) -> Tensor:
    """Temperature-scaled cosine score; inputs are unit-norm embeddings."""
    return (v_emb * a_emb).sum(dim=-1) / tau


@dataclass
class SyncBatch:
    """Aligned window/segment stacks; ``alignment[i]`` is the in-sync audio
    index for video i (identity permutation unless stated otherwise)."""

    video_windows: Tensor   # [M, window, 3, S, S]
    audio_segments: Tensor  # [M, window, audio_raw_dim]
    alignment: Tensor = field(default=None)  # [M] long

    def __post_init__(self):
        m = self.video_windows.shape[0]
        if self.audio_segments.shape[0] != m:
            raise ValueError("modalities disagree on the number of pairs")
        if self.alignment is None:
            self.alignment = torch.arange(m, dtype=torch.long)

    def __len__(self) -> int:
        return self.video_windows.shape[0]


def infonce(v_emb: Tensor, a_emb: Tensor, tau, alignment: Tensor | None = None) -> Tensor:
    """Symmetrized InfoNCE over unit-norm embedding stacks [M, d]."""
    m = v_emb.shape[0]
    if alignment is None:
        alignment = torch.arange(m, dtype=torch.long)
    logits = v_emb @ a_emb.T / tau
    inv = torch.empty_like(alignment)
    inv[alignment] = torch.arange(m, dtype=torch.long)
    loss_v2a = F.cross_entropy(logits, alignment)
    loss_a2v = F.cross_entropy(logits.T, inv)
    return 0.5 * (loss_v2a + loss_a2v)


def contrastive_loss(encoders: SyncEncoders, batch: SyncBatch) -> Tensor:
    """Symmetrized InfoNCE over all pairs in the batch."""
    v = encoders.embed_video(batch.video_windows)
    a = encoders.embed_audio(batch.audio_segments)
    return infonce(v, a, encoders.tau, batch.alignment)


# ---------------------------------------------------------------------------
# window extraction


def video_window(clip: SyntheticClip, k: int, half_win: int) -> Tensor:
    n = len(clip)
    if not half_win <= k <= n - 1 - half_win:
        raise IndexError(f"window center {k} out of range for {n} frames")
    return clip.frames[k - half_win : k + half_win + 1]


def audio_segment(clip: SyntheticClip, k: int, half_win: int) -> Tensor:
    n = clip.audio_raw.shape[0]
    if not half_win <= k <= n - 1 - half_win:
        raise IndexError(f"segment center {k} out of range for {n} frames")
    return clip.audio_raw[k - half_win : k + half_win + 1]


def in_sync_pair(clip: SyntheticClip, k: int, half_win: int) -> tuple[Tensor, Tensor]:
    return video_window(clip, k, half_win), audio_segment(clip, k, half_win)


def sample_offsync(clip: SyntheticClip, k: int, shift: int, half_win: int) -> SyncBatch:
    """Off-sync negatives: the window at k against audio at k+shift, plus the
    mirrored variant with the audio fixed at k and the video shifted."""
    if abs(shift) <= half_win:
        raise ValueError(
            f"|shift|={abs(shift)} must exceed the half-window {half_win} to be "
            "genuinely off-sync"
        )
    video = torch.stack([
        video_window(clip, k, half_win),
        video_window(clip, k + shift, half_win),
    ])
    audio = torch.stack([
        audio_segment(clip, k + shift, half_win),
        audio_segment(clip, k, half_win),
    ])
    return SyncBatch(video, audio)


# ---------------------------------------------------------------------------
# pretraining


def _draw_training_items(clips, config: ModelConfig, batch_size: int,
                         gen: torch.Generator):
    """Pick (clip, center, shifted center) triples with all windows in range.

    Shift magnitudes come from [half_win+1, SHIFT_MAX], capped by what the
    clip length admits.
    """
    hw = config.sync_half_win
    videos, audios, shift_audios, shift_videos = [], [], [], []
    idx = torch.randint(len(clips), (batch_size,), generator=gen)
    for ci in idx.tolist():
        clip = clips[ci]
        n = len(clip)
        shift_cap = min(SHIFT_MAX, (n - 1 - 2 * hw) // 2)
        if shift_cap < hw + 1:
            raise ValueError(
                f"clip of {n} frames is too short for shift negatives; need "
                f"at least {4 * hw + 5} frames"
            )
        lo, hi = hw + shift_cap, n - 1 - hw - shift_cap
        k = int(torch.randint(lo, hi + 1, (), generator=gen))
        mag = int(torch.randint(hw + 1, shift_cap + 1, (), generator=gen))
        sign = 1 if int(torch.randint(0, 2, (), generator=gen)) else -1
        s = sign * mag
        videos.append(video_window(clip, k, hw))
        audios.append(audio_segment(clip, k, hw))
        shift_audios.append(audio_segment(clip, k + s, hw))
        shift_videos.append(video_window(clip, k + s, hw))
    return (torch.stack(videos), torch.stack(audios),
            torch.stack(shift_audios), torch.stack(shift_videos))


def pretraining_loss(encoders: SyncEncoders, video: Tensor, audio: Tensor,
                     shift_audio: Tensor, shift_video: Tensor) -> Tensor:
    """InfoNCE with in-batch negatives plus same-clip time-shift negatives."""
    m = video.shape[0]
    v = encoders.embed_video(video)
    a = encoders.embed_audio(audio)
    a_neg = encoders.embed_audio(shift_audio)
    v_neg = encoders.embed_video(shift_video)
    tau = encoders.tau
    target = torch.arange(m, dtype=torch.long)
    logits_v2a = v @ torch.cat([a, a_neg]).T / tau
    logits_a2v = a @ torch.cat([v, v_neg]).T / tau
    return 0.5 * (F.cross_entropy(logits_v2a, target)
                  + F.cross_entropy(logits_a2v, target))


def sync_train_step(encoders: SyncEncoders, optimizer, clips, config,
                    batch_size: int, gen: torch.Generator) -> float:
    """One optimizer step on a freshly drawn batch; refuses frozen encoders."""
    if encoders.frozen:
        raise FrozenEncodersError("sync encoders are frozen; no updates allowed")
    batch = _draw_training_items(clips, config, batch_size, gen)
    loss = pretraining_loss(encoders, *batch)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def pretrain_sync(clips, config: ModelConfig, *, steps: int = 1500,
                  batch_size: int = 32, learning_rate: float = 1e-3,
                  seed: int = 0, log_every: int = 0) -> tuple[SyncEncoders, list]:
    """Train the discriminator on a clip corpus and return it frozen."""
    encoders = SyncEncoders(config)
    seeded_init(encoders, seeded_generator(seed, "sync-weights"))
    optimizer = torch.optim.Adam(encoders.parameters(), lr=learning_rate)
    history = []
    for step in range(steps):
        gen = seeded_generator(seed, "sync-batch", step)
        loss = sync_train_step(encoders, optimizer, clips, config, batch_size, gen)
        history.append(loss)
        if log_every and (step + 1) % log_every == 0:
            print(f"sync step {step + 1}/{steps} loss {history[-1]:.4f}")
    encoders.freeze()
    return encoders, history


def seeded_init(module: nn.Module, gen: torch.Generator) -> None:
    """Seeded re-initialization: fan-in uniform weights, zero biases."""
    for p in module.parameters():
        if p.ndim >= 2:
            fan_in = p.shape[1] if p.ndim == 2 else int(np.prod(p.shape[1:]))
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                p.uniform_(-bound, bound, generator=gen)
        elif p.ndim == 1 and p.numel() > 1:
            with torch.no_grad():
                p.zero_()


def retrieval_accuracy(encoders: SyncEncoders, clips, config: ModelConfig,
                       n_candidates: int = 32, n_rounds: int = 20,
                       seed: int = 0) -> float:
    """Top-1 video->audio retrieval among n_candidates in-sync pairs, one
    candidate per distinct clip."""
    if len(clips) < n_candidates:
        raise ValueError("need at least n_candidates clips for retrieval")
    hw = config.sync_half_win
    correct, total = 0, 0
    with torch.no_grad():
        for r in range(n_rounds):
            gen = seeded_generator(seed, "retrieval", r)
            idx = torch.randperm(len(clips), generator=gen)[:n_candidates]
            videos, audios = [], []
            for ci in idx.tolist():
                clip = clips[ci]
                k = int(torch.randint(hw, len(clip) - hw, (), generator=gen))
                w, a = in_sync_pair(clip, k, hw)
                videos.append(w)
                audios.append(a)
            v = encoders.embed_video(torch.stack(videos))
            a = encoders.embed_audio(torch.stack(audios))
            pred = (v @ a.T).argmax(dim=1)
            correct += int((pred == torch.arange(n_candidates)).sum())
            total += n_candidates
    return correct / total


# ---------------------------------------------------------------------------
# checkpointing


def save_sync_checkpoint(encoders: SyncEncoders, path) -> None:
    meta = {
        "kind": "sync",
        "config_hash": encoders.config.content_hash(),
        "frozen": encoders.frozen,
        "config_text": encoders.config.to_text(),
    }
    tensors = {k: v.detach().numpy() for k, v in encoders.state_dict().items()}
    save_bundle(path, meta, tensors)


def load_sync_checkpoint(path, config: ModelConfig) -> SyncEncoders:
    meta, tensors = load_bundle(path)
    if meta.get("kind") != "sync":
        raise IOError(f"{path} is not a sync checkpoint")
    if meta.get("config_hash") != config.content_hash():
        raise IOError(
            "config mismatch: checkpoint was written with a different model "
            "configuration"
        )
    encoders = SyncEncoders(config)
    template = encoders.state_dict()
    state = {k: torch.from_numpy(v).to(template[k].dtype)
             for k, v in tensors.items()}
    encoders.load_state_dict(state)
    if meta.get("frozen"):
        encoders.freeze()
    return encoders
