"""Configuration objects and their plain-text serialization.

Two configs drive the pipeline: ``ModelConfig`` fixes the world and network
geometry, ``TrainConfig`` fixes the optimization loop.  Both round-trip
through a ``key = value`` text format so that every run directory carries a
complete, diffable record of what produced it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

# Mel-spectrogram parameters of the full-scale audio front end.  The desk
# pipeline consumes synthetic per-frame audio features instead; recorded
# here as constants only.
MEL_SAMPLE_RATE = 16_000
MEL_N_FFT = 512
MEL_HOP_LENGTH = 160
MEL_WIN_LENGTH = 400
MEL_N_BINS = 80


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


@dataclass
class ModelConfig:
    # style space
    n_style_layers: int = 8        # codes per frame; only the first
    n_edit_layers: int = 4         # n_edit_layers are ever manipulated
    style_dim: int = 64            # channels per style code

    # latent / feature widths
    motion_dim: int = 16           # per-frame motion latent
    audio_dim: int = 16            # encoded audio feature
    id_dim: int = 4                # identity factor
    lip_dim: int = 4               # lip articulation factor
    n_distractors: int = 8         # pure-noise channels in raw audio

    # sequence geometry
    seq_len: int = 64              # training clip length, frames
    window_len: int = 15           # frames rendered per training window
    sync_half_win: int = 2         # sync windows span 2*sync_half_win+1 frames
    frame_rate: float = 25.0

    # toy world
    image_size: int = 16           # square frames, 3 channels
    n_landmarks: int = 8
    n_mouth_landmarks: int = 4
    blink_rate: float = 0.3        # nominal blink events per second

    # loss weights and optimization defaults; the third weight has no
    # matching term in the total objective and is carried unused
    lambda_l2: float = 0.1
    lambda_kl: float = 0.1
    lambda_spare: float = 0.1
    lambda_sync: float = 0.1
    learning_rate: float = 1e-4
    tau_init: float = 0.07

    # posterior encoder
    post_stem_hidden: int = 16
    post_stem_out: int = 16
    post_audio_proj: int = 16
    post_rnn_hidden: int = 64

    # prior encoder
    prior_audio_proj: int = 16
    prior_rnn_hidden: int = 64

    # normalizing flow on the prior
    flow_steps: int = 4
    flow_rnn_hidden: int = 32
    flow_audio_proj: int = 16
    flow_condition: str = "base"   # AR base sees "base" (z) or "data" (m) history

    # smoothing + manipulation
    smooth_kernel: int = 5
    smooth_sigma: float = 1.0
    smooth_conv_kernel: int = 3
    smooth_channels: int = 128
    manip_hidden: int = 128
    manip_mlp_layers: int = 1

    # audio encoder
    audio_enc_hidden: int = 32

    # numeric precision of trainable modules; the world and all oracle
    # checks always run in float64
    compute_dtype: str = "f32"

    # sync discriminator
    sync_embed_dim: int = 32
    sync_conv1: int = 8
    sync_conv2: int = 16
    sync_video_hidden: int = 64
    sync_audio_hidden: int = 64
    sync_video_pool: str = "stack"  # frames as channels; "mean" pools per frame

    seed: int = 0

    def __post_init__(self):
        if self.n_style_layers < 2 * self.n_edit_layers:
            raise ConfigError(
                f"n_style_layers={self.n_style_layers} must be >= "
                f"2*n_edit_layers={2 * self.n_edit_layers}"
            )
        if self.window_len > self.seq_len:
            raise ConfigError("window_len must not exceed seq_len")
        if 2 * self.sync_half_win + 1 > self.window_len:
            raise ConfigError("sync window does not fit in the render window")
        for name in ("lambda_l2", "lambda_kl", "lambda_spare", "lambda_sync"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.factor_dim > self.n_edit_layers * self.style_dim:
            raise ConfigError(
                f"factor dimension {self.factor_dim} exceeds the editable style "
                f"capacity {self.n_edit_layers * self.style_dim}; no exact "
                "inverse can exist"
            )
        if self.n_mouth_landmarks > self.n_landmarks:
            raise ConfigError("n_mouth_landmarks must not exceed n_landmarks")
        if self.image_size % 4 != 0:
            raise ConfigError("image_size must be divisible by 4 (two halvings)")
        if self.flow_condition not in ("base", "data"):
            raise ConfigError("flow_condition must be 'base' or 'data'")
        if self.sync_video_pool not in ("stack", "mean"):
            raise ConfigError("sync_video_pool must be 'stack' or 'mean'")
        if self.compute_dtype not in ("f32", "f64"):
            raise ConfigError("compute_dtype must be 'f32' or 'f64'")
        if self.smooth_kernel % 2 != 1 or self.smooth_conv_kernel % 2 != 1:
            raise ConfigError("smoothing kernel sizes must be odd")

    @property
    def factor_dim(self) -> int:
        """Width of the stacked factor vector [identity; pose; eye; lip]."""
        return self.id_dim + 3 + 1 + self.lip_dim

    @property
    def torch_dtype(self):
        import torch

        return torch.float32 if self.compute_dtype == "f32" else torch.float64

    @property
    def audio_raw_dim(self) -> int:
        return self.lip_dim + self.n_distractors

    @property
    def sync_window(self) -> int:
        return 2 * self.sync_half_win + 1

    @classmethod
    def paper_scale(cls) -> "ModelConfig":
        """Full-scale geometry; far too slow for CPU tests but selectable."""
        return cls(
            n_style_layers=16,
            n_edit_layers=8,
            style_dim=512,
            motion_dim=32,
            audio_dim=32,
            seq_len=128,
            post_stem_hidden=128,
            post_stem_out=32,
            post_audio_proj=32,
            post_rnn_hidden=128,
            prior_audio_proj=32,
            prior_rnn_hidden=256,
            flow_rnn_hidden=256,
            flow_audio_proj=32,
        )

    def to_text(self) -> str:
        lines = ["# model configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return _parse_keyvalue(cls, text)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text())

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def with_overrides(self, **kwargs) -> "ModelConfig":
        return replace(self, **kwargs)


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 8
    learning_rate: float = 1e-4
    lambda_l2: float = 0.1
    lambda_kl: float = 0.1
    lambda_spare: float = 0.1
    lambda_sync: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    kl_warmup_frac: float = 0.1    # fraction of steps to ramp the KL weight
    use_kl_warmup: bool = True
    use_sync_loss: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        for name in ("lambda_l2", "lambda_kl", "lambda_spare", "lambda_sync"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.kl_warmup_frac < 1.0:
            raise ConfigError("kl_warmup_frac must lie in [0, 1)")

    def to_text(self) -> str:
        lines = ["# training configuration"]
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        return _parse_keyvalue(cls, text)


def _parse_keyvalue(cls, text: str):
    """Parse ``key = value`` lines into a config dataclass.

    Blank lines and ``#`` comments are skipped; unknown keys are an error.
    """
    types = {f.name: f.type for f in fields(cls)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(types[key], value, key)
    return cls(**values)


def _coerce(typename, value: str, key: str):
    # dataclass field types arrive as strings under `from __future__ import
    # annotations`
    name = typename if isinstance(typename, str) else typename.__name__
    try:
        if name == "int":
            return int(value)
        if name == "float":
            return float(value)
        if name == "bool":
            if value in ("True", "true", "1"):
                return True
            if value in ("False", "false", "0"):
                return False
            raise ValueError(value)
        return value
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: cannot parse {value!r} as {name}") from exc
