"""Frozen invertible toy world: generator, encoder oracle, and clip sampler.

The world maps low-dimensional generative factors (identity, pose, eye
openness, lip articulation) linearly into style codes, renders style codes
linearly into small images, and emits raw audio whose designated channels
causally drive the lip factor.  Because every map is linear and full rank,
ground-truth factors can be recovered exactly from any generated frame,
which is what makes oracle-based evaluation possible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .config import ConfigError, ModelConfig
from .core import DTYPE, StylePlus, StyleSequence, seeded_generator
from .tensorio import load_array, save_array

# motion statistics of the sampler
POSE_AR = 0.95
POSE_NOISE = 0.1
ARTIC_AR = 0.6
ARTIC_NOISE = 0.8
LIP_MA_WINDOW = 3
BLINK_PROFILE = (0.5, 0.0, 0.5)   # eye openness across one blink event
BLINK_REFRACTORY_FRAC = 0.3       # fraction of the mean gap with no new blink

# amplitude calibration: motion factors dominate the dynamic pixel range
# (as pose does for real heads), the static canvas stays visible but small
IDENTITY_SCALE = 0.5
STYLE_BIAS_SCALE = 0.15
GAIN_ID = 0.4
GAIN_POSE = 3.0
GAIN_EYE = 2.0
GAIN_LIP = 1.5
RENDER_SCALE = 0.8
LANDMARK_GAIN = 0.5

SPAN_TOLERANCE = 1e-6


@dataclass
class FactorState:
    """Ground-truth generative factors for one frame.

    Pose components nominally live in [-1, 1] and eye openness in [0, 1];
    factors recovered from arbitrary (e.g. generated) frames may fall
    slightly outside those ranges and are stored as-is.
    """

    identity: Tensor
    pose: Tensor
    eye: float
    lip: Tensor

    def __post_init__(self):
        if self.pose.shape != (3,):
            raise ValueError("pose must have 3 components")
        self.eye = float(self.eye)

    def to_vector(self) -> Tensor:
        eye = torch.tensor([self.eye], dtype=DTYPE)
        return torch.cat([self.identity, self.pose, eye, self.lip])

    @classmethod
    def from_vector(cls, vec: Tensor, id_dim: int, lip_dim: int) -> "FactorState":
        identity = vec[:id_dim]
        pose = vec[id_dim : id_dim + 3]
        eye = float(vec[id_dim + 3])
        lip = vec[id_dim + 4 : id_dim + 4 + lip_dim]
        return cls(identity=identity, pose=pose, eye=eye, lip=lip)

    def in_valid_ranges(self, tol: float = 1e-9) -> bool:
        return bool(
            (self.pose.abs() <= 1 + tol).all() and -tol <= self.eye <= 1 + tol
        )


@dataclass
class InversionResult:
    """Factors recovered from a style stack plus the out-of-span residual."""

    factors: FactorState
    residual: float

    @property
    def in_span(self) -> bool:
        return self.residual <= SPAN_TOLERANCE


@dataclass
class WorldParams:
    """Immutable world tensors; fully determined by (config, seed)."""

    config: ModelConfig
    seed: int
    mix: Tensor          # [L*D, factor_dim] stacked factor -> style map
    mix_pinv: Tensor     # exact left inverse of mix
    style_bias: Tensor   # [L, D]
    render_map: Tensor   # [3*S*S, L*D]
    landmark_map: Tensor  # [2*K, 3 + 1 + lip_dim]
    landmark_base: Tensor  # [K, 2]
    mouth_indices: Tensor  # [K_m] long
    audio_mix: Tensor    # [audio_raw_dim, lip_dim]; rows >= lip_dim are zero
    audio_mix_inv: Tensor  # [lip_dim, lip_dim] inverse of the signal block
    render_injectivity: float  # smallest singular value of render∘mix

    def factor_state(self, vec: Tensor) -> FactorState:
        return FactorState.from_vector(vec.to(DTYPE), self.config.id_dim,
                                       self.config.lip_dim)

    @property
    def dtype(self):
        return self.mix.dtype

    def cast(self, dtype) -> "WorldParams":
        """Converted copy for mixed-precision pipelines; the float64
        original remains the oracle."""
        if dtype == self.mix.dtype:
            return self
        from dataclasses import replace

        converted = {
            name: getattr(self, name).to(dtype)
            for name in ("mix", "mix_pinv", "style_bias", "render_map",
                         "landmark_map", "landmark_base", "audio_mix",
                         "audio_mix_inv")
        }
        return replace(self, **converted)


@dataclass
class SyntheticClip:
    """One clip: ground-truth styles, rendered frames, audio, and oracle data."""

    styles: StyleSequence
    frames: Tensor          # [n, 3, S, S] raw (unclipped) render values
    audio_raw: Tensor       # [n, audio_raw_dim]
    factors: list
    landmarks: Tensor       # [n, K, 2]
    seed: int

    def __len__(self) -> int:
        return len(self.styles)

    @property
    def factor_matrix(self) -> Tensor:
        return torch.stack([f.to_vector() for f in self.factors])


def _unit_columns(mat: Tensor, gain: float) -> Tensor:
    norms = torch.linalg.vector_norm(mat, dim=0, keepdim=True)
    return gain * mat / norms


def build_world(config: ModelConfig, seed: int) -> WorldParams:
    """Construct the frozen world; deterministic in (config, seed)."""
    L, D = config.n_style_layers, config.style_dim
    le = config.n_edit_layers
    d_f = config.factor_dim
    if d_f > le * D:
        raise ConfigError(
            f"factor dimension {d_f} exceeds editable capacity {le * D}"
        )
    gen = seeded_generator(seed, "world")

    def draw(*shape):
        return torch.randn(*shape, generator=gen, dtype=DTYPE)

    a_id = _unit_columns(draw(L * D, config.id_dim), GAIN_ID)
    a_pose = _unit_columns(draw(le * D, 3), GAIN_POSE)
    a_eye = _unit_columns(draw(le * D, 1), GAIN_EYE)
    a_lip = _unit_columns(draw(le * D, config.lip_dim), GAIN_LIP)

    # stacked factor -> style map; pose/eye/lip reach only the editable layers
    mix = torch.zeros(L * D, d_f, dtype=DTYPE)
    mix[:, : config.id_dim] = a_id
    motion = torch.cat([a_pose, a_eye, a_lip], dim=1)
    mix[: le * D, config.id_dim :] = motion

    sv = torch.linalg.svdvals(mix)
    if sv[-1] < 1e-10:
        raise ConfigError("factor->style map is rank deficient")
    mix_pinv = torch.linalg.pinv(mix)

    style_bias = STYLE_BIAS_SCALE * draw(L, D)

    n_px = 3 * config.image_size * config.image_size
    render_map = draw(n_px, L * D) * (RENDER_SCALE / math.sqrt(L * D))
    render_injectivity = float(torch.linalg.svdvals(render_map @ mix)[-1])
    if render_injectivity <= 1e-12:
        raise ConfigError("render map is not injective on the factor image")

    landmark_map, landmark_base, mouth_idx = _build_landmarks(config, gen)

    # orthogonal mixing of the articulation drive into the signal channels
    w_sig, _ = torch.linalg.qr(draw(config.lip_dim, config.lip_dim))
    audio_mix = torch.zeros(config.audio_raw_dim, config.lip_dim, dtype=DTYPE)
    audio_mix[: config.lip_dim] = w_sig

    return WorldParams(
        config=config,
        seed=seed,
        mix=mix,
        mix_pinv=mix_pinv,
        style_bias=style_bias,
        render_map=render_map,
        landmark_map=landmark_map,
        landmark_base=landmark_base,
        mouth_indices=mouth_idx,
        audio_mix=audio_mix,
        audio_mix_inv=torch.linalg.inv(w_sig),
        render_injectivity=render_injectivity,
    )


def _build_landmarks(config: ModelConfig, gen: torch.Generator):
    """Landmark layout: mouth points react to lip only, the rest to pose+eye."""
    K, K_m = config.n_landmarks, config.n_mouth_landmarks
    n_face = K - K_m
    base = torch.zeros(K, 2, dtype=DTYPE)
    for i in range(n_face):  # upper arc
        ang = math.pi * (0.15 + 0.7 * i / max(1, n_face - 1))
        base[i, 0] = 0.6 * math.cos(ang)
        base[i, 1] = 0.25 + 0.35 * math.sin(ang)
    for j in range(K_m):     # mouth arc
        ang = math.pi * (1.25 + 0.5 * j / max(1, K_m - 1))
        base[n_face + j, 0] = 0.3 * math.cos(ang)
        base[n_face + j, 1] = -0.35 + 0.25 * math.sin(ang)

    d_in = 3 + 1 + config.lip_dim
    lam = torch.zeros(2 * K, d_in, dtype=DTYPE)
    face_rows = torch.randn(2 * n_face, 4, generator=gen, dtype=DTYPE)
    mouth_rows = torch.randn(2 * K_m, config.lip_dim, generator=gen, dtype=DTYPE)
    lam[: 2 * n_face, :4] = _unit_columns(face_rows, LANDMARK_GAIN)
    lam[2 * n_face :, 4:] = _unit_columns(mouth_rows, LANDMARK_GAIN)
    mouth_idx = torch.arange(n_face, K, dtype=torch.long)
    return lam, base, mouth_idx


# ---------------------------------------------------------------------------
# factor <-> style <-> image maps


def styles_from_factors(world: WorldParams, factor_mat: Tensor) -> Tensor:
    """[n, factor_dim] -> [n, L, D] style stacks."""
    cfg = world.config
    factor_mat = factor_mat.to(world.dtype)
    flat = factor_mat @ world.mix.T + world.style_bias.reshape(-1)
    return flat.reshape(-1, cfg.n_style_layers, cfg.style_dim)


def style_of(world: WorldParams, f: FactorState) -> StylePlus:
    if not f.in_valid_ranges(tol=1e-6):
        raise ValueError("factor state outside valid ranges")
    codes = styles_from_factors(world, f.to_vector().unsqueeze(0))[0]
    return StylePlus(codes)


def factors_from_styles(world: WorldParams, styles: Tensor) -> tuple[Tensor, Tensor]:
    """Exact left-inverse recovery; returns (factor matrix, residual norms)."""
    styles = styles.to(world.dtype)
    flat = styles.reshape(styles.shape[0], -1) - world.style_bias.reshape(-1)
    factors = flat @ world.mix_pinv.T
    recon = factors @ world.mix.T
    residual = torch.linalg.vector_norm(recon - flat, dim=-1)
    return factors, residual


def invert_style(world: WorldParams, w: StylePlus) -> InversionResult:
    factors, residual = factors_from_styles(world, w.codes.unsqueeze(0))
    return InversionResult(
        factors=world.factor_state(factors[0]), residual=float(residual[0])
    )


def render_sequence(world: WorldParams, styles: Tensor) -> Tensor:
    """[n, L, D] -> [n, 3, S, S] raw differentiable pixel values."""
    S = world.config.image_size
    styles = styles.to(world.dtype)
    flat = styles.reshape(styles.shape[0], -1) @ world.render_map.T
    return flat.reshape(-1, 3, S, S)


def render(world: WorldParams, w: StylePlus) -> Tensor:
    return render_sequence(world, w.codes.unsqueeze(0))[0]


def to_display(frames: Tensor) -> Tensor:
    """Clipped [0, 1] display copy; keep the raw values for gradients."""
    return (frames + 0.5).clamp(0.0, 1.0)


def landmarks_from_factors(world: WorldParams, factor_mat: Tensor) -> Tensor:
    cfg = world.config
    motion = factor_mat.to(world.dtype)[:, cfg.id_dim :]
    flat = motion @ world.landmark_map.T
    return world.landmark_base.unsqueeze(0) + flat.reshape(
        -1, cfg.n_landmarks, 2
    )


def landmarks_of(world: WorldParams, f: FactorState) -> Tensor:
    if not f.in_valid_ranges(tol=1e-6):
        raise ValueError("factor state outside valid ranges")
    return landmarks_from_factors(world, f.to_vector().unsqueeze(0))[0]


# ---------------------------------------------------------------------------
# clip sampling


def _causal_moving_average(x: Tensor, window: int) -> Tensor:
    """Mean over the trailing ``window`` frames, shrunk at the start."""
    csum = torch.cumsum(x, dim=0)
    out = csum.clone()
    out[window:] = csum[window:] - csum[:-window]
    counts = torch.clamp(
        torch.arange(1, x.shape[0] + 1, dtype=x.dtype), max=float(window)
    )
    return out / counts.unsqueeze(-1)


def lip_from_audio(world: WorldParams, audio_raw: Tensor) -> Tensor:
    """Recover the lip trajectory implied by raw audio (causal, deterministic)."""
    d_lip = world.config.lip_dim
    drive = audio_raw.to(world.dtype)[:, :d_lip] @ world.audio_mix_inv.T
    return torch.tanh(_causal_moving_average(drive, LIP_MA_WINDOW))


def sample_eye_track(
    n_frames: int, frame_rate: float, blink_rate: float, gen: torch.Generator
) -> Tensor:
    """Openness track: 1.0 with sparse blink dips following a renewal process."""
    eye = torch.ones(n_frames, dtype=DTYPE)
    if blink_rate <= 0:
        return eye
    mean_gap = frame_rate / blink_rate
    refractory = max(len(BLINK_PROFILE), int(round(BLINK_REFRACTORY_FRAC * mean_gap)))
    extra_mean = max(1.0, mean_gap - refractory)
    t = int(torch.floor(torch.rand((), generator=gen) * mean_gap).item())
    while t + len(BLINK_PROFILE) <= n_frames:
        for i, v in enumerate(BLINK_PROFILE):
            eye[t + i] = v
        u = float(torch.rand((), generator=gen))
        t += refractory + int(-extra_mean * math.log1p(-u))
    return eye


def sample_pose_track(n_frames: int, gen: torch.Generator) -> Tensor:
    """Mean-reverting random walk per axis, clipped to [-1, 1]."""
    stat_std = POSE_NOISE / math.sqrt(1.0 - POSE_AR**2)
    noise = torch.randn(n_frames, 3, generator=gen, dtype=DTYPE)
    pose = torch.empty(n_frames, 3, dtype=DTYPE)
    pose[0] = (stat_std * noise[0]).clamp(-1, 1)
    for t in range(1, n_frames):
        pose[t] = (POSE_AR * pose[t - 1] + POSE_NOISE * noise[t]).clamp(-1, 1)
    return pose


def _sample_articulation(n_frames: int, d_lip: int, gen: torch.Generator) -> Tensor:
    noise = torch.randn(n_frames, d_lip, generator=gen, dtype=DTYPE)
    drive = torch.empty(n_frames, d_lip, dtype=DTYPE)
    drive[0] = noise[0]
    for t in range(1, n_frames):
        drive[t] = ARTIC_AR * drive[t - 1] + ARTIC_NOISE * noise[t]
    return drive


def sample_clip(world: WorldParams, n_frames: int, seed: int) -> SyntheticClip:
    """Draw one synchronized clip; deterministic in (world, n_frames, seed)."""
    if n_frames < 3:
        raise ValueError("a clip needs at least 3 frames")
    cfg = world.config

    identity = IDENTITY_SCALE * torch.randn(
        cfg.id_dim, generator=seeded_generator(seed, "identity"), dtype=DTYPE
    )
    pose = sample_pose_track(n_frames, seeded_generator(seed, "pose"))
    eye = sample_eye_track(
        n_frames, cfg.frame_rate, cfg.blink_rate, seeded_generator(seed, "eye")
    )
    drive = _sample_articulation(
        n_frames, cfg.lip_dim, seeded_generator(seed, "articulation")
    )

    audio_raw = torch.zeros(n_frames, cfg.audio_raw_dim, dtype=DTYPE)
    audio_raw[:, : cfg.lip_dim] = drive @ world.audio_mix[: cfg.lip_dim].T
    audio_raw[:, cfg.lip_dim :] = torch.randn(
        n_frames,
        cfg.n_distractors,
        generator=seeded_generator(seed, "distractor"),
        dtype=DTYPE,
    )
    lip = lip_from_audio(world, audio_raw)

    factor_mat = torch.cat(
        [identity.expand(n_frames, -1), pose, eye.unsqueeze(-1), lip], dim=1
    )
    styles = styles_from_factors(world, factor_mat)
    frames = render_sequence(world, styles)
    landmarks = landmarks_from_factors(world, factor_mat)
    factors = [world.factor_state(factor_mat[t]) for t in range(n_frames)]

    return SyntheticClip(
        styles=StyleSequence(styles, frame_rate=cfg.frame_rate),
        frames=frames,
        audio_raw=audio_raw,
        factors=factors,
        landmarks=landmarks,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# dataset directory layout

_CLIP_FILES = ("styles.bin", "frames.bin", "audio.bin", "factors.bin", "landmarks.bin")


def clip_dir_name(index: int) -> str:
    return f"clip_{index:05d}"


def save_clip(clip: SyntheticClip, clip_dir) -> None:
    clip_dir = Path(clip_dir)
    clip_dir.mkdir(parents=True, exist_ok=True)
    arrays = {
        "styles.bin": clip.styles.frames,
        "frames.bin": clip.frames,
        "audio.bin": clip.audio_raw,
        "factors.bin": clip.factor_matrix,
        "landmarks.bin": clip.landmarks,
    }
    for name, tensor in arrays.items():
        save_array(clip_dir / name, tensor.numpy(), dtype="f32")


def load_clip(clip_dir, world: WorldParams, seed: int = -1) -> SyntheticClip:
    clip_dir = Path(clip_dir)
    data = {name: torch.from_numpy(load_array(clip_dir / name)).to(DTYPE)
            for name in _CLIP_FILES}
    factor_mat = data["factors.bin"]
    factors = [world.factor_state(factor_mat[t]) for t in range(factor_mat.shape[0])]
    return SyntheticClip(
        styles=StyleSequence(data["styles.bin"], frame_rate=world.config.frame_rate),
        frames=data["frames.bin"],
        audio_raw=data["audio.bin"],
        factors=factors,
        landmarks=data["landmarks.bin"],
        seed=seed,
    )


def save_dataset(world: WorldParams, clips: list, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    world.config.save(out_dir / "config.txt")
    lines = [f"# world_seed {world.seed}"]
    for i, clip in enumerate(clips):
        name = clip_dir_name(i)
        save_clip(clip, out_dir / name)
        lines.append(f"{name} {clip.seed}")
    (out_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_manifest(data_dir) -> tuple[int, list[tuple[str, int]]]:
    """Returns (world_seed, [(clip_dir_name, clip_seed), ...])."""
    lines = (Path(data_dir) / "manifest.txt").read_text().splitlines()
    world_seed = None
    entries = []
    for line in lines:
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "world_seed":
                world_seed = int(parts[1])
            continue
        name, seed = line.split()
        entries.append((name, int(seed)))
    if world_seed is None:
        raise IOError("manifest.txt lacks a '# world_seed N' line")
    return world_seed, entries


def load_dataset(data_dir, config: ModelConfig | None = None):
    """Rebuild the world from the stored config/seed and load every clip."""
    data_dir = Path(data_dir)
    if config is None:
        config = ModelConfig.load(data_dir / "config.txt")
    world_seed, entries = read_manifest(data_dir)
    world = build_world(config, world_seed)
    clips = [load_clip(data_dir / name, world, seed) for name, seed in entries]
    return world, clips
