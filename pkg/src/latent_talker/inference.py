"""Generation modes: motion-controllable (posterior) and audio-driven (prior).

Both modes share everything after the motion latents are obtained: smooth,
manipulate the reference code, render.  Output length always equals the
audio length; motion sources longer than the audio are truncated, shorter
ones are an error.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .core import (
    AudioFeatureSequence,
    DTYPE,
    StylePlus,
    StyleSequence,
    seeded_generator,
)
from .model import TalkerModel
from .posterior import sample_posterior
from .prior_flow import sample_prior
from .world import WorldParams, render_sequence, to_display

MODES = ("motion_controllable", "audio_driven")


@dataclass
class GenerationRequest:
    reference: StylePlus
    audio: AudioFeatureSequence
    mode: str
    motion_source: StyleSequence | None = None
    seed: int = 0
    posterior_mean: bool = False  # use mu instead of sampling in the posterior

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "motion_controllable" and self.motion_source is None:
            raise ValueError("motion-controllable generation needs a motion source")


@dataclass
class GenerationResult:
    frames: Tensor  # [N, 3, S, S] raw render values
    styles: Tensor  # [N, L, D]

    def style_sequence(self, frame_rate: float = 25.0) -> StyleSequence:
        return StyleSequence(self.styles, frame_rate=frame_rate)

    def __len__(self) -> int:
        return self.frames.shape[0]


def _finish(model: TalkerModel, world: WorldParams, reference: StylePlus,
            audio: Tensor, motions: list[Tensor]) -> GenerationResult:
    w_hat = model.manipulate(reference.codes, audio, motions)
    return GenerationResult(frames=render_sequence(world, w_hat), styles=w_hat)


def _empty_result(model: TalkerModel, world: WorldParams) -> GenerationResult:
    cfg = model.config
    s = cfg.image_size
    return GenerationResult(
        frames=torch.zeros(0, 3, s, s, dtype=DTYPE),
        styles=torch.zeros(0, cfg.n_style_layers, cfg.style_dim, dtype=DTYPE),
    )


def generate_motion_controllable(model: TalkerModel, world: WorldParams,
                                 req: GenerationRequest) -> GenerationResult:
    if req.motion_source is None:
        raise ValueError("motion-controllable generation needs a motion source")
    n = len(req.audio)
    if n == 0:
        return _empty_result(model, world)
    source = req.motion_source.frames
    if source.shape[0] < n:
        raise ValueError(
            f"motion source ({source.shape[0]} frames) is shorter than the "
            f"audio ({n} frames)"
        )
    source = source[:n]
    audio = req.audio.features
    motions = []
    with torch.no_grad():
        for i, block in enumerate(model.posterior.blocks):
            gp = block(source[:, i, :], audio)
            if req.posterior_mean:
                eps = torch.zeros_like(gp.mu)
            else:
                eps = torch.randn(gp.mu.shape,
                                  generator=seeded_generator(req.seed,
                                                             "posterior", i),
                                  dtype=DTYPE)
            motions.append(sample_posterior(gp, eps))
        return _finish(model, world, req.reference, audio, motions)


def generate_audio_driven(model: TalkerModel, world: WorldParams,
                          req: GenerationRequest) -> GenerationResult:
    n = len(req.audio)
    if n == 0:
        return _empty_result(model, world)
    audio = req.audio.features
    motions = []
    with torch.no_grad():
        for i in range(model.config.n_edit_layers):
            motions.append(sample_prior(
                model.priors[i], model.flows[i], audio,
                req.reference.codes[i],
                generator=seeded_generator(req.seed, "prior", i),
            ))
        return _finish(model, world, req.reference, audio, motions)


def generate(model: TalkerModel, world: WorldParams,
             req: GenerationRequest) -> GenerationResult:
    if req.mode == "motion_controllable":
        return generate_motion_controllable(model, world, req)
    return generate_audio_driven(model, world, req)


# ---------------------------------------------------------------------------
# frame export


def frames_to_uint8(frames: Tensor) -> np.ndarray:
    """Raw render values -> displayable 8-bit RGB [N, S, S, 3]."""
    disp = to_display(frames)
    arr = (disp * 255.0).round().clamp(0, 255).to(torch.uint8)
    return arr.permute(0, 2, 3, 1).numpy()


def assemble_video(frames: Tensor, out_dir, fmt: str = "png") -> list[Path]:
    """Write one lossless 8-bit image per frame plus a manifest."""
    if fmt not in ("png", "ppm"):
        raise ValueError(f"unsupported format {fmt!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    arr = frames_to_uint8(frames) if frames.shape[0] else \
        np.zeros((0, 0, 0, 3), dtype=np.uint8)
    paths = []
    for i in range(arr.shape[0]):
        path = out_dir / f"frame_{i:05d}.{fmt}"
        if fmt == "png":
            from PIL import Image

            Image.fromarray(arr[i]).save(path)
        else:
            h, w = arr[i].shape[:2]
            with open(path, "wb") as fh:
                fh.write(f"P6\n{w} {h}\n255\n".encode())
                fh.write(arr[i].tobytes())
        paths.append(path)
    manifest = out_dir / "manifest.txt"
    manifest.write_text("".join(f"{p.name}\n" for p in paths))
    return paths


def read_frame(path) -> np.ndarray:
    """Read a frame written by assemble_video back as uint8 [S, S, 3]."""
    path = Path(path)
    if path.suffix == ".png":
        from PIL import Image

        return np.asarray(Image.open(path).convert("RGB"))
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise IOError(f"{path} is not a binary PPM")
        dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        fh.readline()  # maxval
        data = np.frombuffer(fh.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).copy()
