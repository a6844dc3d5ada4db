"""Evaluation metrics: image similarity, landmark distances, sync
confidence, and motion statistics, plus the oracle-based reconstruction
report used throughout acceptance testing.

The sync confidence score uses this package's own contrastive
discriminator, so absolute values are only comparable within one world;
ordinal comparisons (in-sync vs shifted, full model vs ablation) are the
meaningful reading.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import torch
from torch import Tensor
from torch.nn import functional as F

from .core import DTYPE, cosine_similarity
from .inference import GenerationRequest, generate
from .manipulation import gaussian_kernel1d
from .model import TalkerModel
from .sync import SyncEncoders
from .world import (
    SyntheticClip,
    WorldParams,
    factors_from_styles,
    landmarks_from_factors,
    to_display,
)

BLINK_LOW = 0.3
BLINK_HIGH = 0.7
LSE_C_MAX_OFFSET = 7


def ssim(x_hat: Tensor, x: Tensor, window: int = 7, sigma: float = 1.5) -> float:
    """Mean single-scale SSIM over frames and channels.

    Inputs are [N, 3, H, W] (or a single [3, H, W]) with pixel values in
    [0, 1]; local statistics use a Gaussian window and 'valid' support so no
    padding artifacts enter the average.
    """
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    if x_hat.ndim == 3:
        x_hat, x = x_hat.unsqueeze(0), x.unsqueeze(0)
    c1, c2 = 0.01**2, 0.03**2
    k1 = gaussian_kernel1d(window, sigma)
    kernel = (k1.reshape(-1, 1) @ k1.reshape(1, -1)).to(DTYPE)
    ch = x.shape[1]
    weight = kernel.reshape(1, 1, window, window).expand(ch, 1, window, window)

    def local(t):
        return F.conv2d(t, weight, groups=ch)

    mu_a, mu_b = local(x_hat), local(x)
    var_a = local(x_hat * x_hat) - mu_a * mu_a
    var_b = local(x * x) - mu_b * mu_b
    cov = local(x_hat * x) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def lmd(pred_landmarks: Tensor, gt_landmarks: Tensor,
        mouth_only: bool = False, mouth_indices: Tensor | None = None) -> float:
    """Mean Euclidean landmark distance over frames and selected points."""
    if pred_landmarks.shape != gt_landmarks.shape:
        raise ValueError(
            f"landmark shape mismatch {tuple(pred_landmarks.shape)} vs "
            f"{tuple(gt_landmarks.shape)}"
        )
    if mouth_only:
        if mouth_indices is None:
            raise ValueError("mouth_only needs mouth_indices")
        pred_landmarks = pred_landmarks[:, mouth_indices]
        gt_landmarks = gt_landmarks[:, mouth_indices]
    return float(
        torch.linalg.vector_norm(pred_landmarks - gt_landmarks, dim=-1).mean()
    )


def sync_confidences(encoders: SyncEncoders, frames: Tensor, audio_raw: Tensor,
                     half_win: int,
                     max_offset: int = LSE_C_MAX_OFFSET) -> Tensor:
    """Per-center confidence: in-sync similarity minus the median over a
    +-max_offset frame sweep.  Centers run over every position where the
    whole sweep stays in range."""
    n = frames.shape[0]
    lo = half_win + max_offset
    hi = n - 1 - half_win - max_offset
    if hi < lo:
        raise ValueError(
            f"video of {n} frames is too short for an offset sweep of "
            f"+-{max_offset}"
        )
    with torch.no_grad():
        # embed every admissible window/segment once
        all_centers = range(half_win, n - half_win)
        v_stack = torch.stack([frames[k - half_win : k + half_win + 1]
                               for k in all_centers])
        a_stack = torch.stack([audio_raw[k - half_win : k + half_win + 1]
                               for k in all_centers])
        v_emb = encoders.embed_video(v_stack)
        a_emb = encoders.embed_audio(a_stack)
        base = half_win  # index of center k in the stacks is k - half_win
        confs = []
        for k in range(lo, hi + 1):
            sims = torch.stack([
                cosine_similarity(v_emb[k - base], a_emb[k + o - base])
                for o in range(-max_offset, max_offset + 1)
            ])
            in_sync = sims[max_offset]
            confs.append(in_sync - sims.median())
    return torch.stack(confs)


def lse_c(encoders: SyncEncoders, frames: Tensor, audio_raw: Tensor,
          half_win: int, max_offset: int = LSE_C_MAX_OFFSET) -> float:
    """Sync confidence averaged over window centers, scaled by 1/tau."""
    confs = sync_confidences(encoders, frames, audio_raw, half_win, max_offset)
    return float(confs.mean() / float(encoders.tau))


def blink_count(eye: Tensor, low: float = BLINK_LOW, high: float = BLINK_HIGH) -> int:
    """Count dips below ``low`` with hysteresis (re-arm above ``high``)."""
    events, armed = 0, True
    for v in eye.tolist():
        if armed and v < low:
            events, armed = events + 1, False
        elif not armed and v > high:
            armed = True
    return events


def motion_stats(factor_mat: Tensor, id_dim: int,
                 frame_rate: float) -> tuple[float, float]:
    """(blink events per second, mean per-axis pose variance)."""
    pose = factor_mat[:, id_dim : id_dim + 3]
    eye = factor_mat[:, id_dim + 3]
    duration = factor_mat.shape[0] / frame_rate
    rate = blink_count(eye) / duration
    return rate, float(pose.var(dim=0, unbiased=False).mean())


def pearson(x: Tensor, y: Tensor) -> float:
    """Pearson correlation of two 1-D series."""
    x = x - x.mean()
    y = y - y.mean()
    denom = float(x.norm() * y.norm())
    if denom == 0:
        return 0.0
    return float((x * y).sum() / denom)


@dataclass
class EvalReport:
    ssim: float
    lmd: float
    lmd_m: float
    lse_c: float
    blink_rate: float
    pose_variance: float
    identity_error: float

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, float) or v != v:
                raise ValueError(f"{f.name} must be a finite float, got {v!r}")

    CSV_HEADER = "ssim,lmd,lmd_m,lse_c,blink_rate,pose_variance,identity_error"

    def to_text(self) -> str:
        lines = ["# evaluation report"]
        for f in fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name):.6f}")
        return "\n".join(lines) + "\n"

    def csv_row(self) -> str:
        return ",".join(f"{getattr(self, f.name):.6f}" for f in fields(self))

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def mean_report(reports: list[EvalReport]) -> EvalReport:
    if not reports:
        raise ValueError("no reports to average")
    values = {
        f.name: sum(getattr(r, f.name) for r in reports) / len(reports)
        for f in fields(EvalReport)
    }
    return EvalReport(**values)


def report_for_result(world: WorldParams, sync_encoders: SyncEncoders | None,
                      result, gt_clip: SyntheticClip) -> EvalReport:
    """Score a generation against an aligned ground-truth clip."""
    cfg = world.config
    n = result.styles.shape[0]
    if n != len(gt_clip):
        raise ValueError(
            f"generated sequence ({n} frames) and ground truth "
            f"({len(gt_clip)} frames) are not aligned"
        )
    gt_factors = gt_clip.factor_matrix
    gen_factors, _ = factors_from_styles(world, result.styles)
    identity_error = float(
        ((gen_factors[:, : cfg.id_dim] - gt_factors[:, : cfg.id_dim]) ** 2)
        .mean().sqrt()
    )
    gen_landmarks = landmarks_from_factors(world, gen_factors)
    rate, pose_var = motion_stats(gen_factors, cfg.id_dim, cfg.frame_rate)
    return EvalReport(
        ssim=ssim(to_display(result.frames), to_display(gt_clip.frames)),
        lmd=lmd(gen_landmarks, gt_clip.landmarks),
        lmd_m=lmd(gen_landmarks, gt_clip.landmarks, mouth_only=True,
                  mouth_indices=world.mouth_indices),
        lse_c=(lse_c(sync_encoders, result.frames, gt_clip.audio_raw,
                     cfg.sync_half_win)
               if sync_encoders is not None else 0.0),
        blink_rate=rate,
        pose_variance=pose_var,
        identity_error=identity_error,
    )


def evaluate_reconstruction(model: TalkerModel, world: WorldParams,
                            sync_encoders: SyncEncoders | None,
                            clip: SyntheticClip, seed: int = 0,
                            posterior_mean: bool = False):
    """Motion-controllable reconstruction of a clip from its own first frame,
    scored against the ground truth.  Returns (EvalReport, aux dict)."""
    cfg = world.config
    with torch.no_grad():
        audio = model.encode_audio(clip.audio_raw)
    from .core import AudioFeatureSequence, StylePlus

    req = GenerationRequest(
        reference=StylePlus(clip.styles.frames[0]),
        audio=AudioFeatureSequence(audio),
        mode="motion_controllable",
        motion_source=clip.styles,
        seed=seed,
        posterior_mean=posterior_mean,
    )
    result = generate(model, world, req)
    gt_factors = clip.factor_matrix
    gen_factors, residual = factors_from_styles(world, result.styles)
    per_dim_rmse = ((gen_factors - gt_factors) ** 2).mean(dim=0).sqrt()
    report = report_for_result(world, sync_encoders, result, clip)
    aux = {
        "factor_rmse": per_dim_rmse,
        "residual_max": float(residual.max()),
        "gen_factors": gen_factors,
        "result": result,
    }
    return report, aux
