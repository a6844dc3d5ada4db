"""Windowed training loop: losses, optimization, and checkpointing.

A training step runs the whole pipeline on a clip batch: encode audio,
infer per-layer motion posteriors, sample latents, assemble the output
style sequence, render one randomly placed window per clip, and combine
reconstruction, perceptual, KL, and sync losses.  Every random draw is
derived from (seed, step), so interrupted and resumed runs are bit-equal
to uninterrupted ones.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F

from .config import ModelConfig, TrainConfig
from .core import DTYPE, cosine_similarity, seed_from, seeded_generator
from .model import TalkerModel, build_model
from .posterior import posterior_log_prob, sample_posterior
from .prior_flow import kl_loss as flow_kl_loss
from .sync import SyncEncoders
from .tensorio import load_bundle, save_bundle
from .world import WorldParams, render_sequence

METRIC_COLUMNS = ("step", "loss_total", "loss_l2", "loss_lpips",
                  "loss_kl", "loss_sync")


class TrainingError(RuntimeError):
    pass


class PerceptualExtractor(nn.Module):
    """Frozen random conv features at three resolutions (full, 1/2, 1/4).

    When given calibration frames, each scale's output is rescaled to unit
    standard deviation so perceptual distances land on an O(1) scale that
    the fixed loss weights were chosen for.
    """

    N_SCALES = 3

    def __init__(self, seed: int, channels: int = 8,
                 calibration: Tensor | None = None):
        super().__init__()
        stems = []
        gen = seeded_generator(seed, "perceptual")
        for _ in range(self.N_SCALES):
            stem = nn.Sequential(
                nn.Conv2d(3, channels, 3, padding=1),
                nn.LeakyReLU(0.2),
                nn.Conv2d(channels, channels, 3, padding=1),
            )
            stem.to(DTYPE)
            with torch.no_grad():
                for p in stem.parameters():
                    p.copy_(0.5 * torch.randn(p.shape, generator=gen, dtype=DTYPE))
            stems.append(stem)
        self.stems = nn.ModuleList(stems)
        if calibration is not None:
            with torch.no_grad():
                x = calibration
                for stem in self.stems:
                    std = stem(x).std().clamp_min(1e-6)
                    stem[2].weight /= std
                    stem[2].bias /= std
                    x = F.avg_pool2d(x, 2)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x: Tensor) -> list[Tensor]:
        feats = []
        for stem in self.stems:
            feats.append(stem(x))
            x = F.avg_pool2d(x, 2)
        return feats


def loss_l2(x_hat: Tensor, x: Tensor) -> Tensor:
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    return F.mse_loss(x_hat, x)


def loss_lpips(perceptual: PerceptualExtractor, x_hat: Tensor, x: Tensor) -> Tensor:
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    total = x_hat.new_zeros(())
    for fa, fb in zip(perceptual(x_hat), perceptual(x)):
        total = total + F.mse_loss(fa, fb)
    return total


def loss_sync(encoders: SyncEncoders, frames: Tensor, audio_raw: Tensor) -> Tensor:
    """1 - cos over a window batch; gradients reach the frames only."""
    v = encoders.embed_video(frames)
    a = encoders.embed_audio(audio_raw)
    return (1.0 - cosine_similarity(v, a)).mean()


def total_loss(lpips: Tensor, l2: Tensor, kl: Tensor, sync: Tensor,
               lambda_l2: float, lambda_kl: float, lambda_sync: float) -> Tensor:
    for name, value in (("lpips", lpips), ("l2", l2), ("kl", kl), ("sync", sync)):
        if not torch.isfinite(value):
            raise TrainingError(f"non-finite {name} loss component: {value}")
    return lpips + lambda_l2 * l2 + lambda_kl * kl + lambda_sync * sync


def generate_window(world: WorldParams, styles: Tensor, t: int,
                    window_len: int | None = None) -> Tensor:
    """Render frames t .. t+T_w-1 of a style sequence [N, L, D]."""
    t_w = window_len if window_len is not None else world.config.window_len
    n = styles.shape[0]
    if t < 0 or t + t_w > n:
        raise IndexError(
            f"window [{t}, {t + t_w}) out of range for {n} frames"
        )
    return render_sequence(world, styles[t : t + t_w])


def collate_clips(clips) -> dict[str, Tensor]:
    return {
        "styles": torch.stack([c.styles.frames for c in clips]),
        "frames": torch.stack([c.frames for c in clips]),
        "audio_raw": torch.stack([c.audio_raw for c in clips]),
    }


def _gather_windows(x: Tensor, offsets: Tensor, length: int) -> Tensor:
    return torch.stack([x[b, o : o + length] for b, o in enumerate(offsets.tolist())])


class Trainer:
    def __init__(self, world: WorldParams, clips, model_config: ModelConfig,
                 train_config: TrainConfig, sync_encoders: SyncEncoders | None = None,
                 model: TalkerModel | None = None):
        if train_config.use_sync_loss:
            if sync_encoders is None:
                raise TrainingError(
                    "training with the sync loss requires frozen sync encoders "
                    "(disable with use_sync_loss=False)"
                )
            if not sync_encoders.frozen:
                raise TrainingError("sync encoders must be frozen before training")
        self.world = world
        self.config = model_config
        self.train_config = train_config
        self.sync_encoders = sync_encoders
        self.model = model if model is not None else build_model(
            model_config, train_config.seed
        )
        # calibrate the perceptual scale on canonical world frames so the
        # extractor is identical across runs and resumes on the same world
        from .world import sample_clip

        probe = sample_clip(world, 32,
                            seed_from(world.seed, "perceptual-probe"))
        self.perceptual = PerceptualExtractor(
            seed_from(model_config.seed, "perceptual"),
            calibration=probe.frames,
        )
        self.data = collate_clips(clips)
        self.n_clips = self.data["styles"].shape[0]
        self.steps_per_epoch = max(1, self.n_clips // train_config.batch_size)
        self.total_steps = train_config.epochs * self.steps_per_epoch
        self.optimizer = torch.optim.Adam(
            self.model.parameters(),
            lr=train_config.learning_rate,
            betas=(train_config.adam_beta1, train_config.adam_beta2),
            eps=train_config.adam_eps,
        )
        self.step = 0
        self.history: list[dict] = []
        self.last_checkpoint: str | None = None

    # -- data order ---------------------------------------------------------

    def _batch_indices(self, step: int) -> Tensor:
        epoch, i = divmod(step, self.steps_per_epoch)
        perm = torch.randperm(
            self.n_clips,
            generator=seeded_generator(self.train_config.seed, "epoch", epoch),
        )
        bs = self.train_config.batch_size
        idx = perm[(i * bs) % self.n_clips :][:bs]
        if idx.numel() < bs:  # wrap for corpora smaller than a batch
            idx = torch.cat([idx, perm[: bs - idx.numel()]])
        return idx

    def _kl_weight(self, step: int) -> float:
        lam = self.train_config.lambda_kl
        if not self.train_config.use_kl_warmup:
            return lam
        ramp_steps = max(1, int(self.train_config.kl_warmup_frac * self.total_steps))
        return lam * min(1.0, (step + 1) / ramp_steps)

    # -- the step -----------------------------------------------------------

    def train_step(self, step: int) -> dict:
        cfg, tc = self.config, self.train_config
        gen = seeded_generator(tc.seed, "step", step)
        idx = self._batch_indices(step)
        styles = self.data["styles"][idx]
        frames = self.data["frames"][idx]
        audio_raw = self.data["audio_raw"][idx]
        b, n = styles.shape[0], styles.shape[1]

        audio = self.model.encode_audio(audio_raw)
        gps = self.model.posterior(styles, audio)
        eps = torch.randn(cfg.n_edit_layers, b, n, cfg.motion_dim,
                          generator=gen, dtype=DTYPE)
        motions = [sample_posterior(gp, eps[i]) for i, gp in enumerate(gps)]

        if not self.model.flows_initialized:
            for i, flow in enumerate(self.model.flows):
                flow.data_init(motions[i].detach(), audio.detach())

        kl_terms = []
        for i in range(cfg.n_edit_layers):
            w0 = styles[:, 0, i, :]
            kl_terms.append(flow_kl_loss(gps[i], motions[i], self.model.priors[i],
                                         self.model.flows[i], audio, w0))
        kl = torch.stack(kl_terms).mean() / n

        w_ref = styles[:, 0]
        w_hat = self.model.manipulate(w_ref, audio, motions)

        offsets = torch.randint(0, n - cfg.window_len + 1, (b,), generator=gen)
        hat_windows = _gather_windows(w_hat, offsets, cfg.window_len)
        x_hat = render_sequence(
            self.world, hat_windows.reshape(b * cfg.window_len, *w_hat.shape[2:])
        ).reshape(b, cfg.window_len, 3, cfg.image_size, cfg.image_size)
        x_gt = _gather_windows(frames, offsets, cfg.window_len)

        l2 = loss_l2(x_hat, x_gt)
        lpips = loss_lpips(self.perceptual,
                           x_hat.reshape(-1, *x_hat.shape[2:]),
                           x_gt.reshape(-1, *x_gt.shape[2:]))

        if tc.use_sync_loss:
            hw = cfg.sync_half_win
            centers = torch.randint(hw, cfg.window_len - hw, (b,), generator=gen)
            v_hat = torch.stack([
                x_hat[i, c - hw : c + hw + 1]
                for i, c in enumerate(centers.tolist())
            ])
            seg = torch.stack([
                audio_raw[i, o + c - hw : o + c + hw + 1]
                for i, (o, c) in enumerate(zip(offsets.tolist(), centers.tolist()))
            ])
            sync = loss_sync(self.sync_encoders, v_hat, seg)
        else:
            sync = torch.zeros((), dtype=DTYPE)

        lam_kl = self._kl_weight(step)
        try:
            total = total_loss(lpips, l2, kl, sync,
                               tc.lambda_l2, lam_kl, tc.lambda_sync)
        except TrainingError as exc:
            raise TrainingError(
                f"{exc} at step {step}; last good checkpoint: "
                f"{self.last_checkpoint or 'none'}"
            ) from exc

        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()

        return {
            "step": step,
            "loss_total": float(total.detach()),
            "loss_l2": float(l2.detach()),
            "loss_lpips": float(lpips.detach()),
            "loss_kl": float(kl.detach()),
            "loss_sync": float(sync.detach()),
        }

    def run(self, until: int | None = None, log_every: int = 0,
            metrics_path=None) -> list[dict]:
        stop = self.total_steps if until is None else min(until, self.total_steps)
        fh = None
        if metrics_path is not None:
            path = Path(metrics_path)
            new_file = not path.exists() or self.step == 0
            fh = open(path, "w" if new_file else "a")
            if new_file:
                fh.write(",".join(METRIC_COLUMNS) + "\n")
        try:
            while self.step < stop:
                metrics = self.train_step(self.step)
                self.history.append(metrics)
                self.step += 1
                if fh is not None:
                    fh.write(",".join(str(metrics[c]) for c in METRIC_COLUMNS) + "\n")
                if log_every and self.step % log_every == 0:
                    print(f"step {self.step}/{self.total_steps} "
                          f"total {metrics['loss_total']:.5f} "
                          f"l2 {metrics['loss_l2']:.5f} kl {metrics['loss_kl']:.4f} "
                          f"sync {metrics['loss_sync']:.4f}")
        finally:
            if fh is not None:
                fh.close()
        return self.history

    # -- checkpointing ------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(self.model, self.optimizer, self.step, self.config,
                        self.train_config, path)
        self.last_checkpoint = str(path)

    @classmethod
    def load(cls, path, world: WorldParams, clips,
             sync_encoders: SyncEncoders | None = None) -> "Trainer":
        model, opt_entries, step, model_config, train_config = load_checkpoint(path)
        trainer = cls(world, clips, model_config, train_config,
                      sync_encoders=sync_encoders, model=model)
        # keep the freshly built groups (hyperparameters come from the train
        # config); only the per-parameter state is restored
        state_dict = trainer.optimizer.state_dict()
        state_dict["state"] = opt_entries
        trainer.optimizer.load_state_dict(state_dict)
        trainer.step = step
        trainer.last_checkpoint = str(path)
        return trainer


def save_checkpoint(model: TalkerModel, optimizer, step: int,
                    model_config: ModelConfig, train_config: TrainConfig,
                    path) -> None:
    tensors: dict[str, np.ndarray] = {}
    for name, value in model.state_dict().items():
        tensors[f"model.{name}"] = value.detach().numpy()
    opt_state = optimizer.state_dict()
    for pid, st in opt_state["state"].items():
        for key, value in st.items():
            arr = value.detach().numpy() if torch.is_tensor(value) \
                else np.asarray(value, dtype=np.float64)
            tensors[f"optim.{pid}.{key}"] = arr
    meta = {
        "kind": "model",
        "config_hash": model_config.content_hash(),
        "config_text": model_config.to_text(),
        "train_config_text": train_config.to_text(),
        "step": step,
        "n_params": len(opt_state["param_groups"][0]["params"]),
    }
    save_bundle(path, meta, tensors)


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    meta, tensors = load_bundle(path)
    if meta.get("kind") != "model":
        raise IOError(f"{path} is not a model checkpoint")
    model_config = ModelConfig.from_text(meta["config_text"])
    if expected_config is not None and \
            expected_config.content_hash() != meta["config_hash"]:
        raise IOError(
            "config mismatch: checkpoint was written with a different model "
            "configuration"
        )
    train_config = TrainConfig.from_text(meta["train_config_text"])
    model = TalkerModel(model_config)
    state = {}
    template = model.state_dict()
    for name, target in template.items():
        arr = tensors[f"model.{name}"]
        state[name] = torch.from_numpy(arr).to(target.dtype).reshape(target.shape)
    model.load_state_dict(state)

    opt_entries: dict[int, dict] = {}
    for key, arr in tensors.items():
        if not key.startswith("optim."):
            continue
        _, pid, field = key.split(".", 2)
        entry = opt_entries.setdefault(int(pid), {})
        if field == "step":
            entry[field] = torch.tensor(float(arr), dtype=torch.float32)
        else:
            entry[field] = torch.from_numpy(arr).to(DTYPE)
    return model, opt_entries, int(meta["step"]), model_config, train_config


def train_model(world: WorldParams, clips, model_config: ModelConfig,
                train_config: TrainConfig,
                sync_encoders: SyncEncoders | None = None,
                metrics_path=None, log_every: int = 0) -> tuple[TalkerModel, list]:
    """Convenience wrapper: build, train to completion, return the model."""
    trainer = Trainer(world, clips, model_config, train_config, sync_encoders)
    history = trainer.run(metrics_path=metrics_path, log_every=log_every)
    return trainer.model, history
