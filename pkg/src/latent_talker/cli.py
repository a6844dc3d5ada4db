"""Command-line surface for the pipeline.

Subcommands mirror the pipeline stages: synthesize data, pretrain the sync
discriminator, train the model, generate videos, evaluate, and run the
component ablations.  Every run writes a ``run.txt`` into the output
directory capturing the resolved configs, seeds, and a content hash of the
inputs, with no timestamps, so identical invocations are byte-identical.

Exit codes: 0 success, 1 usage error, 2 runtime failure.  The environment
variable ``LATENT_TALKER_SEED`` overrides ``--seed``, which overrides the
config file.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from pathlib import Path

import torch

from .config import ModelConfig, TrainConfig
from .core import AudioFeatureSequence, StylePlus, seed_from
from .inference import GenerationRequest, assemble_video, generate
from .metrics import (
    EvalReport,
    evaluate_reconstruction,
    lse_c,
    mean_report,
    motion_stats,
    report_for_result,
)
from .sync import load_sync_checkpoint, pretrain_sync, save_sync_checkpoint
from .training import Trainer, load_checkpoint
from .world import (
    build_world,
    clip_dir_name,
    factors_from_styles,
    load_clip,
    load_dataset,
    sample_clip,
    save_dataset,
)

ENV_SEED = "LATENT_TALKER_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="latent-talker", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None,
                       help="model config file (key = value lines)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("make-data", help="synthesize a clip dataset")
    common(p)
    p.add_argument("--clips", type=int, default=200)
    p.add_argument("--frames", type=int, default=None,
                   help="frames per clip (default: config seq_len)")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel clip-generation workers")

    p = sub.add_parser("pretrain-sync", help="train + freeze the sync scorer")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)

    p = sub.add_parser("train", help="train the manipulation model")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--sync", type=Path, default=None,
                   help="frozen sync checkpoint (required unless --no-sync-loss)")
    p.add_argument("--no-sync-loss", action="store_true")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=None,
                   help="default: config learning_rate")
    p.add_argument("--no-kl-warmup", action="store_true")
    p.add_argument("--holdout", type=int, default=0,
                   help="exclude the last N clips from training")

    p = sub.add_parser("generate", help="generate a video from a reference")
    common(p)
    p.add_argument("--mode", choices=("audio-driven", "motion-controllable"),
                   required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--ref", type=Path, required=True,
                   help="clip directory providing the reference frame")
    p.add_argument("--audio", type=Path, required=True,
                   help="clip directory providing the audio track")
    p.add_argument("--motion", type=Path, default=None,
                   help="clip directory driving the motion (motion-controllable)")
    p.add_argument("--gt", type=Path, default=None,
                   help="ground-truth clip directory; writes report.txt")
    p.add_argument("--sync", type=Path, default=None,
                   help="sync checkpoint for the report's confidence score")
    p.add_argument("--posterior-mean", action="store_true")
    p.add_argument("--format", choices=("png", "ppm"), default="png")

    p = sub.add_parser("evaluate", help="reconstruction metrics on a dataset")
    common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--sync", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--clips", type=int, default=None,
                   help="evaluate only the last N clips")

    p = sub.add_parser("ablate", help="train an ablated variant and compare")
    common(p)
    p.add_argument("--variant", choices=("no-flow", "no-sync"), required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--sync", type=Path, required=True)
    p.add_argument("--baseline", type=Path, default=None,
                   help="trained full-model checkpoint (trained here if absent)")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--eval-clips", type=int, default=8)
    p.add_argument("--eval-frames", type=int, default=300)
    return parser


# ---------------------------------------------------------------------------
# run records


def _hash_paths(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files = sorted(q for q in p.rglob("*") if q.is_file())
        elif p.exists():
            files = [p]
        else:
            continue
        for f in files:
            h.update(str(f.relative_to(p if p.is_dir() else p.parent)).encode())
            h.update(f.read_bytes())
    return h.hexdigest()[:16]


def _resolve_seed(args, config: ModelConfig) -> tuple[int, str]:
    env = os.environ.get(ENV_SEED)
    if env is not None:
        try:
            return int(env), "env"
        except ValueError as exc:
            raise UsageError(f"{ENV_SEED} must be an integer, got {env!r}") from exc
    if args.seed is not None:
        return args.seed, "flag"
    return config.seed, "config"


def _write_run_record(out_dir: Path, args, config: ModelConfig, seed: int,
                      seed_source: str, input_paths,
                      train_config: TrainConfig | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [
        "# run record",
        f"command = {args.command}",
        f"argv = {' '.join(sys.argv[1:]) if sys.argv[1:] else '(api)'}",
        f"seed = {seed}",
        f"seed_source = {seed_source}",
        f"input_hash = {_hash_paths(input_paths)}",
        "",
        config.to_text().rstrip(),
    ]
    if train_config is not None:
        lines += ["", train_config.to_text().rstrip()]
    (out_dir / "run.txt").write_text("\n".join(lines) + "\n")


def _load_config(args) -> ModelConfig:
    if args.config is not None:
        return ModelConfig.load(args.config)
    return ModelConfig()


def _world_for_clip_dir(clip_dir: Path):
    """Rebuild the world that produced a clip directory from its dataset root."""
    root = clip_dir.parent
    from .world import read_manifest

    config = ModelConfig.load(root / "config.txt")
    world_seed, _ = read_manifest(root)
    return build_world(config, world_seed)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_make_data(args) -> int:
    config = _load_config(args)
    seed, source = _resolve_seed(args, config)
    frames = args.frames if args.frames is not None else config.seq_len
    world = build_world(config, seed)
    clip_seeds = [seed_from(seed, "clip", i) for i in range(args.clips)]
    if args.workers > 1:
        import multiprocessing as mp

        with mp.Pool(args.workers, initializer=torch.set_num_threads,
                     initargs=(1,)) as pool:
            clips = pool.starmap(
                sample_clip, [(world, frames, s) for s in clip_seeds]
            )
    else:
        clips = [sample_clip(world, frames, s) for s in clip_seeds]
    save_dataset(world, clips, args.out)
    _write_run_record(args.out, args, config, seed, source,
                      [args.config] if args.config else [])
    print(f"wrote {len(clips)} clips of {frames} frames to {args.out}")
    return 0


def _cmd_pretrain_sync(args) -> int:
    world, clips = load_dataset(args.data)
    config = world.config
    seed, source = _resolve_seed(args, config)
    encoders, history = pretrain_sync(
        clips, config, steps=args.steps, batch_size=args.batch_size,
        learning_rate=args.lr, seed=seed,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt = args.out / "sync.ckpt"
    save_sync_checkpoint(encoders, ckpt)
    _write_run_record(args.out, args, config, seed, source, [args.data])
    print(f"sync encoders frozen after {len(history)} steps "
          f"(final loss {history[-1]:.4f}) -> {ckpt}")
    return 0


def _cmd_train(args) -> int:
    world, clips = load_dataset(args.data)
    config = world.config
    seed, source = _resolve_seed(args, config)
    if args.holdout:
        clips = clips[: -args.holdout]
    sync_encoders = None
    if not args.no_sync_loss:
        if args.sync is None:
            raise UsageError(
                "train requires --sync with a frozen checkpoint, or "
                "--no-sync-loss to drop the sync term"
            )
        sync_encoders = load_sync_checkpoint(args.sync, config)
        if not sync_encoders.frozen:
            raise RuntimeError("sync checkpoint is not frozen; refusing to train")
    train_config = TrainConfig(
        batch_size=args.batch_size,
        epochs=args.epochs,
        learning_rate=args.lr if args.lr is not None else config.learning_rate,
        lambda_l2=config.lambda_l2,
        lambda_kl=config.lambda_kl,
        lambda_spare=config.lambda_spare,
        lambda_sync=config.lambda_sync,
        use_kl_warmup=not args.no_kl_warmup,
        use_sync_loss=not args.no_sync_loss,
        seed=seed,
    )
    args.out.mkdir(parents=True, exist_ok=True)
    _write_run_record(args.out, args, config, seed, source,
                      [args.data] + ([args.sync] if args.sync else []),
                      train_config)
    trainer = Trainer(world, clips, config, train_config,
                      sync_encoders=sync_encoders)
    trainer.run(metrics_path=args.out / "metrics.csv")
    ckpt = args.out / "model.ckpt"
    trainer.save(ckpt)
    final = trainer.history[-1]
    print(f"trained {trainer.step} steps; final loss "
          f"{final['loss_total']:.5f} -> {ckpt}")
    return 0


def _load_model_for_world(path, world):
    model, _, _, model_config, _ = load_checkpoint(
        path, expected_config=world.config
    )
    model.eval()
    return model


def _cmd_generate(args) -> int:
    world = _world_for_clip_dir(args.ref)
    config = world.config
    seed, source = _resolve_seed(args, config)
    model = _load_model_for_world(args.model, world)
    ref_clip = load_clip(args.ref, world)
    audio_clip = load_clip(args.audio, world)
    with torch.no_grad():
        audio = AudioFeatureSequence(model.encode_audio(audio_clip.audio_raw))
    mode = args.mode.replace("-", "_")
    motion_source = None
    if mode == "motion_controllable":
        if args.motion is None:
            raise UsageError("motion-controllable generation requires --motion")
        motion_source = load_clip(args.motion, world).styles
    req = GenerationRequest(
        reference=StylePlus(ref_clip.styles.frames[0]),
        audio=audio,
        mode=mode,
        motion_source=motion_source,
        seed=seed,
        posterior_mean=args.posterior_mean,
    )
    result = generate(model, world, req)
    inputs = [args.model, args.ref, args.audio]
    if args.motion:
        inputs.append(args.motion)
    _write_run_record(args.out, args, config, seed, source, inputs)
    assemble_video(result.frames, args.out, fmt=args.format)
    save_clip_styles = args.out / "styles.bin"
    from .tensorio import save_array

    save_array(save_clip_styles, result.styles.numpy(), dtype="f32")
    if args.gt is not None:
        gt_clip = load_clip(args.gt, world)
        sync_encoders = (load_sync_checkpoint(args.sync, config)
                         if args.sync else None)
        report = report_for_result(world, sync_encoders, result, gt_clip)
        report.save(args.out / "report.txt")
        print(report.to_text().rstrip())
    print(f"wrote {len(result)} frames to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    world, clips = load_dataset(args.data)
    config = world.config
    seed, source = _resolve_seed(args, config)
    model = _load_model_for_world(args.model, world)
    sync_encoders = load_sync_checkpoint(args.sync, config)
    if args.clips is not None:
        clips = clips[-args.clips:]
    reports = []
    rows = ["clip," + EvalReport.CSV_HEADER]
    for i, clip in enumerate(clips):
        report, _ = evaluate_reconstruction(model, world, sync_encoders, clip,
                                            seed=seed_from(seed, "eval", i))
        reports.append(report)
        rows.append(f"{clip_dir_name(i)},{report.csv_row()}")
    mean = mean_report(reports)
    _write_run_record(args.out, args, config, seed, source,
                      [args.data, args.model, args.sync])
    mean.save(args.out / "report.txt")
    (args.out / "report.csv").write_text("\n".join(rows) + "\n")
    print(mean.to_text().rstrip())
    return 0


def _audio_driven_stats(model, world, sync_encoders, eval_clips, seed):
    cfg = world.config
    rates, pose_vars, confidences = [], [], []
    for i, clip in enumerate(eval_clips):
        with torch.no_grad():
            audio = AudioFeatureSequence(model.encode_audio(clip.audio_raw))
        req = GenerationRequest(
            reference=StylePlus(clip.styles.frames[0]),
            audio=audio,
            mode="audio_driven",
            seed=seed_from(seed, "ablate-gen", i),
        )
        result = generate(model, world, req)
        factors, _ = factors_from_styles(world, result.styles)
        rate, pose_var = motion_stats(factors, cfg.id_dim, cfg.frame_rate)
        rates.append(rate)
        pose_vars.append(pose_var)
        confidences.append(lse_c(sync_encoders, result.frames, clip.audio_raw,
                                 cfg.sync_half_win))
    n = len(eval_clips)
    return sum(rates) / n, sum(pose_vars) / n, sum(confidences) / n


def _cmd_ablate(args) -> int:
    world, clips = load_dataset(args.data)
    config = world.config
    seed, source = _resolve_seed(args, config)
    sync_encoders = load_sync_checkpoint(args.sync, config)

    def train_variant(variant_config, train_config):
        trainer = Trainer(world, clips, variant_config, train_config,
                          sync_encoders=(sync_encoders if
                                         train_config.use_sync_loss else None))
        trainer.run()
        return trainer

    lr = args.lr if args.lr is not None else config.learning_rate
    base_tc = TrainConfig(batch_size=args.batch_size, epochs=args.epochs,
                          learning_rate=lr, seed=seed)
    if args.variant == "no-flow":
        variant_config = config.with_overrides(flow_steps=0)
        variant_tc = base_tc
    else:
        variant_config = config
        variant_tc = TrainConfig(batch_size=args.batch_size, epochs=args.epochs,
                                 learning_rate=lr, seed=seed,
                                 use_sync_loss=False)

    args.out.mkdir(parents=True, exist_ok=True)
    _write_run_record(args.out, args, config, seed, source,
                      [args.data, args.sync] +
                      ([args.baseline] if args.baseline else []))

    if args.baseline is not None:
        baseline_model = _load_model_for_world(args.baseline, world)
    else:
        baseline_trainer = train_variant(config, base_tc)
        baseline_trainer.save(args.out / "baseline.ckpt")
        baseline_model = baseline_trainer.model

    variant_trainer = train_variant(variant_config, variant_tc)
    variant_trainer.save(args.out / f"{args.variant}.ckpt")

    eval_clips = [
        sample_clip(world, args.eval_frames, seed_from(seed, "ablate-clip", i))
        for i in range(args.eval_clips)
    ]
    rows = ["variant,lse_c,blink_rate,pose_variance"]
    results = {}
    for name, model in (("full", baseline_model),
                        (args.variant, variant_trainer.model)):
        rate, pose_var, conf = _audio_driven_stats(model, world, sync_encoders,
                                                   eval_clips, seed)
        results[name] = (conf, rate, pose_var)
        rows.append(f"{name},{conf:.6f},{rate:.6f},{pose_var:.6f}")
    (args.out / "comparison.csv").write_text("\n".join(rows) + "\n")
    print("\n".join(rows))
    return 0


_COMMANDS = {
    "make-data": _cmd_make_data,
    "pretrain-sync": _cmd_pretrain_sync,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "evaluate": _cmd_evaluate,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    torch.set_num_threads(1)
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
