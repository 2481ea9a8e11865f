"""Command-line entry point.

Subcommands: ``gen-data``, ``train``, ``sample``, ``distill``, ``eval``,
``inspect``. Every run writes a reproducibility manifest (resolved
config, seeds, version) next to its outputs; re-running with that
manifest as ``--config`` reproduces the artifacts bit for bit in
single-threaded mode.

Exit codes: 0 success, 2 configuration/input error, 3 numeric failure.

BLAS thread counts must be pinned before numpy is first imported, so
this module imports the numeric stack lazily inside :func:`main`.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

_THREAD_VARS = (
    "OPENBLAS_NUM_THREADS",
    "OMP_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _pin_threads(argv):
    threads = "1"
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    for var in _THREAD_VARS:
        os.environ.setdefault(var, threads)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tryonlab",
        description="Desk-scale video try-on diffusion: data, training, sampling, distillation, eval.",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS/OpenMP thread count (default 1 for bit-reproducibility)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic try-on dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--n", type=int, help="total sample count (overrides the train/test split)")

    p = sub.add_parser("train", help="fit the teacher with the mask-aware loss")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--iterations", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("sample", help="render try-on frames from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--index", type=int, default=0, help="test-split sample index")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--student", action="store_true", help="few-step student sampling")

    p = sub.add_parser("distill", help="distill a trained teacher into a 4-step student")
    p.add_argument("--checkpoint", required=True, help="teacher checkpoint prefix")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--cache", help="reuse an existing trajectory cache directory")

    p = sub.add_parser("eval", help="metric report over the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--config")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--student", action="store_true")

    p = sub.add_parser("inspect", help="print a tensor container header")
    p.add_argument("path")
    return parser


def _load_config(path):
    from .config import RunConfig, config_from_dict, load_config

    if path is None:
        return RunConfig()
    raw = json.loads(Path(path).read_text()) if str(path).endswith(".json") else None
    if isinstance(raw, dict) and "config" in raw and "command" in raw:
        return config_from_dict(raw["config"])  # a run manifest
    return load_config(path)


def _write_manifest(out_dir, cfg, argv, extra=None):
    from . import __version__

    manifest = {"command": list(argv), "config": cfg.to_dict(), "version": __version__}
    if extra:
        manifest.update(extra)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def _generator_config(cfg):
    from .data import GeneratorConfig

    return GeneratorConfig(
        frames=cfg.data.frames,
        image_size=cfg.data.image_size,
        vae_factor=cfg.data.vae_factor,
        pattern_cell=cfg.data.pattern_cell,
        occluder_probability=cfg.data.occluder_probability,
    )


def _model_dims(cfg):
    from .model import ModelDims

    return ModelDims(
        channels=cfg.model.channels,
        heads=cfg.model.heads,
        head_dim=cfg.model.head_dim,
        blocks=cfg.model.blocks,
        latent_channels=cfg.model.latent_channels,
        ffn_ratio=cfg.model.ffn_ratio,
        adapter_rank=cfg.model.adapter_rank,
        rope_base=cfg.model.rope_base,
    )


def _load_encoded(data_dir, cfg, split):
    from .data import load_manifest, load_sample, split_entries
    from .model import encode_sample
    from .conditioning import ToyVaeParams

    manifest = load_manifest(data_dir)
    vae = ToyVaeParams.create(
        factor=manifest["config"]["vae_factor"], latent_channels=cfg.model.latent_channels
    )
    entries = split_entries(manifest, split)
    if not entries and split == "test":
        entries = split_entries(manifest, "train")
    return [
        encode_sample(load_sample(data_dir, e), vae, cfg.model.channels) for e in entries
    ]


def _save_frames(video, out_dir):
    from PIL import Image
    import numpy as np

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for f in range(video.shape[0]):
        arr = np.clip(np.round(video[f] * 255.0), 0, 255).astype(np.uint8)
        path = out_dir / f"frame_{f:03d}.png"
        Image.fromarray(arr).save(path)
        paths.append(path)
    return paths


def cmd_gen_data(args, argv) -> int:
    from .data import write_dataset

    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.data.seed = args.seed
    n_train, n_test = cfg.data.n_train, cfg.data.n_test
    if args.n is not None:
        n_train, n_test = args.n, 0
    write_dataset(args.out, _generator_config(cfg), n_train, n_test, cfg.data.seed)
    _write_manifest(args.out, cfg, argv, {"n_train": n_train, "n_test": n_test})
    print(f"wrote {n_train + n_test} samples to {args.out}")
    return 0


def cmd_train(args, argv) -> int:
    from .diffusion import make_schedule
    from .model import TryOnModel, save_checkpoint
    from .train import train_teacher, write_loss_log

    cfg = _load_config(args.config)
    if args.iterations is not None:
        cfg.train.iterations = args.iterations
    if args.lr is not None:
        cfg.train.lr = args.lr
    if args.seed is not None:
        cfg.train.seed = args.seed

    encoded = _load_encoded(args.data, cfg, "train")
    schedule = make_schedule(cfg.schedule_steps)
    model = TryOnModel.create(_model_dims(cfg), cfg.model.init_seed, cfg.data.vae_factor)
    records = train_teacher(
        model, encoded, schedule,
        iterations=cfg.train.iterations, lr=cfg.train.lr,
        seed=cfg.train.seed, batch_size=cfg.train.batch_size,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "teacher", model, extra={"role": "teacher"})
    write_loss_log(out / "loss_log.csv", records)
    _write_manifest(out, cfg, argv)
    print(f"final loss {records[-1].loss:.4f} after {cfg.train.iterations} iterations")
    print(f"checkpoint: {out / 'teacher'}.tc")
    return 0


def cmd_sample(args, argv) -> int:
    from .container import write_tensor_container
    from .diffusion import make_schedule
    from .distill import StudentSchedule, sample_tryon_student
    from .model import load_checkpoint, sample_tryon

    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.sample.seed = args.seed
    steps = args.steps if args.steps is not None else (
        len(cfg.distill.student_indices) if args.student else cfg.sample.teacher_steps
    )
    model = load_checkpoint(args.checkpoint)
    encoded = _load_encoded(args.data, cfg, "test")
    if not 0 <= args.index < len(encoded):
        raise ValueError(f"sample index {args.index} out of range (have {len(encoded)})")
    enc = encoded[args.index]
    schedule = make_schedule(cfg.schedule_steps)
    if args.student:
        sched = StudentSchedule(tuple(cfg.distill.student_indices), cfg.distill.teacher_steps)
        latent, video, nfe = sample_tryon_student(
            model, enc, sched, cfg.sample.seed, schedule, clip_x0=cfg.sample.clip_x0
        )
    else:
        latent, video, nfe = sample_tryon(
            model, enc, steps, cfg.sample.seed, schedule, clip_x0=cfg.sample.clip_x0
        )
    out = Path(args.out)
    _save_frames(video, out)
    write_tensor_container(out / "result.tc", {"latent": latent, "video": video})
    _write_manifest(out, cfg, argv, {"nfe": nfe, "index": args.index, "student": args.student})
    print(f"rendered {video.shape[0]} frames with {nfe} denoiser evaluations -> {out}")
    return 0


def cmd_distill(args, argv) -> int:
    from .diffusion import make_schedule
    from .distill import distill, generate_ode_cache, load_cache, save_cache, StudentSchedule
    from .model import load_checkpoint, save_checkpoint

    cfg = _load_config(args.config)
    teacher = load_checkpoint(args.checkpoint)
    encoded = _load_encoded(args.data, cfg, "train")
    schedule = make_schedule(cfg.schedule_steps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.cache:
        cache = load_cache(args.cache)
    else:
        sched = StudentSchedule(tuple(cfg.distill.student_indices), cfg.distill.teacher_steps)
        cache = generate_ode_cache(
            teacher, encoded, cfg.distill.cache_size, cfg.distill.cache_seed, schedule, sched,
            clip_x0=cfg.distill.clip_x0,
        )
        save_cache(out / "ode_cache", cache)
    student, history = distill(
        teacher, encoded, schedule, cfg.distill,
        cache=cache, checkpoint_prefix=out / "student_abort",
    )
    save_checkpoint(out / "student", student, extra={"role": "student"})
    (out / "distill_history.json").write_text(json.dumps(history, sort_keys=True))
    _write_manifest(out, cfg, argv)
    init = history["init_loss"]
    print(f"regression loss {init[0]:.4f} -> {init[-1]:.4f} over {len(init)} iterations")
    print(f"student checkpoint: {out / 'student'}.tc")
    return 0


def cmd_eval(args, argv) -> int:
    from .diffusion import make_schedule
    from .distill import StudentSchedule
    from .model import load_checkpoint
    from .train import evaluate_split

    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.sample.seed = args.seed
    if args.steps is not None:
        cfg.sample.teacher_steps = args.steps
    model = load_checkpoint(args.checkpoint)
    encoded = _load_encoded(args.data, cfg, "test")
    schedule = make_schedule(cfg.schedule_steps)
    sched = (
        StudentSchedule(tuple(cfg.distill.student_indices), cfg.distill.teacher_steps)
        if args.student else None
    )
    report = {}
    for name, unpaired in (("paired", False), ("unpaired", True)):
        rep = evaluate_split(
            model, encoded, schedule, cfg.sample.teacher_steps, cfg.sample.seed,
            unpaired=unpaired, student_schedule=sched,
        )
        report[name] = rep.to_dict()
    report["n_samples"] = len(encoded)
    report["student"] = bool(args.student)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(report, sort_keys=True, indent=1))
    print(json.dumps(report, sort_keys=True, indent=1))
    return 0


def cmd_inspect(args, _argv) -> int:
    path = Path(args.path)
    raw = path.read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        from .errors import FormatError

        raise FormatError("no header line found")
    header = json.loads(raw[:newline].decode("utf-8"))
    print(json.dumps(header, sort_keys=True, indent=1))
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "distill": cmd_distill,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def run_command(argv) -> int:
    """Parse and dispatch; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    from .errors import DivergenceError, FormatError, NumericFailure

    try:
        return _COMMANDS[args.command](args, argv)
    except (NumericFailure, DivergenceError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ValueError, FormatError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    argv = sys.argv[1:]
    _pin_threads(argv)
    sys.exit(run_command(argv))


if __name__ == "__main__":
    main()
