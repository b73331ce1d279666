"""``vfi`` command-line entry point.

Exit codes: 0 success, 2 input or configuration error, 3 checkpoint error,
4 numerical failure during training.
"""
import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import yaml

from . import __version__
from .data import (Clip, MotionSpec, load_dataset, load_frames, make_eval_clips, make_triplets,
                   rendered_eval_clips, save_frames, synthetic_motion_dataset,
                   temporal_subsample, triplets_to_array, windows_to_array)
from .exceptions import CheckpointError, ConfigurationError, IngestionError, NumericalError
from .model import ModelConfig, load_checkpoint
from .trainer import TrainConfig, Trainer, frozen_copy, init_model

logger = logging.getLogger("cycle_vfi")

EXIT_OK, EXIT_INPUT, EXIT_CHECKPOINT, EXIT_NUMERIC = 0, 2, 3, 4
MODEL_KEYS = {f for f in ModelConfig.__dataclass_fields__}
RUN_KEYS = {"n_eval", "synthetic_count", "synthetic_size", "synthetic_kind",
            "synthetic_speed_min", "synthetic_speed_max", "synthetic_length", "subsample",
            "stride", "lambda_rp_grid", "fps"}


class UsageError(Exception):
    pass


# --- configuration ------------------------------------------------------------

def _numeric(value):
    # YAML 1.1 reads exponent floats without a dot ("1e-3") as strings
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    if isinstance(value, list):
        return [_numeric(v) for v in value]
    return value


def parse_value(text: str):
    return _numeric(yaml.safe_load(text)) if text else text


def load_config(path, overrides, seed=None) -> dict:
    """Merge a flat key-value file, ``--set`` overrides and ``--seed``."""
    cfg = {}
    if path:
        try:
            loaded = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigurationError(f"config {path} must be a flat key-value mapping")
        cfg.update({k: _numeric(v) for k, v in (loaded or {}).items()})
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = parse_value(value.strip())
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def split_config(cfg: dict):
    """Return ``(TrainConfig, ModelConfig, run options)`` from one flat mapping."""
    cfg = dict(cfg)
    model_kw = {k: cfg.pop(k) for k in list(cfg) if k in MODEL_KEYS}
    run = {k: cfg.pop(k) for k in list(cfg) if k in RUN_KEYS}
    train = TrainConfig.from_dict(cfg)
    try:
        model = ModelConfig(**model_kw)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    return train, model, run


# --- datasets -------------------------------------------------------------------

def resolve_data_path(data):
    if data is None:
        root = os.environ.get("VFI_DATA_ROOT")
        if not root:
            raise UsageError("no dataset given (use --data or set VFI_DATA_ROOT)")
        data = root
    return str(data)


def synthetic_clips(run: dict, seed: int, spec_text: str, length=None):
    """``synthetic[:kind]`` dataset description to clips."""
    parts = spec_text.split(":")
    kind = parts[1] if len(parts) > 1 and parts[1] else run.get("synthetic_kind", "translate")
    spec = MotionSpec(kind=kind, speed=(float(run.get("synthetic_speed_min", 1.0)),
                                        float(run.get("synthetic_speed_max", 4.0))))
    return synthetic_motion_dataset(seed, int(run.get("synthetic_count", 64)),
                                    int(run.get("synthetic_size", 64)), spec,
                                    length=int(length or run.get("synthetic_length", 3)),
                                    fps=float(run.get("fps", 30.0)))


def load_clips(data, run, seed, length=None):
    data = resolve_data_path(data)
    if data.startswith("synthetic"):
        return synthetic_clips(run, seed, data, length)
    clips = load_dataset(data, fps=float(run.get("fps", 30.0)))
    factor = int(run.get("subsample", 1))
    return [temporal_subsample(c, factor) for c in clips]


def dataset_digest(data) -> str:
    h = hashlib.sha256(str(data).encode())
    if data and not str(data).startswith("synthetic"):
        p = Path(data)
        files = [p] if p.is_file() else sorted(x for x in p.rglob("*") if x.is_file()) if p.is_dir() else []
        for f in files:
            h.update(str(f.relative_to(p) if p.is_dir() else f.name).encode())
            h.update(f.read_bytes())
    return h.hexdigest()


def training_array(clips, train_cfg, run):
    if train_cfg.mode == "supervised":
        windows = []
        for c in clips:
            n = int(run.get("n_eval", 1))
            windows.extend(make_eval_clips(c, n) if len(c) >= n + 2 else [])
        if not windows:
            raise UsageError("no supervised windows could be formed from the dataset")
        return windows_to_array(windows)
    triplets = [t for c in clips for t in make_triplets(c, int(run.get("stride", 1)))]
    if not triplets:
        raise UsageError("dataset yields no triplets")
    return triplets_to_array(triplets)


# --- manifest -------------------------------------------------------------------

def write_manifest(out_dir: Path, command: str, config: dict, seed, data, outputs):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "code_version": __version__,
        "input_digest": dataset_digest(data),
        "outputs": {k: str(v) for k, v in outputs.items()},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    tmp = out_dir / ".manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    tmp.replace(out_dir / "manifest.json")
    return manifest


# --- commands -------------------------------------------------------------------

def _train_run(args, out_dir: Path, cfg: dict, model=None, teacher=None, command="train"):
    train_cfg, model_cfg, run = split_config(cfg)
    clips = load_clips(args.data, run, train_cfg.seed)
    dataset = training_array(clips, train_cfg, run)
    write_manifest(out_dir, command, cfg, train_cfg.seed, args.data,
                   {"checkpoints": out_dir / "checkpoints", "metrics": out_dir / "metrics.jsonl"})
    if model is None:
        model = init_model(model_cfg, train_cfg.seed)
    trainer = Trainer(model, train_cfg, teacher=teacher, out_dir=out_dir)
    if getattr(args, "resume", False) and trainer.checkpoint_path().exists():
        trainer.resume(trainer.checkpoint_path())
    trainer.fit(dataset)
    print(f"trained {trainer.state.epoch} epochs, {trainer.state.step} steps -> {out_dir}")
    return trainer


def cmd_train(args):
    cfg = load_config(args.config, args.set, args.seed)
    _train_run(args, Path(args.out), cfg)
    return EXIT_OK


def cmd_finetune(args):
    cfg = {"mode": "cc_plus_ps", **load_config(args.config, args.set, args.seed)}
    out = Path(args.out)
    ckpt = Path(args.checkpoint)
    if ckpt.resolve().parent in {out.resolve(), (out / "checkpoints").resolve()}:
        raise UsageError("refusing to write fine-tuning outputs next to the teacher checkpoint")
    student = load_checkpoint(ckpt)
    teacher = frozen_copy(student)
    _train_run(args, out, cfg, model=student, teacher=teacher, command="finetune")
    return EXIT_OK


def interleave_name(index: int, sub: int, n: int, digits: int = 8) -> str:
    """Output frame name for input ``index`` and intermediate ``sub`` (0 = the input)."""
    return f"{index * (n + 1) + sub:0{digits}d}.png"


def cmd_interpolate(args):
    from .estimator import interpolate_frames
    n = args.n
    if n < 0:
        raise UsageError("n must be >= 0")
    clip = load_frames(args.in_dir)
    model = load_checkpoint(args.checkpoint) if n > 0 else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = clip.frames
    count = 0
    for k, frame in enumerate(frames):
        save_frames(Clip([frame]), out, start_index=k * (n + 1), digits=8)
        count += 1
        if k + 1 < len(frames) and n > 0:
            mids = interpolate_frames(model, frame, frames[k + 1], n)
            save_frames(Clip(mids), out, start_index=k * (n + 1) + 1, digits=8)
            count += n
    (out / "fps.txt").write_text(f"{clip.fps * (n + 1):g}\n")
    print(f"wrote {count} frames to {out} ({clip.fps:g} -> {clip.fps * (n + 1):g} fps)")
    return EXIT_OK


def _eval_clips(args, run, seed):
    n = args.n
    data = resolve_data_path(args.data)
    if data.startswith("synthetic"):
        clips = synthetic_clips(run, seed, data, length=2)
        return rendered_eval_clips(clips, n)
    clips = load_dataset(data, fps=float(run.get("fps", 30.0)))
    out = [e for c in clips for e in make_eval_clips(c, n)]
    if not out:
        raise UsageError(f"no {n + 2}-frame evaluation windows in {data}")
    return out


def cmd_eval(args):
    from .metrics import aggregate_seeds, comparison_table, evaluate
    cfg = load_config(args.config, args.set, None)
    _, _, run = split_config(cfg)
    seed = args.seed if args.seed is not None else 0
    eval_clips = _eval_clips(args, run, seed)
    out = Path(args.out)
    write_manifest(out, "eval", cfg, seed, args.data,
                   {"report": out / "report.json", "per_time": out / "per_time_psnr.csv",
                    "table": out / "table.txt"})
    reports = [evaluate("trivial_copy", eval_clips, args.n, name="trivial_copy")]
    for ckpt in args.checkpoint or []:
        runs = [evaluate(load_checkpoint(c), eval_clips, args.n, name=Path(ckpt[0]).stem)
                for c in ckpt]
        reports.append(aggregate_seeds(runs) if len(runs) > 1 else runs[0])
    doc = {r.name: r.to_dict() for r in reports}
    (out / "report.json").write_text(json.dumps(doc, indent=2))
    main_report = reports[-1]
    (out / "per_time_psnr.csv").write_text(main_report.per_time_csv())
    table = comparison_table(reports)
    (out / "table.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_ablate(args):
    from .ablation import lambda_rp_sweep, long_step_comparison
    cfg = load_config(args.config, args.set, args.seed)
    out = Path(args.out)
    write_manifest(out, f"ablate {args.kind}", cfg, cfg.get("seed", 0), args.data,
                   {"csv": out / f"{args.kind}.csv"})
    train_cfg, model_cfg, run = split_config(cfg)
    clips = load_clips(args.data, run, train_cfg.seed)
    train_arr = training_array(clips, TrainConfig.from_dict({**train_cfg.to_dict(), "mode": "cc_only"}), run)
    val_run = dict(run, synthetic_count=max(8, int(run.get("synthetic_count", 64)) // 4))
    eval_clips = _eval_clips(argparse.Namespace(n=int(run.get("n_eval", 1)), data=args.data),
                             val_run, train_cfg.seed + 10_000)
    if args.kind == "lambda_rp_sweep":
        if not args.checkpoint:
            raise UsageError("lambda_rp_sweep needs --checkpoint (the pre-trained teacher)")
        grid = run.get("lambda_rp_grid", [0, 0.1, 0.4, 0.8, 1.6, 6.4, 64])
        if isinstance(grid, str):
            grid = [float(x) for x in grid.split(",")]
        rows = lambda_rp_sweep(load_checkpoint(args.checkpoint), train_arr, eval_clips,
                               train_cfg, [float(g) for g in grid], out_dir=out)
        fields = ["lambda_rp", "psnr", "ssim", "ie"]
    else:
        base = load_checkpoint(args.checkpoint) if args.checkpoint else init_model(model_cfg, train_cfg.seed)
        rows = long_step_comparison(base, train_arr, eval_clips, train_cfg, out_dir=out)
        fields = ["loss", "psnr", "ssim", "ie"]
    with open(out / f"{args.kind}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(", ".join(f"{k}={r[k]}" for k in fields))
    return EXIT_OK


def cmd_subsample(args):
    if args.factor < 1:
        raise UsageError("factor must be >= 1")
    src = Path(args.in_dir)
    subdirs = sorted(p for p in src.iterdir() if p.is_dir()) if src.is_dir() else []
    pairs = [(d, Path(args.out_dir) / d.name) for d in subdirs] or [(src, Path(args.out_dir))]
    for d, o in pairs:
        clip = load_frames(d, fps=args.fps)
        sub = temporal_subsample(clip, args.factor)
        save_frames(sub, o)
        (o / "fps.txt").write_text(f"{sub.fps:g}\n")
        print(f"{d} -> {o}: {len(clip)} -> {len(sub)} frames, {clip.fps:g} -> {sub.fps:g} fps")
    return EXIT_OK


def cmd_synth(args):
    spec = MotionSpec(kind=args.kind, speed=(args.speed_min, args.speed_max))
    clips = synthetic_motion_dataset(args.seed or 0, args.count, args.size, spec,
                                     length=args.length, fps=args.fps)
    out = Path(args.out_dir)
    lines = []
    for c in clips:
        save_frames(c, out / c.source_id)
        lines.append(c.source_id)
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(clips)} clips to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vfi", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="flat key-value config file (YAML or JSON)")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", default=out_default)

    p = sub.add_parser("train", help="train a model (cc_only, supervised, ...)")
    common(p, "runs/train")
    p.add_argument("--data", help="manifest, clip directory, or synthetic[:kind]")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint with CC + pseudo supervision")
    common(p, "runs/finetune")
    p.add_argument("checkpoint")
    p.add_argument("--data")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("interpolate", help="insert n frames between consecutive inputs")
    p.add_argument("checkpoint")
    p.add_argument("in_dir")
    p.add_argument("out_dir")
    p.add_argument("-n", type=int, default=7)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("eval", help="evaluate checkpoints against the trivial-copy baseline")
    common(p, "runs/eval")
    p.add_argument("--checkpoint", nargs="+", action="append",
                   help="one or more checkpoints; several after one flag are seeds of one method")
    p.add_argument("--data")
    p.add_argument("-n", type=int, default=7)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="lambda_rp sweep or long-step comparison")
    common(p, "runs/ablate")
    p.add_argument("kind", choices=["lambda_rp_sweep", "long_step"])
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("subsample", help="keep every factor-th frame of each clip")
    p.add_argument("in_dir")
    p.add_argument("out_dir")
    p.add_argument("factor", type=int)
    p.add_argument("--fps", type=float, default=240.0, help="frame rate of the input clips")
    p.set_defaults(func=cmd_subsample)

    p = sub.add_parser("synth", help="write a synthetic moving-texture dataset")
    p.add_argument("out_dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--length", type=int, default=9)
    p.add_argument("--kind", default="translate", choices=["translate", "rotate", "mixed"])
    p.add_argument("--speed-min", type=float, default=1.0)
    p.add_argument("--speed-max", type=float, default=4.0)
    p.add_argument("--fps", type=float, default=30.0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigurationError, IngestionError, ValueError) as exc:
        print(f"vfi {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except CheckpointError as exc:
        print(f"vfi {args.command}: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except NumericalError as exc:
        print(f"vfi {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
