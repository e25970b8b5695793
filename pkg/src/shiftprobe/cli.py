"""Command-line interface.

Subcommands mirror the pipeline stages (synth, preprocess, train, encode,
integrity, evaluate, report) plus `run`, which executes the whole loop,
and `shift`, which applies one transform to an epoch file. Usage errors
exit with code 2 (argparse); data and configuration errors exit with 1.

Worker count resolution: --jobs flag, else the SHIFTPROBE_JOBS
environment variable, else [output] jobs from the config.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import epoch_io, pipeline
from .config import ExperimentConfig, load_config, save_config
from .latent_topology import integrity_score
from .shifts import apply as apply_shift, parse_shift
from .signal_core import ChannelLayout

JOBS_ENV = "SHIFTPROBE_JOBS"


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_master_seed(args.seed)
    return cfg


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _jobs(args, cfg: ExperimentConfig) -> int:
    if getattr(args, "jobs", None) is not None:
        return args.jobs
    env = os.environ.get(JOBS_ENV)
    if env:
        return int(env)
    return cfg.output.jobs


def _add_common(parser: argparse.ArgumentParser, seed: bool = True) -> None:
    parser.add_argument("--config", help="experiment config file (key = value sections)")
    parser.add_argument("--out", help="output directory (default: [output] dir)")
    if seed:
        parser.add_argument("--seed", type=int, help="master seed overriding all per-component seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiftprobe",
        description="Model-robustness diagnostics: data shifts, latent integrity, MC-dropout uncertainty.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic recordings and splits")
    _add_common(p)

    p = sub.add_parser("preprocess", help="preprocess train/val recordings to epochs")
    _add_common(p)

    p = sub.add_parser("shift", help="apply one shift to an epoch file")
    p.add_argument("--spec", required=True, help='shift token, e.g. "QP(8)" or "BN(sigma=0.1,seed=7)"')
    p.add_argument("input", help="input SPB1 epoch file")
    p.add_argument("output", help="output SPB1 epoch file")
    p.add_argument("--recording-id", default=None, help="id for noise stream keying (default: input stem)")

    p = sub.add_parser("train", help="train the configured encoder/head")
    _add_common(p)

    p = sub.add_parser("encode", help="write embeddings of one split to CSV")
    _add_common(p)
    p.add_argument("--split", default="test", choices=["train", "val", "test", "domain_b"])

    p = sub.add_parser("integrity", help="latent-integrity scores for the shift grid")
    _add_common(p)
    p.add_argument("--method", choices=["gabriel", "exact2d"], help="override graph method")
    p.add_argument("--mode", choices=["pooled", "per_recording"], help="override scoring mode")
    p.add_argument("--shift", help="single shift token instead of the whole grid")

    p = sub.add_parser("evaluate", help="evaluate one shift condition")
    _add_common(p)
    p.add_argument("--shift", required=True, help="shift token to evaluate")

    p = sub.add_parser("report", help="assemble report.jsonl and the pivot CSV")
    _add_common(p)

    p = sub.add_parser("run", help="run the full experiment loop")
    _add_common(p)
    p.add_argument("--jobs", type=int, help=f"parallel workers (or ${JOBS_ENV})")

    p = sub.add_parser("init-config", help="write the default config to a file")
    p.add_argument("path", help="destination config path")
    return parser


def cmd_shift(args) -> int:
    spec = parse_shift(args.spec)
    data, fs, names = epoch_io.load_spb(args.input)
    rid = args.recording_id or Path(args.input).stem
    shifted = [
        apply_shift(spec, epoch, fs=fs, recording_id=rid, epoch_index=i)
        for i, epoch in enumerate(data)
    ]
    import numpy as np

    epoch_io.save_spb(args.output, np.stack(shifted), fs, names)
    print(f"wrote {args.output} ({len(shifted)} epochs, shift {spec.token()})")
    return 0


def cmd_integrity(args) -> int:
    cfg = _load_cfg(args)
    out_dir = _out_dir(args, cfg)
    if args.method:
        cfg.integrity.method = args.method
    if args.mode:
        cfg.integrity.mode = args.mode
    grouped = pipeline.load_split_recordings(out_dir)
    recordings = grouped.get("test", [])
    if not recordings:
        raise RuntimeError("no test recordings; run the synth stage first")
    task = cfg.tasks[0]
    if cfg.encoder.kind == "psde":
        from .encoders import psd_encode

        def encode(epoch, origin, rid, idx):
            return psd_encode(epoch, origin=origin, recording_id=rid,
                              epoch_index=idx, encoder_id="psde")
        encoder_id = "psde"
    else:
        model = pipeline.load_model(cfg, out_dir, task)
        encode = pipeline._integrity_encoder(cfg, model)
        encoder_id = model.encoder_id
    grid = [parse_shift(args.shift)] if args.shift else cfg.shift_grid()
    lines = []
    for spec in grid:
        result = integrity_score(
            encode, recordings, spec, method=cfg.integrity.method,
            subsample=cfg.integrity.subsample, seed=cfg.integrity.seed,
            mode=cfg.integrity.mode, encoder_id=encoder_id,
        )
        import json

        line = json.dumps(result.record())
        print(line)
        lines.append(line)
    (out_dir / "integrity_cli.jsonl").write_text("\n".join(lines) + "\n")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    out_dir = _out_dir(args, cfg)
    spec = parse_shift(args.shift)
    grouped = pipeline.load_split_recordings(out_dir)
    test_recordings = grouped.get("test", [])
    if not test_recordings:
        raise RuntimeError("no test recordings; run synth/preprocess/train first")
    models = {task: pipeline.load_model(cfg, out_dir, task) for task in cfg.tasks}
    pipeline.run_condition(cfg, out_dir, spec, models, test_recordings)
    cond_dir = out_dir / "conditions" / pipeline.shift_slug(spec)
    for task in cfg.tasks:
        print((cond_dir / f"row_{task}.json").read_text().strip())
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "init-config":
            save_config(args.path, ExperimentConfig())
            print(f"wrote {args.path}")
            return 0
        if args.command == "shift":
            return cmd_shift(args)
        cfg = _load_cfg(args)
        if args.command == "synth":
            out_dir = _out_dir(args, cfg)
            pipeline.stage_data(cfg, out_dir)
            print(f"data written under {out_dir / 'data'}")
        elif args.command == "preprocess":
            out_dir = _out_dir(args, cfg)
            pipeline.stage_preprocess(cfg, out_dir)
            print(f"preprocessed epochs under {out_dir / 'data' / 'preprocessed'}")
        elif args.command == "train":
            out_dir = _out_dir(args, cfg)
            pipeline.stage_train(cfg, out_dir)
            print(f"checkpoints under {out_dir / 'model'}")
        elif args.command == "encode":
            out_dir = _out_dir(args, cfg)
            path = pipeline.stage_encode(cfg, out_dir, args.split)
            print(f"wrote {path}")
        elif args.command == "integrity":
            return cmd_integrity(args)
        elif args.command == "evaluate":
            return cmd_evaluate(args)
        elif args.command == "report":
            out_dir = _out_dir(args, cfg)
            rows = pipeline.stage_report(cfg, out_dir)
            print(f"report.jsonl with {len(rows)} rows under {out_dir}")
        elif args.command == "run":
            out_dir = pipeline.run(cfg, getattr(args, "out", None), _jobs(args, cfg))
            print(f"run complete; report at {out_dir / 'report.jsonl'}")
        return 0
    except BrokenPipeError:
        return 1
    except Exception as exc:  # data/config errors exit 1; usage errors exit 2 via argparse
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
