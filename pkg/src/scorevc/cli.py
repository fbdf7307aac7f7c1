"""Command-line entry point: stats, train, convert, sample, eval, validate.

Exit codes: 0 success, 1 validation error, 2 runtime or numerical failure
(including a failed validation invariant).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .errors import NumericalError, ParseError, ScoreVCError, ValidationError
from .evaluation import SyntheticSpec, evaluate_pairs, synthetic_validation
from .features import (
    FeatureSequence,
    adjust_mean_variance,
    compute_speaker_stats,
    convert_log_f0,
    denormalize_mcc,
    load_stats,
    normalize_mcc,
    read_feature_file,
    save_stats,
    utterance_stats,
    write_feature_file,
)
from .langevin import LangevinConfig, convert, sample
from .noise import NoiseSchedule, TrainConfig, TrainingCorpus, geometric_schedule, train
from .score_net import ScoreNetConfig, load_checkpoint, save_checkpoint

log = logging.getLogger("scorevc")

DATA_ROOT_ENV = "SCOREVC_DATA_ROOT"
FEATURE_SUFFIX = ".vgf"
STATS_SUFFIX = ".stats"
CHECKPOINT_NAME = "checkpoint.scn"

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def _write_run_config(path, args):
    items = {k: v for k, v in vars(args).items() if k != "func"}
    with open(path, "w") as fh:
        for key in sorted(items):
            fh.write(f"{key}={items[key]}\n")


def _data_dir(args):
    d = args.data_dir or os.environ.get(DATA_ROOT_ENV)
    if not d:
        raise ValidationError(f"no --data-dir given and ${DATA_ROOT_ENV} is unset")
    d = Path(d)
    if not d.is_dir():
        raise ValidationError(f"data directory {d} does not exist")
    return d


def _feature_files(directory):
    files = sorted(p for p in Path(directory).iterdir() if p.name.endswith(FEATURE_SUFFIX))
    if not files:
        raise ValidationError(f"no *{FEATURE_SUFFIX} files in {directory}")
    return files


# ---------------------------------------------------------------------------
# stats


def cmd_stats(args):
    root = _data_dir(args)
    spk_dir = root / args.speaker
    if not spk_dir.is_dir():
        raise ValidationError(f"speaker directory {spk_dir} does not exist")
    seqs = [read_feature_file(p) for p in _feature_files(spk_dir)]
    n_voiced = sum(int(s.voiced.sum()) for s in seqs)
    if n_voiced < 2:
        raise ValidationError(
            f"speaker {args.speaker!r}: statistics need at least 2 voiced frames (F0 > 0), found {n_voiced}"
        )
    stats = compute_speaker_stats(seqs, name=args.speaker)
    out = Path(args.out) if args.out else root / f"{args.speaker}{STATS_SUFFIX}"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_stats(out, stats)
    print(f"wrote {out} ({stats.frame_count} voiced frames, D={stats.D})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _schedule_from_args(args):
    return geometric_schedule(args.sigma_first, args.sigma_last, args.levels)


def cmd_train(args):
    root = _data_dir(args)
    schedule = _schedule_from_args(args)
    if args.speakers:
        speakers = [s for s in args.speakers.split(",") if s]
    else:
        speakers = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not speakers:
        raise ValidationError(f"no speaker directories under {root}")
    stats_dir = Path(args.stats_dir) if args.stats_dir else root
    stats, utts = {}, []
    for spk in speakers:
        sp = stats_dir / f"{spk}{STATS_SUFFIX}"
        if not sp.is_file():
            raise ValidationError(
                f"missing statistics for speaker {spk!r} ({sp}); run: scorevc stats --data-dir {root} --speaker {spk}"
            )
        stats[spk] = load_stats(sp)
        seqs = [read_feature_file(p) for p in _feature_files(root / spk)]
        utts.append([normalize_mcc(s.mcc, stats[spk]) for s in seqs])
    corpus = TrainingCorpus(speakers, utts)
    net_cfg = ScoreNetConfig(
        feature_dim=corpus.feature_dim, noise_levels=schedule.L, speakers=corpus.K,
        base_channels=args.base_channels, depth=args.depth, max_channels=args.max_channels, dtype=args.dtype,
    )
    train_cfg = TrainConfig(
        learning_rate=args.lr, batch_size=args.batch, epochs=args.epochs, steps=args.steps,
        crop_frames=args.crop, level_sampling=args.level_sampling, seed=args.seed,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_config(out / "run_config.txt", args)

    result = train(corpus, train_cfg, schedule, net_cfg)

    extra = {"speakers": speakers, "sigmas": list(schedule.sigmas)}
    save_checkpoint(out / CHECKPOINT_NAME, result.params, extra)
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "level_histogram", "loss"])
        for h in result.history:
            w.writerow([h.step, ";".join(str(c) for c in h.level_histogram), repr(h.loss)])
    (out / "stats").mkdir(exist_ok=True)
    for spk in speakers:
        shutil.copyfile(stats_dir / f"{spk}{STATS_SUFFIX}", out / "stats" / f"{spk}{STATS_SUFFIX}")
    print(f"trained {len(result.history)} steps; final loss {result.history[-1].loss:.5f}; wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# convert / sample


def _load_model(path):
    params, extra = load_checkpoint(path)
    speakers = extra.get("speakers") or [str(k) for k in range(1, params.config.speakers + 1)]
    sigmas = extra.get("sigmas")
    if not sigmas:
        raise ValidationError(f"checkpoint {path} carries no noise schedule")
    return params, speakers, NoiseSchedule(tuple(sigmas))


def _speaker_index(speakers, name):
    if name not in speakers:
        raise ValidationError(f"unknown target speaker {name!r}; valid speakers: {', '.join(speakers)}")
    return speakers.index(name) + 1


def _target_stats(args, checkpoint, name):
    stats_dir = Path(args.stats_dir) if args.stats_dir else Path(checkpoint).parent / "stats"
    path = stats_dir / f"{name}{STATS_SUFFIX}"
    if not path.is_file():
        raise ValidationError(f"no statistics for speaker {name!r} at {path}")
    return load_stats(path)


def cmd_convert(args):
    langevin_cfg = LangevinConfig(epsilon=args.epsilon, steps_per_level=args.steps,
                                  start_level=args.start_level, noisy=args.noisy, seed=args.seed)
    params, speakers, schedule = _load_model(args.checkpoint)
    k = _speaker_index(speakers, args.target_speaker)
    if langevin_cfg.start_level > schedule.L:
        raise ValidationError(f"--start-level {args.start_level} exceeds the {schedule.L} trained levels")
    tgt = _target_stats(args, args.checkpoint, args.target_speaker)
    seq = read_feature_file(args.input)
    if seq.D != params.config.feature_dim:
        raise ValidationError(f"input has D={seq.D}, model expects {params.config.feature_dim}")
    src = load_stats(args.source_stats) if args.source_stats else utterance_stats(seq)

    x = normalize_mcc(seq.mcc, src)
    y, _ = convert(params, x, k, schedule, langevin_cfg)
    mcc = adjust_mean_variance(y, tgt, seq.voiced)
    log_f0 = convert_log_f0(seq.log_f0, seq.voiced, src, tgt)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_feature_file(out, FeatureSequence(mcc, log_f0, seq.voiced, seq.ap))
    _write_run_config(out.with_name(out.name + ".run_config.txt"), args)
    print(f"wrote {out} (D={seq.D}, M={seq.M}, target {args.target_speaker})")
    return EXIT_OK


def cmd_sample(args):
    params, speakers, schedule = _load_model(args.checkpoint)
    k = _speaker_index(speakers, args.speaker)
    tgt = _target_stats(args, args.checkpoint, args.speaker)
    cfg = LangevinConfig.for_sampling(epsilon=args.epsilon, steps_per_level=args.steps, seed=args.seed,
                                      noisy=args.noisy)
    x = sample(params, (params.config.feature_dim, args.frames), k, schedule, cfg)
    mcc = denormalize_mcc(x, tgt)
    m = mcc.shape[1]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_feature_file(out, FeatureSequence(mcc, np.full(m, np.nan), np.zeros(m, dtype=bool)))
    _write_run_config(out.with_name(out.name + ".run_config.txt"), args)
    print(f"wrote {out} ({m} frames from speaker {args.speaker})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / validate


def cmd_eval(args):
    report = evaluate_pairs(args.converted, args.reference)
    out = Path(args.out)
    if out.suffix.lower() != ".csv":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "mcd.csv"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    print(report.summary())
    return EXIT_OK


def cmd_validate(args):
    if args.spec:
        with open(args.spec) as fh:
            spec = SyntheticSpec.from_dict(json.load(fh))
    else:
        spec = SyntheticSpec.two_mode_default(seed=args.seed)
    schedule = _schedule_from_args(args)
    train_cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch, steps=args.train_steps,
                            crop_frames=args.crop, level_sampling=args.level_sampling, seed=args.seed)
    langevin_cfg = LangevinConfig(epsilon=args.epsilon, steps_per_level=args.steps,
                                  start_level=args.start_level, noisy=False, seed=args.seed)
    net_cfg = ScoreNetConfig(feature_dim=spec.dim, noise_levels=schedule.L, speakers=spec.K,
                             base_channels=args.base_channels, depth=args.depth, max_channels=args.max_channels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_run_config(out / "run_config.txt", args)
    report = synthetic_validation(spec, schedule, train_cfg, langevin_cfg, net_cfg)
    if report.grid_rows:
        report.write_grid_csv(out / "score_grid.csv")
    checks = report.checks()
    with open(out / "checks.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "passed", "detail"])
        for name, ok, detail in checks:
            w.writerow([name, int(ok), detail])
    if report.losses:
        with open(out / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss"])
            for i, v in enumerate(report.losses, 1):
                w.writerow([i, repr(v)])
    for name, ok, detail in checks:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if report.passed else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser


def _add_schedule_flags(p):
    p.add_argument("--sigma-first", type=float, default=1.0)
    p.add_argument("--sigma-last", type=float, default=0.01)
    p.add_argument("--levels", type=int, default=11)


def _add_level_sampling_flag(p):
    p.add_argument("--level-sampling", choices=["per_batch", "per_item"], default="per_batch",
                   help="draw one noise level per minibatch (default) or one per item")


def _add_net_flags(p, base=32, depth=4):
    p.add_argument("--base-channels", type=int, default=base)
    p.add_argument("--depth", type=int, default=depth)
    p.add_argument("--max-channels", type=int, default=256)


def build_parser():
    parser = argparse.ArgumentParser(prog="scorevc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="compute per-speaker MCC and log-F0 statistics")
    p.add_argument("--data-dir")
    p.add_argument("--speaker", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train the conditional score network")
    p.add_argument("--data-dir")
    p.add_argument("--speakers", help="comma-separated speaker names (default: all subdirectories)")
    p.add_argument("--stats-dir")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--steps", type=int, default=None, help="override the epoch-derived step count")
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--crop", type=int, default=128)
    _add_level_sampling_flag(p)
    _add_schedule_flags(p)
    _add_net_flags(p)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="convert one feature file toward a target speaker")
    p.add_argument("--input", required=True)
    p.add_argument("--target-speaker", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stats-dir")
    p.add_argument("--source-stats")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--steps", type=int, default=120)
    p.add_argument("--start-level", type=int, default=4)
    p.add_argument("--noisy", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("sample", help="draw a feature sequence for one speaker")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--speaker", required=True)
    p.add_argument("--stats-dir")
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--steps", type=int, default=120)
    p.add_argument("--noisy", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="DTW-aligned MCD between converted and reference files")
    p.add_argument("--converted", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("validate", help="synthetic Gaussian validation suite")
    p.add_argument("--spec", help="JSON file with means/covs/weights (default: two modes at (+-2, 0))")
    p.add_argument("--out", required=True)
    p.add_argument("--train-steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--crop", type=int, default=16)
    _add_level_sampling_flag(p)
    _add_schedule_flags(p)
    _add_net_flags(p, base=16, depth=2)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--steps", type=int, default=120)
    p.add_argument("--start-level", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "steps", 1) is not None and getattr(args, "steps", 1) < 1:
            raise ValidationError(f"--steps must be >= 1, got {args.steps}")
        return args.func(args)
    except (ValidationError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, ScoreVCError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
