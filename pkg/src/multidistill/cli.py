"""Command-line entry point.

One process per command. Every command reads one config file, writes only
under its ``--out`` directory, and drops a fully resolved copy of the config
there first, so any run can be reproduced from its own output directory.
Exit codes: 0 on success, 2 for usage and configuration problems, 1 for
runtime failures; every failure prints a single diagnostic line to stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from . import rng as rngmod
from .checkpoint import write_state_file
from .config import ConfigError, Experiment, load_config, write_config
from .data import image_batch, labeled_images
from .dumpio import write_dump
from .evalbench import (
    bench_attention,
    fpn_from_features,
    knn_classify,
    linear_probe,
    pca_rgb,
    write_bench_csv,
    write_bench_skips_csv,
    write_eval_csv,
)
from .normstats import fit_summary_stats
from .student import forward
from .teachers import synth_forward
from .trainer import init_state, load_checkpoint, save_checkpoint, train

COMMANDS = (
    "calibrate",
    "train",
    "eval-knn",
    "eval-probe",
    "estimate-disp",
    "estimate-fpn",
    "viz-pca",
    "bench-attn",
    "dump-teacher",
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="multidistill",
        description="calibrate, train, evaluate and benchmark distillation runs",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", required=True, help="output directory for all artifacts")
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        if name == "train":
            p.add_argument("--steps", type=int, default=None, help="override step count")
        if name in ("eval-knn", "eval-probe", "viz-pca"):
            p.add_argument("--checkpoint", default=None, help="trained state to evaluate")
        if name == "dump-teacher":
            p.add_argument("--teacher", default=None, help="roster name, default first")
            p.add_argument("--count", type=int, default=8, help="records to write")
    return parser


def _student_summaries(student, params, images) -> np.ndarray:
    return np.stack([forward(student, params, img)[0] for img in images])


def _eval_model(args, exp: Experiment):
    """The (student, params) a frozen-model evaluation should look at."""
    if getattr(args, "checkpoint", None):
        state = load_checkpoint(args.checkpoint)
        return state.student, state.params
    state = init_state(exp.run, exp.student)
    return state.student, state.params


def _labeled_features(args, exp: Experiment):
    e = exp.evals
    student, params = _eval_model(args, exp)
    if e.pixels % student.patch:
        raise ConfigError(
            f"{args.config}: key 'pixels' in [eval]: {e.pixels} is not a "
            f"multiple of the student patch {student.patch}"
        )
    gen = rngmod.stream(exp.run.master_seed, "eval")
    images, labels = labeled_images(gen, e.classes, e.per_class, e.pixels, e.label_noise)
    return _student_summaries(student, params, images), labels


def _teacher_input_px(entry, exp: Experiment, config_path: str) -> int:
    px = entry.spec.native if entry.spec.native else exp.evals.resolution
    if px % entry.spec.patch:
        raise ConfigError(
            f"{config_path}: key 'resolution' in [eval]: {px} is not a "
            f"multiple of teacher '{entry.name}' patch {entry.spec.patch}"
        )
    return px


def _cmd_calibrate(args, exp: Experiment) -> int:
    state = init_state(exp.run, exp.student)
    arrays = {}
    meta_teachers = {}
    for name in sorted(state.stats):
        st = state.stats[name]
        arrays[f"stats/{name}/channel_mean"] = st.channel_mean
        arrays[f"stats/{name}/channel_scale"] = st.channel_scale
        arrays[f"stats/{name}/mean_dir"] = st.mean_dir
        meta_teachers[name] = {"dispersion": st.dispersion, "sample_count": st.sample_count}
    path = os.path.join(args.out, "calibration.bin")
    write_state_file(path, {"kind": "calibration", "teachers": meta_teachers}, arrays)
    print(f"calibrated {len(meta_teachers)} teachers over {exp.run.calib_images} images -> {path}")
    return 0


def _cmd_train(args, exp: Experiment) -> int:
    state = init_state(exp.run, exp.student)
    log = os.path.join(args.out, "train_log.csv")
    state, _ = train(state, log_path=log)
    ckpt = os.path.join(args.out, "checkpoint.bin")
    save_checkpoint(state, ckpt)
    print(f"trained {state.step} steps; log -> {log}; checkpoint -> {ckpt}")
    return 0


def _cmd_eval_knn(args, exp: Experiment) -> int:
    x, labels = _labeled_features(args, exp)
    n = len(x)
    k = min(exp.evals.knn_k, n - 1)
    hits = 0
    for i in range(n):
        rest = np.arange(n) != i
        hits += int(knn_classify(x[rest], labels[rest], x[i], k=k) == labels[i])
    acc = hits / n
    path = os.path.join(args.out, "eval.csv")
    write_eval_csv(path, [("knn", "accuracy", acc, exp.run.master_seed)])
    print(f"knn accuracy {acc:.4f} over {n} images (k={k}) -> {path}")
    return 0


def _cmd_eval_probe(args, exp: Experiment) -> int:
    x, labels = _labeled_features(args, exp)
    acc = linear_probe(x, labels, l2=exp.evals.probe_l2, seed=exp.run.master_seed)
    path = os.path.join(args.out, "eval.csv")
    write_eval_csv(path, [("probe", "accuracy", acc, exp.run.master_seed)])
    print(f"probe accuracy {acc:.4f} over {len(x)} images -> {path}")
    return 0


def _cmd_estimate_disp(args, exp: Experiment) -> int:
    gen = rngmod.stream(exp.run.master_seed, "eval")
    rows = []
    for entry in exp.run.roster:
        px = _teacher_input_px(entry, exp, args.config)
        images = image_batch(gen, exp.evals.images, px)
        summaries = [synth_forward(entry.spec, img)[0] for img in images]
        _, dispersion = fit_summary_stats(summaries)
        rows.append(("dispersion", entry.name, dispersion, exp.run.master_seed))
    path = os.path.join(args.out, "eval.csv")
    write_eval_csv(path, rows)
    for _, name, value, _ in rows:
        print(f"dispersion[{name}] = {value:.4f}")
    print(f"-> {path}")
    return 0


def _cmd_estimate_fpn(args, exp: Experiment) -> int:
    gen = rngmod.stream(exp.run.master_seed, "eval")
    rows = []
    for entry in exp.run.roster:
        px = _teacher_input_px(entry, exp, args.config)
        images = image_batch(gen, exp.evals.images, px)
        grids = [synth_forward(entry.spec, img)[1] for img in images]
        _, energy = fpn_from_features(grids)
        rows.append(("fpn", entry.name, energy, exp.run.master_seed))
    path = os.path.join(args.out, "eval.csv")
    write_eval_csv(path, rows)
    for _, name, value, _ in rows:
        print(f"fpn energy[{name}] = {value:.6g}")
    print(f"-> {path}")
    return 0


def _cmd_viz_pca(args, exp: Experiment) -> int:
    gen = rngmod.stream(exp.run.master_seed, "eval")
    written = []
    count = min(exp.evals.images, 8)
    for entry in exp.run.roster:
        px = _teacher_input_px(entry, exp, args.config)
        images = image_batch(gen, count, px)
        grids = [synth_forward(entry.spec, img)[1] for img in images]
        written += pca_rgb(grids, args.out, prefix=f"pca_{entry.name}")
    if getattr(args, "checkpoint", None):
        student, params = _eval_model(args, exp)
        px = exp.evals.resolution - exp.evals.resolution % student.patch
        images = image_batch(gen, count, max(px, student.patch))
        grids = [forward(student, params, img)[1] for img in images]
        written += pca_rgb(grids, args.out, prefix="pca_student")
    print(f"wrote {len(written)} component maps -> {args.out}")
    return 0


def _cmd_bench_attn(args, exp: Experiment) -> int:
    b = exp.bench
    variants = []
    for label, sched in b.variants:
        cfg = exp.student
        if sched:
            try:
                cfg = cfg.with_schedule(sched)
            except ValueError as exc:
                raise ConfigError(
                    f"{args.config}: key 'variants' in [bench], '{label}': {exc}"
                ) from None
        variants.append((label, cfg))
    records, skips = bench_attention(
        variants,
        b.resolutions,
        warmup=b.warmup,
        trials=b.trials,
        threads=b.threads,
        seed=exp.run.master_seed,
    )
    bench_path = os.path.join(args.out, "bench.csv")
    skip_path = os.path.join(args.out, "bench_skips.csv")
    write_bench_csv(bench_path, records)
    write_bench_skips_csv(skip_path, skips)
    for s in skips:
        print(f"skipped {s.variant}@{s.resolution}: {s.reason}")
    print(f"{len(records)} timings -> {bench_path}; {len(skips)} skips -> {skip_path}")
    return 0


def _cmd_dump_teacher(args, exp: Experiment) -> int:
    roster = {entry.name: entry for entry in exp.run.roster}
    name = args.teacher or exp.run.roster[0].name
    if name not in roster:
        raise ConfigError(
            f"{args.config}: teacher {name!r} not in roster {sorted(roster)}"
        )
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    entry = roster[name]
    px = _teacher_input_px(entry, exp, args.config)
    gen = rngmod.stream(exp.run.master_seed, "eval")
    records = (synth_forward(entry.spec, img) for img in image_batch(gen, args.count, px))
    path = os.path.join(args.out, f"{name}.rfd")
    header = write_dump(path, records, patch=entry.spec.patch)
    print(
        f"wrote {header.count} records ({header.rows}x{header.cols}x{header.channels}, "
        f"summary {header.summary_dim}) -> {path}"
    )
    return 0


_DISPATCH = {
    "calibrate": _cmd_calibrate,
    "train": _cmd_train,
    "eval-knn": _cmd_eval_knn,
    "eval-probe": _cmd_eval_probe,
    "estimate-disp": _cmd_estimate_disp,
    "estimate-fpn": _cmd_estimate_fpn,
    "viz-pca": _cmd_viz_pca,
    "bench-attn": _cmd_bench_attn,
    "dump-teacher": _cmd_dump_teacher,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse printed usage already
        return int(exc.code or 0)
    try:
        exp = load_config(args.config)
        run = exp.run
        try:
            if args.seed is not None:
                run = replace(run, master_seed=args.seed)
            if getattr(args, "steps", None) is not None:
                run = replace(run, steps=args.steps)
        except ValueError as exc:
            raise ConfigError(f"command-line override: {exc}") from None
        exp = replace(exp, run=run)
        os.makedirs(args.out, exist_ok=True)
        write_config(os.path.join(args.out, "resolved.ini"), exp)
        return _DISPATCH[args.command](args, exp)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
