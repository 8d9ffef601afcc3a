"""Command-line entry point.

Subcommands: ``train-teacher``, ``distill``, ``sweep``, ``report``, ``eval``, ``probe``.
Outputs land in ``<out>/<config-hash>/`` where ``<out>`` comes from ``--out``,
the config's ``output_dir``, ``$SFTN_OUT`` or ``./runs``, in that order.

Exit codes: 0 success, 1 a run aborted (non-finite loss), 2 invalid input.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from contextlib import nullcontext
from pathlib import Path

from threadpoolctl import threadpool_limits

from .blocknet import ArchitectureError
from .checkpoint import CheckpointError, checkpoint_hash, load_checkpoint, save_checkpoint
from .config import ConfigValidationError, ExperimentConfig, load_config
from .data import DatasetError, gen_synth_vision, split_train_test
from .metrics import accuracy, linear_probe_transfer
from .pipeline import (SWEEP_AXES, MissingCheckpointError, distill_student, evaluate_pair, load_dataset,
                       obtain_teacher, run_sweep, train_teacher)
from .report import (COMPARISON_COLUMNS, RUN_COLUMNS, SWEEP_COLUMNS, RunReport, SeedResult, compare_reports,
                     run_table, write_csv)
from .trainer import DivergenceError

log = logging.getLogger("sftnkit")

OUT_ENV = "SFTN_OUT"
EXIT_OK, EXIT_ABORTED, EXIT_INVALID = 0, 1, 2


def _out_root(args, cfg: ExperimentConfig | None = None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(OUT_ENV, "runs"))


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seeds([args.seed])
    return cfg


def teacher_path(run_dir: Path, cfg: ExperimentConfig, seed: int) -> Path:
    return run_dir / f"teacher-{cfg.teacher_mode}-seed{seed}.ckpt"


def _write_sidecar(ckpt: Path, payload: dict) -> None:
    ckpt.with_suffix(".json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _save_report(report: RunReport, run_dir: Path, stem: str) -> None:
    report.save(run_dir / f"{stem}.json")
    write_csv(run_table(report), RUN_COLUMNS, run_dir / f"{stem}.csv")
    print(f"{stem}: {run_dir / (stem + '.json')} (report hash {report.hash()[:16]})")


def cmd_train_teacher(args) -> int:
    cfg = _config(args)
    train, test = load_dataset(cfg)
    run_dir = _out_root(args, cfg) / cfg.hash()
    run_dir.mkdir(parents=True, exist_ok=True)
    report = RunReport("teacher", cfg.to_dict(), cfg.hash(), train.id)
    for seed in cfg.seeds:
        try:
            run = train_teacher(cfg, seed, train)
        except DivergenceError as e:
            log.error("seed %d aborted: %s", seed, e)
            report.aborted.append({"seed": seed, "error": str(e)})
            continue
        path = teacher_path(run_dir, cfg, seed)
        digest = save_checkpoint(run.teacher, path)
        info = {k: v for k, v in run.info.items() if k != "phase1_trunk_hashes"}
        _write_sidecar(path, {"checkpoint_hash": digest, "config_hash": cfg.hash(), "dataset_hash": train.id,
                              "teacher_mode": cfg.teacher_mode, "seed": seed, "architecture": cfg.teacher_arch,
                              "trunk_only": True, "info": info})
        ev = evaluate_pair(run.teacher, None, test)
        report.results.append(SeedResult(seed=seed, teacher_acc=ev["teacher_acc"], teacher_hash=digest,
                                         teacher_history=run.history, wall_time_s=run.wall_time_s))
        print(f"seed {seed}: teacher acc {ev['teacher_acc']:.4f} -> {path}")
    _save_report(report, run_dir, "teacher_report")
    return EXIT_ABORTED if report.aborted else EXIT_OK


def cmd_distill(args) -> int:
    cfg = _config(args)
    train, test = load_dataset(cfg)
    run_dir = _out_root(args, cfg) / cfg.hash()
    run_dir.mkdir(parents=True, exist_ok=True)
    report = RunReport("distill", cfg.to_dict(), cfg.hash(), train.id)
    for seed in cfg.seeds:
        teacher = obtain_teacher(cfg, seed, teacher_path(run_dir, cfg, seed))
        try:
            res = distill_student(cfg, teacher, seed, train)
        except DivergenceError as e:
            log.error("seed %d aborted: %s", seed, e)
            report.aborted.append({"seed": seed, "error": str(e)})
            continue
        path = run_dir / f"student-{cfg.distill.method}-seed{seed}.ckpt"
        digest = save_checkpoint(res.student, path)
        _write_sidecar(path, {"checkpoint_hash": digest, "config_hash": cfg.hash(), "dataset_hash": train.id,
                              "teacher_hash": res.teacher_hash, "seed": seed, "method": cfg.distill.method})
        ev = evaluate_pair(teacher, res.student, test)
        report.results.append(SeedResult(
            seed=seed, teacher_acc=ev["teacher_acc"], teacher_hash=res.teacher_hash, student_acc=ev["student_acc"],
            student_hash=digest, student_history=[e.to_dict() for e in res.history], similarity=ev["similarity"]))
        print(f"seed {seed}: student acc {ev['student_acc']:.4f} (teacher {ev['teacher_acc']:.4f})")
    _save_report(report, run_dir, "distill_report")
    return EXIT_ABORTED if report.aborted else EXIT_OK


def _parse_values(axis: str, raw: list[str]) -> list:
    if axis == "branches":
        return [[int(v) for v in item.split("+")] for item in raw]
    return [float(v) for v in raw]


def cmd_sweep(args) -> int:
    cfg = _config(args)
    if not args.values:
        raise ConfigValidationError(["--values: sweep needs at least one value"])
    values = _parse_values(args.axis, args.values)
    train, test = load_dataset(cfg)
    path = _out_root(args, cfg) / cfg.hash() / f"sweep-{args.axis}.csv"
    rows, aborted = [], False
    for row in run_sweep(cfg, args.axis, values, train, test):
        rows.append(row)
        aborted |= row["status"] != "ok"
        write_csv(rows, SWEEP_COLUMNS, path)  # partial sweeps keep completed rows
        print(",".join("" if row.get(c) is None else str(row[c]) for c in SWEEP_COLUMNS))
    print(f"sweep table: {path}")
    return EXIT_ABORTED if aborted else EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for d in args.runs:
        d = Path(d)
        files = [d] if d.is_file() else sorted(d.glob("distill_report.json"))
        if not files:
            log.warning("no distill report in %s", d)
        reports.extend(RunReport.load(f) for f in files)
    comp = compare_reports(reports)
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / "comparison"
    out.mkdir(parents=True, exist_ok=True)
    write_csv(comp.rows, COMPARISON_COLUMNS, out / "comparison.csv")
    (out / "comparison.json").write_text(json.dumps(comp.to_dict(), indent=2, sort_keys=True) + "\n")
    for u in comp.unpaired:
        print(f"unpaired: {u}")
    print(f"comparison: {out / 'comparison.csv'} ({len(comp.rows)} rows, {len(comp.unpaired)} unpaired)")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    _, test = load_dataset(cfg)
    net = load_checkpoint(args.checkpoint)
    print(json.dumps({"checkpoint_hash": checkpoint_hash(net), "dataset_hash": test.id,
                      "test_accuracy": accuracy(net, test)}, sort_keys=True))
    return EXIT_OK


def cmd_probe(args) -> int:
    net = load_checkpoint(args.checkpoint)
    seed = args.seed if args.seed is not None else 0
    train, test = split_train_test(gen_synth_vision("transfer", args.n, seed))
    acc = linear_probe_transfer(net, train, test, epochs=args.epochs, seed=seed)
    print(json.dumps({"checkpoint_hash": checkpoint_hash(net), "dataset_hash": train.id,
                      "probe_accuracy": acc}, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    common.add_argument("--out", help=f"output root (default: config output_dir, ${OUT_ENV}, ./runs)")
    common.add_argument("--threads", type=int, help="cap BLAS/OpenMP threads")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sftnkit", description="Student-aware teacher training and distillation.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn, helptext in [("train-teacher", cmd_train_teacher, "train teachers for every seed"),
                               ("distill", cmd_distill, "distill students from saved teachers"),
                               ("sweep", cmd_sweep, "teacher + KD student per loss-axis value"),
                               ("eval", cmd_eval, "test accuracy of a checkpoint")]:
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--config", required=True)
        sp.set_defaults(func=fn)
        if name == "sweep":
            sp.add_argument("--axis", required=True, choices=SWEEP_AXES)
            sp.add_argument("--values", nargs="*", default=[], help="numbers, or branch sets like 1 2 1+2")
        if name == "eval":
            sp.add_argument("--checkpoint", required=True)
    sp = sub.add_parser("report", parents=[common], help="compare standard and student-aware runs")
    sp.add_argument("runs", nargs="+", help="run directories or report files")
    sp.set_defaults(func=cmd_report)
    sp = sub.add_parser("probe", parents=[common], help="linear-probe transfer of a checkpoint's features")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--n", type=int, default=1200)
    sp.add_argument("--epochs", type=int, default=30)
    sp.set_defaults(func=cmd_probe)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    limits = threadpool_limits(args.threads) if args.threads else nullcontext()
    try:
        with limits, warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except (ConfigValidationError, MissingCheckpointError, CheckpointError, ArchitectureError, DatasetError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
