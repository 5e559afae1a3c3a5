"""Command-line front end: ``dkel train | mcsim | gradcheck | collapse-demo``.

Exit codes: 0 success, 1 failed check, 2 invalid configuration or usage,
3 training aborted by the collapse monitor.
"""
from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import ExperimentConfig, load_config, with_updates
from .errors import ConfigurationError, DKELError, TrainingAborted
from .gradcheck import format_report, run_gradcheck
from .mcsim import run_simulation, write_gap_csv
from .network import MultiPeerNetwork, save_parameters
from .trainer import (
    TrainConfig, ablation_arms, collapse_monitor, first_collapse, make_dataset,
    run_training, weight_decay_only_run, write_metrics_csv,
)

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_COLLAPSE = 0, 1, 2, 3
SUMMARY_COLUMNS = ("arm", "seed", "status", "epochs_run", "acc_teacher_ensemble", "acc_student_mean", "norm_student")


def _prepare_out(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump())
    return out


# --------------------------------------------------------------------------- train

def _train_job(job):
    """Run one (arm, seed) training job and write its artifacts; returns a summary row."""
    exp, tcfg, out = job
    out = Path(out)
    tag = f"{tcfg.arm_name}_seed{tcfg.seed}"
    data = make_dataset(exp.data)
    history = []

    def watch(metrics):
        history.append(metrics)
        if exp.abort_on_collapse and collapse_monitor(history, exp.collapse.window, exp.collapse.threshold) == "collapsing":
            raise TrainingAborted(f"collapse monitor fired at epoch {metrics.epoch}",
                                  diagnostics={"epoch": metrics.epoch, "norm_student": metrics.norm_student})

    status = "ok"
    try:
        result = run_training(tcfg, data, exp.network_config(), on_epoch=watch)
        save_parameters(result.student, out / f"student_{tag}.params")
        save_parameters(result.teacher, out / f"teacher_{tag}.params")
    except TrainingAborted as exc:
        status = f"aborted: {exc}"
    write_metrics_csv(out / f"metrics_{tag}.csv", history)
    last = history[-1] if history else None
    return {
        "arm": tcfg.arm_name, "seed": tcfg.seed, "status": status, "epochs_run": len(history),
        "acc_teacher_ensemble": repr(last.acc_teacher_ensemble) if last else "",
        "acc_student_mean": repr(float(np.mean(last.acc_student))) if last else "",
        "norm_student": repr(last.norm_student) if last else "",
    }


def _pool_map(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def cmd_train(cfg: ExperimentConfig) -> int:
    out = _prepare_out(cfg)
    arms = ablation_arms(cfg.train, cfg.ablation) if cfg.ablation else [cfg.train]
    jobs = [(cfg, replace(arm, seed=s), str(out)) for arm in arms for s in cfg.train_seeds()]
    rows = _pool_map(_train_job, jobs, cfg.workers)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, SUMMARY_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['arm']:<20} seed={r['seed']:<3} {r['status']:<8} "
              f"teacher-ensemble acc={r['acc_teacher_ensemble'] or 'n/a'}")
    return EXIT_COLLAPSE if any(r["status"] != "ok" for r in rows) else EXIT_OK


# --------------------------------------------------------------------------- mcsim

def cmd_mcsim(cfg: ExperimentConfig) -> int:
    out = _prepare_out(cfg)
    curves = run_simulation(cfg.sim, workers=cfg.workers)
    write_gap_csv(out / "gaps.csv", curves)
    last = cfg.sim.epochs - 1
    for method, curve in curves.items():
        print(f"{method:<5} final gap {curve.mean[last]:.5f} +/- {curve.stderr[last]:.5f}")
    return EXIT_OK


# --------------------------------------------------------------------------- gradcheck

def cmd_gradcheck(points: int = 10, seed: int = 0) -> int:
    results = run_gradcheck(points=points, seed=seed)
    print(format_report(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_FAILED
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# --------------------------------------------------------------------------- collapse demo

NORM_COLUMNS = ("arm", "seed", "epoch", "norm_student", "norm_teacher", "mean_abs_logit", "monitor")
STRESS_COLUMNS = ("step", "norm_student", "ratio", "mean_abs_logit", "monitor")


def collapse_arms(cfg: ExperimentConfig):
    """(name, TrainConfig, ExperimentConfig) for the coupled and decoupled arms."""
    c = cfg.collapse
    base = replace(cfg.train, epochs=c.epochs)
    coupled = with_updates(cfg, network={"init_scale": c.coupled_init_scale})
    return [
        ("coupled", replace(base, method="pcl", weight_decay=c.coupled_weight_decay), coupled),
        ("dkel", replace(base, method="dkel"), cfg),
    ]


def stress_run(cfg: ExperimentConfig, keep_trajectory: bool = False):
    """Zero-gradient weight-decay run on a tiny-init network."""
    c = cfg.collapse
    net_cfg = replace(cfg.network_config(), init_scale=c.stress_init_scale)
    net = MultiPeerNetwork(net_cfg, seed=cfg.train.seed)
    x = make_dataset(cfg.data).x_val
    return weight_decay_only_run(net, x, c.stress_steps, c.stress_lr, c.stress_weight_decay, keep_trajectory)


def _collapse_job(job):
    name, tcfg, exp, seed = job
    tcfg = replace(tcfg, seed=seed)
    result = run_training(tcfg, make_dataset(exp.data), exp.network_config())
    return name, seed, result.history


def cmd_collapse_demo(cfg: ExperimentConfig) -> int:
    out = _prepare_out(cfg)
    c = cfg.collapse
    jobs = [(name, tcfg, exp, s) for name, tcfg, exp in collapse_arms(cfg) for s in c.seeds]
    runs = _pool_map(_collapse_job, jobs, cfg.workers)

    norm_rows = []
    verdicts = {}
    for name, seed, history in runs:
        write_metrics_csv(out / f"metrics_collapse_{name}_seed{seed}.csv", history)
        for i, m in enumerate(history):
            state = collapse_monitor(history[: i + 1], c.window, c.threshold)
            norm_rows.append([name, seed, m.epoch, repr(m.norm_student), repr(m.norm_teacher),
                              repr(m.mean_abs_logit), state])
        verdicts.setdefault(name, []).append(first_collapse(history, c.window, c.threshold))
    with open(out / "collapse_norms.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(NORM_COLUMNS)
        w.writerows(norm_rows)

    probes, _ = stress_run(cfg)
    with open(out / "collapse_stress.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STRESS_COLUMNS)
        for i, p in enumerate(probes):
            ratio = "" if i == 0 else repr(p.norm_student / probes[i - 1].norm_student)
            state = collapse_monitor(probes[: i + 1], c.window, c.threshold)
            w.writerow([i, repr(p.norm_student), ratio, repr(p.mean_abs_logit), state])

    for name, firsts in verdicts.items():
        fired = sum(f is not None for f in firsts)
        detail = ", ".join("-" if f is None else f"epoch {f}" for f in firsts)
        print(f"arm {name:<8} monitor fired in {fired}/{len(firsts)} seeds ({detail})")
    stress_state = collapse_monitor(probes, c.window, c.threshold)
    print(f"zero-gradient stress: {c.stress_steps} steps, expected ratio {1 - c.stress_lr * c.stress_weight_decay!r}, "
          f"final norm ratio {probes[-1].norm_student / probes[0].norm_student:.6f}, monitor {stress_state}")
    return EXIT_OK


# --------------------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dkel", description="Decoupled-teacher online distillation experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *flags):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="seed for training and simulation")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, help="process-pool size")
        if "epochs" in flags:
            p.add_argument("--epochs", type=int, help="epochs (training or simulation)")
        p.add_argument("overrides", nargs="*", metavar="KEY=VALUE", help="dotted config overrides, e.g. train.lr=0.05")

    p = sub.add_parser("train", help="train one method or an ablation sweep")
    common(p, "epochs")
    p.add_argument("--method", choices=("dkel", "pcl", "independent"))
    p.add_argument("--ablation", help="comma-separated terms added to independent peers, e.g. dk,ek")
    p.add_argument("--seeds", help="comma-separated list of seeds")

    p = sub.add_parser("mcsim", help="Monte Carlo geometric simulation")
    common(p, "epochs")
    p.add_argument("--trials", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference audit of all primitives and losses")
    p.add_argument("--points", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("collapse-demo", help="coupled vs decoupled collapse demonstration")
    common(p, "epochs")
    return parser


def _flag_overrides(args) -> List[str]:
    ov = []
    if args.seed is not None:
        ov += [f"train.seed={args.seed}", f"sim.seed={args.seed}"]
    if args.out is not None:
        ov.append(f"out={args.out}")
    if args.workers is not None:
        ov.append(f"workers={args.workers}")
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        key = {"train": "train.epochs", "mcsim": "sim.epochs", "collapse-demo": "collapse.epochs"}[args.command]
        ov.append(f"{key}={epochs}")
    if getattr(args, "method", None):
        ov.append(f"train.method={args.method}")
    if getattr(args, "ablation", None):
        ov.append(f"ablation=[{args.ablation}]")
    if getattr(args, "seeds", None):
        ov.append(f"seeds=[{args.seeds}]")
    if getattr(args, "trials", None) is not None:
        ov.append(f"sim.trials={args.trials}")
    return ov


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gradcheck":
        return cmd_gradcheck(args.points, args.seed)
    try:
        cfg = load_config(args.config, list(args.overrides) + _flag_overrides(args))
    except ConfigurationError as exc:
        print(f"dkel: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "mcsim":
            return cmd_mcsim(cfg)
        return cmd_collapse_demo(cfg)
    except ConfigurationError as exc:
        print(f"dkel: invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DKELError as exc:
        print(f"dkel: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
