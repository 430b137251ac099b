"""Command-line experiment runner.

    gfl-lab <gradcheck|minima|disturb|train|eval|sweep>
            [--config file.json] [--set key=value ...] [--out dir]

One JSON config drives everything; ``--set`` applies dotted-path overrides
before validation, ``--out`` (or the ``GFL_LAB_OUT`` environment variable)
overrides the output directory and nothing else is read from the
environment. Every subcommand writes its tables as CSV plus a
``manifest.json`` capturing the exact config, library version, wall-clock
time and output list; metric CSVs are byte-identical across re-runs of the
same config.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, apply_override
from .detector import save_checkpoint
from .distrib import Support, disturbance_experiment, minimize_dfl
from .geometry import label_histogram
from .gradcheck import run_all_checks
from .losses import (
    check_specialization,
    generalized_focal_loss_batch,
    generalized_focal_minimizer,
    minimize_qfl,
)
from .seeding import child_rng
from .studies import (
    background_quality_max,
    distribution_rows,
    evaluate_model,
    label_stats,
    run_training,
    scatter_rows,
)
from .synth import save_scenes

OUT_ENV_VAR = "GFL_LAB_OUT"


def _write_csv(path: Path, header: list[str], rows: list[tuple]) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")


def _write_manifest(out_dir: Path, config: ExperimentConfig, started: float, outputs: list[str], metrics: dict) -> None:
    doc = {
        "run_name": config.run_name,
        "version": __version__,
        "config": config.to_dict(),
        "wall_seconds": time.time() - started,
        "outputs": sorted(outputs),
        "metrics": metrics,
    }
    tmp = out_dir / "manifest.json.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, out_dir / "manifest.json")


def _load_config(args: argparse.Namespace) -> ExperimentConfig:
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    else:
        data = ExperimentConfig().to_dict()
    for assignment in args.set or []:
        apply_override(data, assignment)
    config = ExperimentConfig.from_dict(data)
    out_dir = config.out_dir
    if os.environ.get(OUT_ENV_VAR):
        out_dir = os.environ[OUT_ENV_VAR]
    if args.out:
        out_dir = args.out
    if out_dir != config.out_dir:
        data = config.to_dict()
        data["out_dir"] = out_dir
        config = ExperimentConfig.from_dict(data)
    return config


def _prepare_out(config: ExperimentConfig) -> Path:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = _prepare_out(config)
    started = time.time()
    reports = run_all_checks(seed=config.seed, inject_error=args.inject_gradient_error)
    rows = [(r.name, r.checks, r.max_rel_err, r.tol, r.passed) for r in reports]
    _write_csv(out / "gradcheck.csv", ["name", "checks", "max_rel_err", "tol", "passed"], rows)
    failures = [r for r in reports if not r.passed]
    _write_manifest(
        out,
        config,
        started,
        ["gradcheck.csv"],
        {"suites": len(reports), "failures": len(failures)},
    )
    for r in reports:
        status = "ok" if r.passed else "FAIL"
        print(f"{status:4s} {r.name}: max rel err {r.max_rel_err:.3e} (tol {r.tol})")
    return 1 if failures else 0


def _cmd_minima(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = _prepare_out(config)
    started = time.time()
    rows = []

    rng = child_rng(config.seed, "minima.qfl")
    targets = rng.uniform(0.0, 1.0, size=100)
    fit = minimize_qfl(targets, beta=config.train.beta)
    qfl_err = float(np.max(np.abs(fit["probs"] - targets)))
    rows.append(("qfl_descent_max_err", qfl_err, 1e-4, qfl_err < 1e-4))

    support = Support(y0=0.0, n=config.train.support_n, delta=config.train.support_delta)
    rng = child_rng(config.seed, "minima.dfl")
    dfl_targets = rng.uniform(support.y0, support.y_max, size=100)
    dfit = minimize_dfl(dfl_targets, support)
    clamped = np.clip(dfl_targets, support.y0, support.y_max - 1e-6)
    dfl_err = float(np.max(np.abs(dfit["decoded"] - clamped)))
    rows.append(("dfl_descent_max_err", dfl_err, 1e-4, dfl_err < 1e-4))
    from .distrib import project_targets

    idx, _, _ = project_targets(dfl_targets, support)
    take = np.arange(100)
    off_mass = 1.0 - (dfit["probs"][take, idx] + dfit["probs"][take, idx + 1])
    dfl_mass = float(np.max(off_mass))
    rows.append(("dfl_descent_max_off_mass", dfl_mass, 1e-3, dfl_mass < 1e-3))

    rng = child_rng(config.seed, "minima.gfl")
    beaten = 0
    nodes = 20
    candidates = 100_000
    for _ in range(nodes):
        y_left = float(rng.uniform(-4, 4))
        y_right = y_left + float(rng.uniform(0.5, 5.0))
        y = float(rng.uniform(y_left, y_right))
        beta = float(rng.choice([0.0, 1.0, 2.0]))
        p_star, _ = generalized_focal_minimizer(y_left, y_right, y)
        cand = rng.uniform(0.0, 1.0, size=candidates)
        cand_vals, _, _ = generalized_focal_loss_batch(
            np.full(candidates, y_left),
            np.full(candidates, y_right),
            cand,
            1.0 - cand,
            np.full(candidates, y),
            beta,
        )
        star_vals, _, _ = generalized_focal_loss_batch(
            np.asarray([y_left]),
            np.asarray([y_right]),
            np.asarray([p_star]),
            np.asarray([1.0 - p_star]),
            np.asarray([y]),
            beta,
        )
        if float(star_vals[0]) <= float(np.min(cand_vals)):
            beaten += 1
    frac = beaten / nodes
    rows.append(("gfl_closed_form_beats_candidates", frac, 1.0, frac >= 1.0))

    disc = check_specialization(10_000, seed=config.seed + 7)
    rows.append(("specialization_max_discrepancy", disc, 1e-12, disc < 1e-12))

    _write_csv(out / "minima.csv", ["check", "value", "threshold", "passed"], rows)
    _write_manifest(out, config, started, ["minima.csv"], {"checks": len(rows)})
    ok = all(bool(r[3]) for r in rows)
    for r in rows:
        print(f"{'ok' if r[3] else 'FAIL':4s} {r[0]}: {r[1]:.3e}")
    return 0 if ok else 1


def _cmd_disturb(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = _prepare_out(config)
    started = time.time()
    rows = disturbance_experiment(seed=config.seed)
    csv_rows = [
        (r.representation, r.target, r.median_error, r.trials, r.seed, r.converged) for r in rows
    ]
    _write_csv(
        out / "disturbance.csv",
        ["representation", "target", "median_error", "trials", "seed", "converged"],
        csv_rows,
    )
    _write_manifest(out, config, started, ["disturbance.csv"], {"cells": len(rows)})
    for r in rows:
        print(f"{r.representation:8s} target {r.target}: median error {r.median_error:.5f}")
    return 0


def _final_loss(curve: list[dict]) -> float:
    window = curve[-100:] if len(curve) >= 100 else curve
    return float(np.mean([row["total"] for row in window])) if window else float("nan")


def _cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = _prepare_out(config)
    started = time.time()
    study = run_training(config)
    save_scenes(out / "train_dataset.jsonl", config.scene_spec("train"), study.train_scenes)
    _write_csv(
        out / "losses.csv",
        ["iteration", "total", "cls", "box", "dist", "n_pos"],
        [
            (r["iteration"], r["total"], r["cls"], r["box"], r["dist"], r["n_pos"])
            for r in study.result.curve
        ],
    )
    save_checkpoint(out / "checkpoint.json", study.result.params)
    final = _final_loss(study.result.curve)
    _write_manifest(
        out,
        config,
        started,
        ["train_dataset.jsonl", "losses.csv", "checkpoint.json"],
        {"final_loss": final},
    )
    print(f"trained {config.train.variant}/{config.train.regressor}: final loss {final:.4f}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = _prepare_out(config)
    started = time.time()
    study = run_training(config)
    result, _, _ = evaluate_model(study)

    metrics_rows: list[tuple] = [("mean_ap", result.mean_ap)]
    for thr in sorted(result.ap_per_iou):
        metrics_rows.append((f"ap_{thr:.2f}", result.ap_per_iou[thr]))
    final = _final_loss(study.result.curve)
    metrics_rows.append(("final_loss", final))
    bg_quality = background_quality_max(study)
    metrics_rows.append(("background_quality_max", bg_quality))
    _write_csv(out / "metrics.csv", ["metric", "value"], metrics_rows)

    _write_csv(
        out / "losses.csv",
        ["iteration", "total", "cls", "box", "dist", "n_pos"],
        [
            (r["iteration"], r["total"], r["cls"], r["box"], r["dist"], r["n_pos"])
            for r in study.result.curve
        ],
    )
    _write_csv(
        out / "scatter.csv",
        ["scene", "point", "class_score", "quality_score"],
        scatter_rows(study),
    )
    stats = label_stats(study)
    hist_rows: list[tuple] = []
    for name in ("centerness", "iou", "offset_targets"):
        hist = label_histogram(stats[name], bins=32)
        for left, right, count in hist.to_rows():
            hist_rows.append((name, left, right, count))
    _write_csv(out / "histograms.csv", ["name", "bin_left", "bin_right", "count"], hist_rows)
    _write_csv(
        out / "dist_dump.csv",
        ["scene", "point", "side", "knot_index", "knot_value", "prob"],
        distribution_rows(study),
    )
    save_checkpoint(out / "checkpoint.json", study.result.params)
    outputs = [
        "metrics.csv",
        "losses.csv",
        "scatter.csv",
        "histograms.csv",
        "dist_dump.csv",
        "checkpoint.json",
    ]
    _write_manifest(out, config, started, outputs, {"mean_ap": result.mean_ap, "final_loss": final})
    print(f"mean AP {result.mean_ap:.4f} over {len(study.eval_scenes)} eval scenes")
    return 0


SWEEP_AXES: dict[str, tuple[str, list[float]]] = {
    "beta": ("train.beta", [0.0, 1.0, 2.0, 2.5, 4.0]),
    "support_n": ("train.support_n", [12, 14, 16, 18]),
    "support_delta": ("train.support_delta", [0.5, 1.0, 2.0, 4.0]),
}


def _cmd_sweep(args: argparse.Namespace) -> int:
    config = _load_config(args)
    out = _prepare_out(config)
    started = time.time()
    rows: list[tuple] = []
    base = config.to_dict()
    for axis, (path, values) in SWEEP_AXES.items():
        for value in values:
            cell = json.loads(json.dumps(base))
            apply_override(cell, f"{path}={json.dumps(value)}")
            cell_config = ExperimentConfig.from_dict(cell)
            study = run_training(cell_config)
            result, _, _ = evaluate_model(study)
            final = _final_loss(study.result.curve)
            rows.append((axis, value, result.mean_ap, final))
            print(f"sweep {axis}={value}: mean AP {result.mean_ap:.4f}")
    _write_csv(out / "sweep.csv", ["axis", "value", "mean_ap", "final_loss"], rows)
    _write_manifest(out, config, started, ["sweep.csv"], {"cells": len(rows)})
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfl-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    handlers = {
        "gradcheck": _cmd_gradcheck,
        "minima": _cmd_minima,
        "disturb": _cmd_disturb,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "sweep": _cmd_sweep,
    }
    for name, handler in handlers.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (defaults used when omitted)")
        p.add_argument(
            "--set",
            action="append",
            metavar="KEY=VALUE",
            help="dotted-path config override, e.g. train.beta=4",
        )
        p.add_argument("--out", help=f"output directory (beats config and ${OUT_ENV_VAR})")
        if name == "gradcheck":
            p.add_argument(
                "--inject-gradient-error",
                action="store_true",
                help="negative control: bias one analytic gradient so the run must fail",
            )
        p.set_defaults(handler=handler)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
