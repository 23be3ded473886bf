"""Command line entry point: ``himoe {verify,train,compare,sweep,report}``.

Exit status: 0 on success, 1 on a property violation or a diverged run,
2 on usage, configuration or I/O errors.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, LabConfig, default_config, format_config, load_config
from .harness import (BASELINE_VARIANTS, SUMMARY_COLUMNS, SWEEP_COLUMNS, compare_baselines,
                      generate_synthetic, pareto_sweep, rows_to_csv, train)
from .theory import report_json, run_all

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2

HEATMAP_COLUMNS = ("step", "expert", "activation_fraction")
PARETO_COLUMNS = ("lambda_intra", "lambda_inter", "final_task_loss", "final_expert_cv",
                  "final_collision_mi")


class UsageError(Exception):
    pass


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def parse_grid(text: str) -> list[tuple[float, float]]:
    """``"a,b,... x c,d,..."`` -> every (lambda_intra, lambda_inter) pair."""
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise UsageError(f"--grid must look like 'a,b x c,d', got {text!r}")
    try:
        intra, inter = ([float(v) for v in p.split(",") if v.strip()] for p in parts)
    except ValueError:
        raise UsageError(f"--grid has a non-numeric entry: {text!r}") from None
    if not intra or not inter:
        raise UsageError("--grid needs at least one value on each side of 'x'")
    if min(intra + inter) < 0:
        raise UsageError("lambda values must be non-negative")
    return [(a, b) for a in intra for b in inter]


def _lab_config(args) -> LabConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {path!r} is not writable: {exc}") from None
    return out


def cmd_verify(args) -> int:
    out = _out_dir(args.out)
    seed = 0 if args.seed is None else args.seed
    reports = run_all(samples=args.samples, seed=seed)
    (out / "verify_report.json").write_text(report_json(reports, seed, args.samples))
    for r in reports:
        status = "ok" if r.passed else "FAILED"
        print(f"{r.property_name:32s} {status:6s} samples={r.samples} "
              f"violations={r.violations} max={r.max_violation_magnitude:.3e}")
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAILED


def cmd_train(args) -> int:
    cfg = _lab_config(args)
    out = _out_dir(args.out)
    (out / "config.cfg").write_text(format_config(cfg))
    record = train(cfg.train, generate_synthetic(cfg.data))
    record.write(out)
    if record.aborted:
        print(f"run diverged at step {record.aborted_at}", file=sys.stderr)
        return EXIT_FAILED
    f = record.final
    print(f"task_loss={f['task_loss']:.6f} expert_cv={f['expert_cv']:.6f} "
          f"coverage={f['coverage_mean']:.4f} I2={f['collision_MI']:.6f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _lab_config(args)
    out = _out_dir(args.out)
    (out / "config.cfg").write_text(format_config(cfg))
    rows, records = compare_baselines(cfg.train, generate_synthetic(cfg.data), BASELINE_VARIANTS)
    for name, rec in records.items():
        rec.write(out / "runs" / name)
    (out / "comparison.csv").write_text(rows_to_csv(rows, SUMMARY_COLUMNS))
    sys.stdout.write(rows_to_csv(rows, SUMMARY_COLUMNS))
    return EXIT_FAILED if any(r.aborted for r in records.values()) else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _lab_config(args)
    grid = parse_grid(args.grid)
    out = _out_dir(args.out)
    (out / "config.cfg").write_text(format_config(cfg))
    seeds = [cfg.train.seed + k for k in range(args.repeats)]
    rows = pareto_sweep(cfg.train, grid, generate_synthetic(cfg.data), seeds=seeds)
    text = rows_to_csv(rows, SWEEP_COLUMNS)
    (out / "sweep.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_FAILED if any(r["aborted_runs"] for r in rows) else EXIT_OK


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def heatmap_rows(activations_csv: Path) -> list[dict]:
    """Per-step activation fraction of every expert (count / selections in that step)."""
    rows = []
    for rec in _read_csv(activations_csv):
        step = int(rec.pop("step"))
        counts = [int(rec[k]) for k in rec]
        total = sum(counts)
        for e, c in enumerate(counts):
            rows.append({"step": step, "expert": e,
                         "activation_fraction": c / total if total else 0.0})
    return rows


def pareto_rows_from_sweep(sweep_csv: Path) -> list[dict]:
    return [{k: float(r[k]) if r[k] else float("nan") for k in PARETO_COLUMNS}
            for r in _read_csv(sweep_csv)]


def pareto_rows_from_run(summary_json: Path) -> list[dict]:
    doc = json.loads(summary_json.read_text())
    cfg, final = doc["config"], doc["final"]
    if not final:
        return []
    return [{"lambda_intra": float(cfg["lambda_intra"]), "lambda_inter": float(cfg["lambda_inter"]),
             "final_task_loss": final["task_loss"], "final_expert_cv": final["expert_cv"],
             "final_collision_mi": final["collision_MI"]}]


def cmd_report(args) -> int:
    src = Path(args.input)
    if not src.is_dir():
        raise UsageError(f"input directory {args.input!r} does not exist")
    acts, summary, sweep = src / "activations.csv", src / "summary.json", src / "sweep.csv"
    have_run = acts.is_file() and summary.is_file()
    if not have_run and not sweep.is_file():
        absent = [str(p) for p in (acts, summary, sweep) if not p.is_file()]
        raise UsageError("no run record or sweep table found; absent: " + ", ".join(absent))
    out = _out_dir(args.out)
    written = []
    if have_run:
        (out / "heatmap.csv").write_text(rows_to_csv(heatmap_rows(acts), HEATMAP_COLUMNS))
        written.append("heatmap.csv")
    points = pareto_rows_from_sweep(sweep) if sweep.is_file() else pareto_rows_from_run(summary)
    (out / "pareto_points.csv").write_text(rows_to_csv(points, PARETO_COLUMNS))
    written.append("pareto_points.csv")
    print("wrote " + ", ".join(str(out / w) for w in written))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="himoe", description="Hierarchical MoE routing lab.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, out_default=None):
        if config:
            sp.add_argument("--config", help="key = value config file (defaults if omitted)")
        sp.add_argument("--out", required=out_default is None, default=out_default,
                        help="output directory")
        sp.add_argument("--seed", type=_u64, help="override the run seed")

    v = sub.add_parser("verify", help="numeric checks of the routing theorems")
    common(v, config=False, out_default=".")
    v.add_argument("--samples", type=_positive, default=10_000, help="samples per property")
    v.set_defaults(func=cmd_verify)

    t = sub.add_parser("train", help="train one configuration")
    common(t)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compare", help="flat / loss-free bias / grouped / hi_moe on shared data")
    common(c)
    c.set_defaults(func=cmd_compare)

    s = sub.add_parser("sweep", help="lambda_intra x lambda_inter grid")
    common(s)
    s.add_argument("--grid", default="0,0.1,0.4 x 0,0.05,0.2",
                   help="'a,b,... x c,d,...' lambda_intra values x lambda_inter values")
    s.add_argument("--repeats", type=_positive, default=1,
                   help="seeds per grid point (seed, seed+1, ...); medians are reported")
    s.set_defaults(func=cmd_sweep)

    r = sub.add_parser("report", help="plot-ready CSVs from a run or sweep directory")
    r.add_argument("--input", required=True, help="run directory or sweep output directory")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"himoe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"himoe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
