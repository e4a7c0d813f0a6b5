"""Command-line entry point: ``localbatch run | sweep | verify``.

Exit codes: 0 success, 1 run failure (divergence, I/O), 2 config error,
3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ENV_PREFIX, dumps_config, parse_config
from .engine import run_training
from .errors import ConfigError, LocalBatchError
from .metrics import run_summary, save_snapshots, write_metrics
from .verify import verify_run, write_report

__all__ = ["main", "cmd_run", "cmd_sweep", "cmd_verify", "EXIT_OK", "EXIT_RUN", "EXIT_CONFIG", "EXIT_VERIFY"]

EXIT_OK, EXIT_RUN, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2, 3

AGGREGATE_COLUMNS = ("schedule", "H", "eta", "seed", "status", "rounds", "steps", "samples", "time_s",
                     "mean_batch_size", "final_loss", "dir")


def _report_config_error(exc: ConfigError):
    print("config error:", file=sys.stderr)
    for key, line, msg in exc.errors:
        where = f" (line {line})" if line is not None else ""
        print(f"  {key}{where}: {msg}", file=sys.stderr)


def _cli_overrides(overrides, out=None, seed=None):
    extra = list(overrides or [])
    if seed is not None:
        extra.append(f"run.seed={int(seed)}")
    if out is not None:
        extra.append(f"output.dir={json.dumps(str(out))}")
    return extra


def _execute(cfg, out_dir: Path) -> dict:
    """Run one experiment and write its outputs; returns the summary."""
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.toml").write_text(dumps_config(cfg))
    result = run_training(cfg.run)
    # Records gathered before a divergence are still written.
    write_metrics(out_dir / "metrics.csv", result.records, wallclock=cfg.output.wallclock)
    if result.snapshots is not None:
        save_snapshots(out_dir / "snapshots.npz", result.snapshots)
    summary = run_summary(result, cfg.run)
    (out_dir / "summary.jsonl").write_text(json.dumps(summary, sort_keys=True) + "\n")
    return summary


def cmd_run(config_path, overrides=(), *, out=None, seed=None) -> int:
    try:
        cfg = parse_config(config_path, _cli_overrides(overrides, out, seed))
    except ConfigError as exc:
        _report_config_error(exc)
        return EXIT_CONFIG
    out_dir = Path(cfg.output.dir)
    try:
        summary = _execute(cfg, out_dir)
    except ConfigError as exc:
        _report_config_error(exc)
        return EXIT_CONFIG
    except (LocalBatchError, ArithmeticError, ValueError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    print(f"{summary['status']}: {summary['rounds']} rounds, {summary['samples_processed']} samples, "
          f"final loss {summary['final_loss']}, mean batch {summary['mean_batch_size']:.6g} -> {out_dir}")
    if summary["status"] != "completed":
        print(summary["message"], file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


def _fmt(v):
    return "%.17g" % v if isinstance(v, float) else str(v)


def _dir_name(point):
    parts = []
    for key, value in point:
        short = {"run.local_steps": "H", "controller.eta": "eta", "run.seed": "seed"}.get(key, key.split(".")[-1])
        parts.append(f"{short}{value}")
    return "_".join(parts).replace("/", "-").replace(" ", "")


def _sweep_job(args):
    config_path, overrides, point, root = args
    name = _dir_name(point)
    row = {k: "" for k in AGGREGATE_COLUMNS}
    row["dir"] = name
    values = dict(point)
    row["H"], row["eta"], row["seed"] = values.get("run.local_steps", ""), values.get("controller.eta", ""), values.get("run.seed", "")
    point_ovs = [f"{k}={v}" for k, v in point]
    point_ovs.append(f"output.dir={json.dumps(str(Path(root) / name))}")
    try:
        cfg = parse_config(config_path, list(overrides) + point_ovs)
    except ConfigError as exc:
        row["status"] = "config_error"
        row["final_loss"] = "; ".join(f"{k}: {m}" for k, _, m in exc.errors)
        return row
    ctl = cfg.run.controller
    row["H"], row["seed"] = cfg.run.local_steps, cfg.run.seed
    row["eta"] = "" if ctl.kind == "constant" else _fmt(ctl.eta) if not isinstance(ctl.eta, tuple) else ";".join(map(_fmt, ctl.eta))
    row["schedule"] = f"constant_b{ctl.b0}" if ctl.kind == "constant" else ctl.kind
    try:
        s = _execute(cfg, Path(cfg.output.dir))
    except (LocalBatchError, ArithmeticError, ValueError, OSError) as exc:
        row["status"] = "failed"
        row["final_loss"] = str(exc)
        return row
    row["status"] = "ok" if s["status"] == "completed" else "failed"
    row["rounds"] = s["rounds"]
    row["steps"] = s["local_steps_total"]
    row["samples"] = s["samples_processed"]
    row["time_s"] = _fmt(s["wallclock_s"]) if cfg.output.wallclock else ""
    row["mean_batch_size"] = _fmt(s["mean_batch_size"]) if s["mean_batch_size"] is not None else ""
    row["final_loss"] = _fmt(s["final_loss"]) if isinstance(s["final_loss"], float) else s["final_loss"] or ""
    return row


def cmd_sweep(config_path, overrides=(), *, H=None, eta=None, seeds=None, grid=(), out=None, jobs: int = 1) -> int:
    """Run the Cartesian product of the given value lists; one aggregate row per run."""
    try:
        base = parse_config(config_path, _cli_overrides(overrides, out))
    except ConfigError as exc:
        _report_config_error(exc)
        return EXIT_CONFIG
    axes = []
    if H:
        axes.append(("run.local_steps", list(H)))
    if eta:
        axes.append(("controller.eta", list(eta)))
    if seeds:
        axes.append(("run.seed", list(seeds)))
    for axis in grid:
        if "=" not in axis:
            print(f"bad grid axis {axis!r}; expected section.key=v1,v2", file=sys.stderr)
            return EXIT_CONFIG
        key, values = axis.split("=", 1)
        axes.append((key.strip(), [v.strip() for v in values.split(",") if v.strip()]))
    if not axes or any(not vals for _, vals in axes):
        print("empty sweep grid", file=sys.stderr)
        return EXIT_CONFIG

    root = Path(base.output.dir)
    root.mkdir(parents=True, exist_ok=True)
    points = [tuple(zip([k for k, _ in axes], combo)) for combo in itertools.product(*[v for _, v in axes])]
    jobs_args = [(config_path, list(overrides or []), p, str(root)) for p in points]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_job, jobs_args))
    else:
        rows = [_sweep_job(a) for a in jobs_args]

    with open(root / "aggregate.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=AGGREGATE_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{len(rows)} runs, {failed} failed -> {root / 'aggregate.csv'}")
    return EXIT_RUN if failed else EXIT_OK


def cmd_verify(metrics_dir, *, report=None) -> int:
    """Verify one run directory, or every run directory directly below it."""
    root = Path(metrics_dir)
    if (root / "metrics.csv").exists():
        targets = [("", root)]
    else:
        targets = [(p.name + "/", p) for p in sorted(root.iterdir()) if (p / "metrics.csv").exists()] if root.is_dir() else []
    if not targets:
        print(f"no metrics.csv found under {root}", file=sys.stderr)
        return EXIT_VERIFY
    checks = []
    for prefix, path in targets:
        for c in verify_run(path):
            c.name = prefix + c.name
            checks.append(c)
    report = Path(report) if report else root / "report.jsonl"
    write_report(report, checks)
    for c in checks:
        print(f"{c.status:4s}  {c.name}  {c.detail}")
    failed = [c for c in checks if not c.ok]
    print(f"{len(checks)} checks, {len(failed)} failed -> {report}")
    return EXIT_VERIFY if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="localbatch",
        description="Local SGD with adaptive local batch sizes on finite-sum problems.",
        epilog=f"Environment overrides: {ENV_PREFIX}SECTION__KEY=value (applied before --set).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="TOML experiment config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("--out", help="output directory (overrides output.dir)")

    p_run = sub.add_parser("run", help="run one experiment")
    common(p_run)
    p_run.add_argument("--seed", type=int, help="override run.seed")

    p_sweep = sub.add_parser("sweep", help="run a grid of experiments")
    common(p_sweep)
    p_sweep.add_argument("--H", type=int, nargs="+", help="local step counts")
    p_sweep.add_argument("--eta", type=float, nargs="+", help="test constants")
    p_sweep.add_argument("--seeds", type=int, nargs="+", help="seeds")
    p_sweep.add_argument("--grid", action="append", default=[], metavar="SECTION.KEY=V1,V2",
                         help="extra grid axis (repeatable)")
    p_sweep.add_argument("--jobs", type=int, default=1, help="runs executed in parallel")

    p_verify = sub.add_parser("verify", help="check a run or sweep directory")
    p_verify.add_argument("dir", help="run directory, or a sweep directory of runs")
    p_verify.add_argument("--report", help="report path (default DIR/report.jsonl)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config, args.overrides, out=args.out, seed=args.seed)
    if args.command == "sweep":
        return cmd_sweep(args.config, args.overrides, H=args.H, eta=args.eta, seeds=args.seeds,
                         grid=args.grid, out=args.out, jobs=args.jobs)
    return cmd_verify(args.dir, report=args.report)


if __name__ == "__main__":
    sys.exit(main())
