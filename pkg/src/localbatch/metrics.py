"""Per-round metrics files and run summaries.

``metrics.csv`` has one row per communication round with the columns in
``COLUMNS``. Reals use ``%.17g`` so they read back bit-exactly, missing
values are empty, and ``local_batch_size`` is one integer when all workers
agree or the per-worker sizes joined with ``;`` otherwise. Wall-clock
seconds are left empty unless requested, which keeps repeated runs
byte-identical.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import time_averaged_batch_size
from .engine import Snapshots
from .errors import SchemaError

__all__ = ["COLUMNS", "MetricsRow", "format_metrics", "write_metrics", "read_metrics", "run_summary", "write_summary", "save_snapshots", "load_snapshots"]

COLUMNS = (
    "round",
    "samples_processed",
    "local_batch_size",
    "lr",
    "loss_avg_iterate",
    "grad_norm_sq",
    "variance_estimate",
    "test_statistic",
    "test_passed",
    "wallclock_s",
)


@dataclass(frozen=True)
class MetricsRow:
    round: int
    samples_processed: int
    local_batch_sizes: tuple
    lr: float
    loss: float
    grad_norm_sq: float | None
    variance_estimate: float | None
    test_statistic: float | None
    test_passed: bool | None
    wallclock: float | None


def _real(v):
    if v is None:
        return ""
    return "%.17g" % v


def _sizes(sizes):
    sizes = tuple(int(b) for b in sizes)
    if len(set(sizes)) == 1:
        return str(sizes[0])
    return ";".join(str(b) for b in sizes)


def _row(rec, wallclock):
    return [
        str(rec.round),
        str(rec.samples_processed),
        _sizes(rec.local_batch_sizes),
        _real(rec.lr),
        _real(rec.loss),
        _real(rec.grad_norm_sq),
        _real(rec.variance_estimate),
        _real(rec.test_statistic),
        "" if rec.test_passed is None else str(int(bool(rec.test_passed))),
        _real(rec.wallclock) if wallclock else "",
    ]


def format_metrics(records, *, wallclock: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for rec in records:
        w.writerow(_row(rec, wallclock))
    return buf.getvalue()


def write_metrics(path, records, *, wallclock: bool = False):
    Path(path).write_text(format_metrics(records, wallclock=wallclock))


def _parse(column, text, kind, line):
    if text == "":
        if kind in ("int", "sizes", "real"):
            raise SchemaError(f"line {line}: column {column!r} must not be empty")
        return None
    try:
        if kind == "int":
            return int(text)
        if kind == "sizes":
            sizes = tuple(int(t) for t in text.split(";"))
            if any(b < 1 for b in sizes):
                raise ValueError
            return sizes
        if kind in ("real", "opt_real"):
            return float(text)
        if kind == "bool":
            if text not in ("0", "1"):
                raise ValueError
            return text == "1"
    except ValueError:
        raise SchemaError(f"line {line}: column {column!r} has malformed value {text!r}") from None
    raise AssertionError(kind)


_KINDS = ("int", "int", "sizes", "real", "real", "opt_real", "opt_real", "opt_real", "bool", "opt_real")


def read_metrics(path) -> list:
    """Parse a metrics file, raising SchemaError that names the offending column."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SchemaError(f"cannot read {path}: {exc.strerror or exc}") from None
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise SchemaError(f"{path} is empty")
    header = tuple(rows[0])
    for i, expected in enumerate(COLUMNS):
        if i >= len(header):
            raise SchemaError(f"missing column {expected!r}")
        if header[i] != expected:
            raise SchemaError(f"column {i} is {header[i]!r}, expected {expected!r}")
    if len(header) > len(COLUMNS):
        raise SchemaError(f"unexpected column {header[len(COLUMNS)]!r}")
    out = []
    for line, row in enumerate(rows[1:], 2):
        if len(row) != len(COLUMNS):
            raise SchemaError(f"line {line}: expected {len(COLUMNS)} fields, got {len(row)}")
        vals = [_parse(c, t, k, line) for c, t, k in zip(COLUMNS, row, _KINDS)]
        out.append(MetricsRow(*vals))
    return out


def run_summary(result, config, *, wallclock: bool = True) -> dict:
    """One JSON-serialisable summary of a finished run."""
    recs = result.records
    ctl = config.controller
    summary = {
        "status": result.status,
        "message": result.message,
        "rounds": len(recs),
        "local_steps_total": len(recs) * config.local_steps,
        "samples_processed": recs[-1].samples_processed if recs else 0,
        "sample_budget": config.sample_budget,
        "final_loss": recs[-1].loss if recs else None,
        "final_batch_sizes": list(recs[-1].next_batch_sizes) if recs else None,
        "mean_batch_size": time_averaged_batch_size(recs) if recs else None,
        "workers": config.workers,
        "local_steps": config.local_steps,
        "seed": config.seed,
        "controller": ctl.kind,
        "eta": list(ctl.eta) if isinstance(ctl.eta, tuple) else ctl.eta,
        "communication": dict(result.communication),
        "wallclock_s": result.wallclock if wallclock else None,
    }
    if summary["final_loss"] is not None and not math.isfinite(summary["final_loss"]):
        summary["final_loss"] = str(summary["final_loss"])
    return summary


def write_summary(path, summary: dict):
    with open(path, "a") as fh:
        fh.write(json.dumps(summary, sort_keys=True) + "\n")


def save_snapshots(path, snapshots):
    np.savez(path, x0=snapshots.x0, worker_params=snapshots.as_array(), rounds=np.asarray(snapshots.rounds, dtype=np.int64))


def load_snapshots(path):
    with np.load(path) as z:
        params = z["worker_params"]
        return Snapshots(z["x0"].copy(), [p.copy() for p in params], [int(r) for r in z["rounds"]])
