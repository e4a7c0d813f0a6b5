"""Post-hoc verification of run directories written by ``localbatch run``.

Each check yields one report line ``{name, status, value, tolerance, detail}``
with status ``pass``, ``fail`` or ``skip``. Rate fits use the averaged
iterate at synchronization points rather than a randomly sampled output
iterate; the report says so in the fit's detail.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .analysis import certify_strong_growth, fit_geometric, fit_sublinear, monte_carlo_identity
from .config import parse_config
from .engine import all_reduce_average
from .errors import ConfigError, InsufficientDataError, SchemaError
from .metrics import load_snapshots, read_metrics

__all__ = ["Check", "verify_run", "write_report", "MC_TRIALS", "MC_TOLERANCE"]

MC_TRIALS = 10_000
MC_TOLERANCE = 0.05


@dataclass
class Check:
    name: str
    status: str  # "pass", "fail" or "skip"
    value: object = None
    tolerance: object = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status != "fail"


def _check(name, ok, value=None, tolerance=None, detail=""):
    return Check(name, "pass" if ok else "fail", value, tolerance, detail)


def _skip(name, reason):
    return Check(name, "skip", None, None, reason)


def _per_worker(rows, workers):
    out = []
    for r in rows:
        s = r.local_batch_sizes
        out.append(s * workers if len(s) == 1 else s)
    return np.array(out, dtype=np.int64)


def _read_status(run_dir):
    path = run_dir / "summary.jsonl"
    if not path.exists():
        return None
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    return json.loads(lines[-1]).get("status") if lines else None


def verify_run(run_dir) -> list:
    run_dir = Path(run_dir)
    try:
        rows = read_metrics(run_dir / "metrics.csv")
    except SchemaError as exc:
        return [_check("metrics_schema", False, detail=str(exc))]
    checks = [_check("metrics_schema", True, len(rows), detail=f"{len(rows)} rows")]
    if not rows:
        return checks + [_check("nonempty", False, 0, detail="no rounds recorded")]

    samples = np.array([r.samples_processed for r in rows])
    checks.append(_check("samples_increasing", bool(np.all(np.diff(samples) > 0) and samples[0] > 0),
                         detail="cumulative samples strictly increase"))

    cfg_path = run_dir / "config.toml"
    if not cfg_path.exists():
        checks.append(_skip("config", "no config.toml next to the metrics; config-dependent checks skipped"))
        return checks
    try:
        cfg = parse_config(cfg_path, use_env=False).run
    except ConfigError as exc:
        return checks + [_check("config", False, detail=str(exc))]
    ctl = cfg.controller
    M = cfg.workers
    status = _read_status(run_dir) or "completed"
    sizes = _per_worker(rows, M) if all(len(r.local_batch_sizes) in (1, M) for r in rows) else None

    if status == "completed":
        N = cfg.sample_budget
        ok = samples[-1] >= N and (len(samples) < 2 or samples[-2] < N)
        checks.append(_check("budget_accounting", bool(ok), int(samples[-1]), N,
                             "stops at the first round reaching the budget"))
    else:
        checks.append(_skip("budget_accounting", f"run ended with status {status!r}"))

    if sizes is None:
        checks.append(_check("batch_size_monotone", False, detail="batch size field does not match the worker count"))
    else:
        drops = np.argwhere(np.diff(sizes, axis=0) < 0)
        detail = "per-worker sizes never decrease" if not drops.size else f"size decreases at row {int(drops[0, 0]) + 1}"
        if ctl.kind == "constant":
            ok = bool(np.all(sizes == ctl.b0))
            detail = f"constant size {ctl.b0}" if ok else "size changed under the constant controller"
        else:
            ok = not drops.size
        checks.append(_check("batch_size_monotone", ok, detail=detail))
        cap = cfg.effective_cap()
        checks.append(_check("batch_size_cap", bool(sizes.max() <= cap), int(sizes.max()), cap))

    problem = cfg.problem.build()
    snaps = None
    if (run_dir / "snapshots.npz").exists():
        snaps = load_snapshots(run_dir / "snapshots.npz")
    checks.append(_rate_check(cfg, rows, problem, snaps))
    checks.append(_strong_growth_check(cfg, rows, problem, snaps, sizes, status))
    checks.append(_identity_check(cfg, problem, snaps))
    return checks


def _rate_check(cfg, rows, problem, snaps):
    name = "rate_fit"
    if problem.f_star is None:
        return _skip(name, "minimum value unknown for this problem")
    if problem.kind == "quadratic" and snaps is not None and len(snaps.rounds) == len(rows):
        subopt = [problem.suboptimality(all_reduce_average(list(p))) for p in snaps.worker_params]
    else:
        subopt = [r.loss - problem.f_star for r in rows]
    start = next((i for i, r in enumerate(rows) if r.samples_processed > cfg.schedule.warmup_samples), len(rows))
    fit = fit_geometric if problem.kind == "quadratic" else fit_sublinear
    try:
        res = fit(subopt, start=start, f_star=problem.f_star)
    except InsufficientDataError as exc:
        return _skip(name, str(exc))
    detail = (f"{res.model} fit of F(x_bar_k) - F* over rounds {res.window[0]}..{res.window[1]}, "
              f"R^2={res.r2:.4f}; averaged iterate at synchronization, not a sampled output iterate")
    return _check(name, res.rate < 0, res.rate, "< 0", detail)


def _strong_growth_check(cfg, rows, problem, snaps, sizes, status):
    name = "strong_growth"
    ctl = cfg.controller
    if ctl.kind != "exact_norm":
        return _skip(name, "the exact deviation bound is enforced only by the exact_norm controller")
    if cfg.variant != "implemented":
        return _skip(name, "per-step sizes of the per_sample variant are not recorded at synchronization points")
    if snaps is None or cfg.snapshot_every != 1 or len(snaps.rounds) != len(rows):
        return _skip(name, "needs a parameter snapshot at every round")
    if sizes is None:
        return _check(name, False, detail="batch sizes unreadable")
    iterates = [snaps.x0] + [all_reduce_average(list(p)) for p in snaps.worker_params[:-1]]
    worst, bound, first = 0.0, 0.0, None
    for m in range(cfg.workers):
        idx = None
        if cfg.data_assignment == "sharded":
            size = problem.n // cfg.workers
            idx = np.arange(m * size, (m + 1) * size)
        rep = certify_strong_growth(problem, iterates, sizes[:, m], ctl.eta_for(m), sampling=ctl.sampling, indices=idx)
        worst, bound = max(worst, rep.max_ratio), max(bound, rep.bound)
        if first is None and rep.first_violation is not None:
            first = rep.first_violation
    detail = "max exact deviation ratio over all rounds" if first is None else f"first violation at round {first}"
    return _check(name, first is None, worst, bound + 1e-12, detail)


def _identity_check(cfg, problem, snaps):
    name = "cross_worker_identity"
    ctl = cfg.controller
    if ctl.kind != "cross_worker_norm":
        return _skip(name, "identity checks apply to cross_worker_norm runs only")
    if cfg.data_assignment != "shared":
        return _skip(name, "the identity assumes every worker samples the same dataset")
    if problem.n > cfg.oracle_limit:
        return _skip(name, f"n exceeds the oracle limit {cfg.oracle_limit}")
    M = cfg.workers
    local_b = min(ctl.b0, problem.n // M)
    x = np.zeros(problem.d)
    if snaps is not None and snaps.worker_params:
        x = all_reduce_average(list(snaps.worker_params[-1]))
    rel = monte_carlo_identity(problem, x, local_b, M, MC_TRIALS, seed=cfg.seed)
    return _check(name, rel <= MC_TOLERANCE, rel, MC_TOLERANCE,
                  f"mean estimate vs exact variance, {MC_TRIALS} trials of {M} disjoint batches of {local_b}")


def write_report(path, checks):
    with open(path, "w") as fh:
        for c in checks:
            fh.write(json.dumps(asdict(c), sort_keys=True, default=float) + "\n")
