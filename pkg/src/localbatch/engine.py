"""Simulated data-parallel Local SGD with adaptive local batch sizes.

``M`` workers each take ``H`` local optimizer steps on their own minibatches,
then parameters are averaged (all-reduce). Batch sizes are revised by the
configured controller either at every synchronization (``implemented``
variant) or after every local step from per-sample gradients
(``per_sample`` variant).

Randomness is drawn from a counter-based generator keyed by
``(seed, worker, round, local_step)`` and reductions run in worker-id order,
so records do not depend on whether workers execute serially or on threads.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .controller import ControllerConfig, ControllerDecision, decide, exact_test, per_sample_test
from .errors import ConfigError, FeatureError, InputError, NumericalError
from .optimizers import OptimizerConfig, OptimizerState, ScheduleConfig, apply_step, lr_at
from .problems import ProblemConfig

__all__ = [
    "RunConfig",
    "WorkerState",
    "RunRecord",
    "RunResult",
    "Snapshots",
    "worker_rng",
    "all_reduce_average",
    "local_round",
    "run_training",
    "run_training_per_sample",
    "virtual_average_trace",
]

VARIANTS = ("implemented", "per_sample")
DATA_ASSIGNMENTS = ("shared", "sharded")


@dataclass
class RunConfig:
    workers: int = 4
    local_steps: int = 4
    sample_budget: int = 4096
    seed: int = 0
    variant: str = "implemented"
    data_assignment: str = "shared"
    threads: int = 1
    reset_optimizer_state: bool = False
    snapshot_every: int = 1  # rounds between parameter snapshots; 0 disables
    divergence_threshold: float = 1e12
    oracle_limit: int = 100_000
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)

    def pool_size(self) -> int:
        n = self.problem.n
        return n if self.data_assignment == "shared" else n // max(self.workers, 1)

    def effective_cap(self) -> int:
        return self.pool_size() if self.controller.cap is None else self.controller.cap

    def validate(self) -> list:
        errors = []
        errors += self.problem.validate()
        errors += self.optimizer.validate()
        errors += self.schedule.validate()
        if self.workers < 1:
            errors.append(("run.workers", None, "need at least one worker (M >= 1)"))
        if self.local_steps < 1:
            errors.append(("run.local_steps", None, "need at least one local step (H >= 1)"))
        if self.seed < 0:
            errors.append(("run.seed", None, "seed must be non-negative"))
        if self.threads < 1:
            errors.append(("run.threads", None, "threads must be >= 1"))
        if self.variant not in VARIANTS:
            errors.append(("run.variant", None, f"unknown variant {self.variant!r}; expected one of {VARIANTS}"))
        if self.data_assignment not in DATA_ASSIGNMENTS:
            errors.append(("run.data_assignment", None, f"unknown data assignment {self.data_assignment!r}; expected one of {DATA_ASSIGNMENTS}"))
        if self.snapshot_every < 0:
            errors.append(("run.snapshot_every", None, "snapshot_every must be >= 0 (0 disables)"))
        if self.divergence_threshold <= 0:
            errors.append(("run.divergence_threshold", None, "divergence threshold must be positive"))
        pool = self.pool_size() if self.workers >= 1 else None
        if pool is not None and pool < 1:
            errors.append(("run.data_assignment", None, "sharding leaves a worker without samples"))
            pool = None
        errors += self.controller.validate(workers=self.workers, pool_size=pool)
        if self.workers >= 1 and self.local_steps >= 1 and self.sample_budget < self.workers * self.local_steps * self.controller.b0:
            errors.append(("run.sample_budget", None,
                           f"budget N={self.sample_budget} is below one round M*H*b0={self.workers * self.local_steps * self.controller.b0}"))
        if self.variant == "per_sample" and self.controller.kind == "cross_worker_norm":
            errors.append(("controller.kind", None, "the per_sample variant supports constant, per_sample_norm and exact_norm"))
        if self.controller.kind == "exact_norm" and self.problem.n > self.oracle_limit:
            errors.append(("controller.kind", None, f"exact_norm needs n <= oracle_limit ({self.oracle_limit})"))
        return errors

    def check(self):
        errors = self.validate()
        if errors:
            raise ConfigError(errors)


@dataclass
class WorkerState:
    worker: int
    x: np.ndarray
    batch_size: int
    optimizer: OptimizerState
    pool: np.ndarray  # data indices this worker samples from


@dataclass(frozen=True)
class RunRecord:
    """Metrics for one communication round."""

    round: int
    samples_processed: int
    local_batch_sizes: tuple  # sizes in effect at the start of the round
    lr: float
    loss: float  # F at the averaged iterate after synchronization
    grad_norm_sq: float | None
    variance_estimate: float | None
    test_statistic: float | None
    test_passed: bool | None
    next_batch_sizes: tuple
    local_steps: int
    wallclock: float


@dataclass
class Snapshots:
    """Initial point and the pre-averaging parameters of every worker at sampled rounds."""

    x0: np.ndarray
    worker_params: list = field(default_factory=list)  # one (M, d) array per snapshot
    rounds: list = field(default_factory=list)  # round index of each snapshot

    def as_array(self) -> np.ndarray:
        if not self.worker_params:
            return np.zeros((0, 0, self.x0.size))
        return np.stack(self.worker_params)


@dataclass
class RunResult:
    records: list
    snapshots: Snapshots | None
    sample_budget: int = 0
    status: str = "completed"  # or "diverged"
    message: str = ""
    communication: dict = field(default_factory=dict)
    initial_decisions: list = field(default_factory=list)
    wallclock: float = 0.0

    @property
    def completed(self) -> bool:
        return self.status == "completed"


def worker_rng(seed: int, worker: int, round_index: int, step: int) -> np.random.Generator:
    """Independent Philox stream for one local step of one worker."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, worker, round_index, step])))


def _sample(rng, pool, b, sampling):
    if sampling == "with_replacement":
        return pool[rng.integers(0, pool.size, size=b)]
    if b > pool.size:
        raise InputError(f"batch of {b} exceeds the {pool.size} samples available without replacement")
    return pool[rng.choice(pool.size, size=b, replace=False)]


def all_reduce_average(params) -> np.ndarray:
    """Mean of the workers' vectors, accumulated in worker-id order."""
    params = [np.asarray(p, dtype=np.float64) for p in params]
    if not params:
        raise InputError("nothing to average")
    shape = params[0].shape
    acc = params[0].copy()
    for p in params[1:]:
        if p.shape != shape:
            raise InputError(f"dimension mismatch in all-reduce: {shape} vs {p.shape}")
        acc += p
    return acc / len(params)


@dataclass
class _WorkerOutput:
    x: np.ndarray
    last_grad: np.ndarray
    last_sample_grads: np.ndarray
    consumed: int
    batch_size: int  # size after any in-round decisions
    decision: ControllerDecision | None


def _run_worker(w: WorkerState, problem, schedule, config: RunConfig, k: int, samples_at_start: int,
                round_sizes_total: int, in_round_tests: bool) -> _WorkerOutput:
    ctl = config.controller
    cap = config.effective_cap()
    x = w.x
    b = w.batch_size
    consumed = 0
    decision = None
    grad = sample_grads = None
    for h in range(config.local_steps):
        rng = worker_rng(config.seed, w.worker, k, h)
        batch = np.sort(_sample(rng, w.pool, b, ctl.sampling))
        sample_grads = problem.per_sample_gradients(x, batch)
        grad = sample_grads.sum(axis=0) / b
        lr = lr_at(schedule, samples_at_start + h * round_sizes_total)
        consumed += b
        if in_round_tests and ctl.kind == "per_sample_norm":
            decision = per_sample_test(sample_grads, ctl.eta_for(w.worker), b, cap=cap)
        x = apply_step(w.optimizer, x, grad, lr)
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > config.divergence_threshold:
            raise NumericalError(f"worker {w.worker} diverged at round {k}, local step {h} (|x|={np.linalg.norm(x):.3g})")
        if in_round_tests and ctl.kind == "exact_norm":
            decision = exact_test(problem, x, ctl.eta_for(w.worker), b, ctl.sampling, cap=cap,
                                  indices=None if config.data_assignment == "shared" else w.pool)
        if decision is not None:
            b = decision.next_size
    return _WorkerOutput(x, grad, sample_grads, consumed, b, decision)


def local_round(workers, problem, schedule, config: RunConfig, k: int, samples_at_start: int = 0,
                executor=None, in_round_tests: bool = False):
    """Run ``H`` local steps on every worker; returns one output per worker, in worker order.

    Each output carries the new parameters, the batch gradient and per-sample
    gradients of the final local step, and the samples consumed.
    """
    total = sum(w.batch_size for w in workers)

    def job(w):
        return _run_worker(w, problem, schedule, config, k, samples_at_start, total, in_round_tests)

    if executor is None:
        return [job(w) for w in workers]
    return list(executor.map(job, workers))


def _pools(config: RunConfig, n: int):
    if config.data_assignment == "shared":
        return [np.arange(n)] * config.workers
    size = n // config.workers
    return [np.arange(m * size, (m + 1) * size) for m in range(config.workers)]


def _summarize(decisions):
    """Collapse per-worker decisions to one metrics row."""
    if not decisions:
        return None, None, None, None
    if len(decisions) == 1:
        d = decisions[0]
        return d.gradient_norm_sq, d.variance_estimate, d.statistic, d.passed
    return (
        float(np.mean([d.gradient_norm_sq for d in decisions])),
        float(np.mean([d.variance_estimate for d in decisions])),
        float(max(d.statistic for d in decisions)),
        all(d.passed for d in decisions),
    )


def run_training(config: RunConfig, problem=None) -> RunResult:
    """Run until the sample budget is consumed; one record per communication round."""
    config.check()
    if problem is None:
        problem = config.problem.build()
    elif problem.n != config.problem.n or problem.d != config.problem.d:
        raise ConfigError([("problem", None, "supplied problem does not match the configured n and d")])

    M, H = config.workers, config.local_steps
    ctl = config.controller
    cap = config.effective_cap()
    per_sample_variant = config.variant == "per_sample"
    schedule = config.schedule.resolve(L=problem.L, local_steps=H, workers=M, eta=ctl.eta_for(0),
                                       budget=config.sample_budget)
    pools = _pools(config, problem.n)
    shard_indices = None if config.data_assignment == "shared" else pools
    x0 = np.zeros(problem.d)
    workers = [WorkerState(m, x0.copy(), ctl.b0, config.optimizer.init_state(problem.d), pools[m]) for m in range(M)]
    snapshots = Snapshots(x0.copy()) if config.snapshot_every > 0 else None

    result = RunResult([], snapshots, config.sample_budget)
    if ctl.kind == "exact_norm":
        # Certify the starting point too, not only the synchronization points that follow.
        sizes, result.initial_decisions = decide(ctl, [w.batch_size for w in workers], cap=cap, problem=problem,
                                                 points=[w.x for w in workers], worker_indices=shard_indices)
        for w, b in zip(workers, sizes):
            w.batch_size = b

    executor = ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
    grad_reduces = 0
    start = time.perf_counter()
    B = 0
    k = 0
    try:
        while B < config.sample_budget:
            sizes = tuple(w.batch_size for w in workers)
            lr = lr_at(schedule, B)
            try:
                outputs = local_round(workers, problem, schedule, config, k, B, executor, in_round_tests=per_sample_variant)
            except NumericalError as exc:
                result.status, result.message = "diverged", str(exc)
                break

            params = [o.x for o in outputs]
            if snapshots is not None and k % config.snapshot_every == 0:
                snapshots.worker_params.append(np.stack(params))
                snapshots.rounds.append(k)
            x_bar = all_reduce_average(params)
            for w in workers:
                w.x = x_bar.copy()
                if config.reset_optimizer_state:
                    w.optimizer.reset()

            if per_sample_variant:
                decisions = [o.decision for o in outputs if o.decision is not None]
                nxt = [o.batch_size for o in outputs]
                if ctl.kind != "constant" and ctl.aggregation == "max_over_workers":
                    nxt = [max(nxt)] * M
            else:
                worker_grads = np.stack([o.last_grad for o in outputs])
                if ctl.kind == "cross_worker_norm":
                    grad_reduces += 1
                nxt, decisions = decide(ctl, sizes, cap=cap, worker_grads=worker_grads,
                                        per_sample_grads=[o.last_sample_grads for o in outputs],
                                        problem=problem, points=[w.x for w in workers],
                                        worker_indices=shard_indices)
            gn2, var, stat, passed = _summarize(decisions)
            if ctl.kind == "constant" and not per_sample_variant:
                g_bar = all_reduce_average([o.last_grad for o in outputs])
                gn2 = float(g_bar @ g_bar)

            B += sum(o.consumed for o in outputs)
            loss = problem.loss(x_bar)
            for w, b in zip(workers, nxt):
                w.batch_size = int(b)
            result.records.append(RunRecord(
                round=k, samples_processed=B, local_batch_sizes=sizes, lr=lr, loss=loss,
                grad_norm_sq=gn2, variance_estimate=var, test_statistic=stat, test_passed=passed,
                next_batch_sizes=tuple(int(b) for b in nxt), local_steps=H,
                wallclock=time.perf_counter() - start,
            ))
            k += 1
            if not np.isfinite(loss) or loss > config.divergence_threshold:
                result.status = "diverged"
                result.message = f"loss {loss:.6g} exceeded the divergence threshold at round {k - 1}"
                break
    finally:
        if executor is not None:
            executor.shutdown()

    result.wallclock = time.perf_counter() - start
    result.communication = {
        "param_allreduces": len(result.records),
        "grad_allreduces": grad_reduces,
        "floats_per_allreduce": problem.d,
    }
    return result


def run_training_per_sample(config: RunConfig, problem=None) -> RunResult:
    """Per-step testing from per-sample gradients; sizes may differ across workers inside a round."""
    if config.variant != "per_sample":
        raise ConfigError([("run.variant", None, "run_training_per_sample needs variant = \"per_sample\"")])
    return run_training(config, problem)


def virtual_average_trace(snapshots: Snapshots | None, problem):
    """Averaged iterate and its objective value at every synchronization point."""
    if snapshots is None:
        raise FeatureError("parameter snapshots were not recorded for this run")
    trace = []
    for params in snapshots.worker_params:
        x_bar = all_reduce_average(list(params))
        trace.append((x_bar, problem.loss(x_bar)))
    return trace
