"""Post-hoc checks over recorded runs: rate fits, strong-growth certificates,
Monte Carlo checks of the cross-worker variance estimator, and batch-size trends.

Everything here is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .controller import batch_variance, cross_worker_variance, expected_batch_deviation, population_variance
from .errors import ComparisonError, ConfigError, InputError, InsufficientDataError

__all__ = [
    "RateFit",
    "fit_geometric",
    "fit_sublinear",
    "StrongGrowthReport",
    "certify_strong_growth",
    "monte_carlo_identity",
    "time_averaged_batch_size",
    "TrendReport",
    "trend_batch_growth",
    "sample_output_index",
]

MIN_FIT_POINTS = 5


@dataclass(frozen=True)
class RateFit:
    model: str  # "linear_in_log" or "inverse_k"
    rate: float  # slope of log(suboptimality)
    intercept: float
    r2: float
    window: tuple  # (first, last) index into the input, inclusive


def _usable_window(subopts, start, floor):
    s = np.asarray(subopts, dtype=np.float64)
    idx = np.arange(s.size)
    end = s.size
    below = np.nonzero(s[start:] <= floor)[0]
    if below.size:
        end = start + below[0]  # stop at the first point on the noise floor
    keep = idx[start:end]
    if keep.size < MIN_FIT_POINTS:
        raise InsufficientDataError(f"only {keep.size} usable points above the floor {floor:g}; need {MIN_FIT_POINTS}")
    return keep, s[keep]


def _linear_fit(t, y):
    A = np.column_stack([t, np.ones_like(t)])
    (slope, intercept), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (slope * t + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid**2))
    tiny = 1e-24 * y.size * max(1.0, float(np.mean(y * y)))  # rounding noise of a flat series
    if ss_tot <= tiny:
        r2 = 1.0 if ss_res <= tiny else 0.0
    else:
        r2 = min(1.0, max(0.0, 1.0 - ss_res / ss_tot))
    return float(slope), float(intercept), r2


def _floor(floor, f_star):
    eps_floor = 1e3 * np.finfo(float).eps * abs(f_star) if f_star is not None else 0.0
    return max(floor, eps_floor)


def fit_geometric(subopts, *, start: int = 0, floor: float = 0.0, f_star: float | None = None) -> RateFit:
    """Least squares of ``log(subopt_k)`` on ``k``; the slope is the per-round log contraction.

    Points before ``start`` (e.g. warmup) are skipped and the window ends at
    the first value at or below the noise floor.
    """
    keep, s = _usable_window(subopts, start, _floor(floor, f_star))
    slope, intercept, r2 = _linear_fit(keep.astype(float), np.log(s))
    return RateFit("linear_in_log", slope, intercept, r2, (int(keep[0]), int(keep[-1])))


def fit_sublinear(subopts, *, start: int = 0, floor: float = 0.0, f_star: float | None = None) -> RateFit:
    """Least squares of ``log(subopt_k)`` on ``log k`` with ``k`` counted from 1; slope -1 is O(1/K)."""
    keep, s = _usable_window(subopts, start, _floor(floor, f_star))
    slope, intercept, r2 = _linear_fit(np.log(keep + 1.0), np.log(s))
    return RateFit("inverse_k", slope, intercept, r2, (int(keep[0]), int(keep[-1])))


@dataclass
class StrongGrowthReport:
    max_ratio: float
    first_violation: int | None  # index of the first iterate with ratio > bound
    ratios: list  # None where the gradient vanished
    zero_gradient: list = field(default_factory=list)
    bound: float = 0.0

    @property
    def certified(self) -> bool:
        return self.first_violation is None


def certify_strong_growth(problem, iterates, batch_sizes, eta: float, *, sampling: str = "without_replacement",
                          indices=None, tol: float = 1e-12) -> StrongGrowthReport:
    """Exact ``E|grad_B - grad_F|^2 / |grad_F|^2`` at each iterate for the batch size used there.

    ``batch_sizes[i]`` is the local batch size used starting from ``iterates[i]``.
    """
    if len(iterates) != len(batch_sizes):
        raise InputError("need one batch size per iterate")
    idx = np.arange(problem.n) if indices is None else np.asarray(indices)
    bound = eta * eta
    ratios, zero = [], []
    first = None
    for i, (x, b) in enumerate(zip(iterates, batch_sizes)):
        grads = problem.per_sample_gradients(x, idx)
        g = grads.sum(axis=0) / idx.size
        gn2 = float(g @ g)
        dev = expected_batch_deviation(population_variance(grads), idx.size, int(b), sampling)
        if gn2 == 0.0:
            zero.append(i)
            ratios.append(None)
            continue
        r = dev / gn2
        ratios.append(r)
        if first is None and r > bound + tol:
            first = i
    finite = [r for r in ratios if r is not None]
    return StrongGrowthReport(max(finite) if finite else 0.0, first, ratios, zero, bound)


def monte_carlo_identity(problem, x, local_b: int, workers: int, trials: int, seed: int = 0,
                         indices=None, return_details: bool = False, chunk: int = 1000):
    """Relative error of the mean cross-worker variance estimate against its exact target.

    Each trial draws ``workers`` disjoint batches of ``local_b`` samples at the
    common point ``x``. The target is the ``(n-1)``-normalised variance of all
    per-sample gradients, which the estimator matches in expectation under
    disjoint sampling.
    """
    idx = np.arange(problem.n) if indices is None else np.asarray(indices)
    n = idx.size
    if workers < 2:
        raise ConfigError([("run.workers", None, "the cross-worker estimator needs at least 2 workers")])
    if workers * local_b > n:
        raise ConfigError([("controller.b0", None, f"{workers} disjoint batches of {local_b} exceed the {n} samples")])
    if trials < 1:
        raise InputError("need at least one trial")
    grads = problem.per_sample_gradients(x, idx)
    target = batch_variance(grads) if n > 1 else 0.0

    rng = np.random.default_rng(seed)
    total = 0.0
    done = 0
    take = workers * local_b
    while done < trials:
        c = min(chunk, trials - done)
        picks = np.argsort(rng.random((c, n)), axis=1)[:, :take].reshape(c, workers, local_b)
        means = grads[picks].mean(axis=2)  # (c, workers, d)
        total += float(np.sum(cross_worker_variance(means, local_b)))
        done += c
    estimate = total / trials
    if target == 0.0:
        rel = 0.0 if estimate == 0.0 else float("inf")
    else:
        rel = abs(estimate - target) / target
    if return_details:
        return rel, estimate, target
    return rel


def time_averaged_batch_size(records) -> float:
    """Mean local batch size weighted by the samples each round consumed."""
    prev = 0
    num = den = 0.0
    for r in records:
        w = r.samples_processed - prev
        prev = r.samples_processed
        num += w * float(np.mean(r.local_batch_sizes))
        den += w
    if den == 0:
        raise InputError("no records")
    return num / den


@dataclass
class TrendReport:
    keys: list  # group keys in ascending order
    means: dict  # key -> mean over seeds of the time-averaged batch size
    per_seed: dict  # key -> list of per-seed values
    weak_agreements: int  # seeds whose values are non-increasing in the key
    strict_agreements: int  # ... and not all equal
    ties: int
    seeds: int
    monotone: bool  # strict agreement in a majority of seeds
    low_confidence: bool


def trend_batch_growth(groups: dict, *, min_seeds: int = 3) -> TrendReport:
    """Check that larger keys (H or eta) give smaller time-averaged batch sizes.

    ``groups`` maps a key to a list of run results (anything with ``records``
    and ``sample_budget``); runs are paired across groups by position, i.e. by
    seed.
    """
    if len(groups) < 2:
        raise InputError("need at least two groups to compare")
    keys = sorted(groups)
    sizes = {len(groups[k]) for k in keys}
    if len(sizes) != 1:
        raise ComparisonError("every group needs the same number of seeds")
    n_seeds = sizes.pop()
    if n_seeds < 1:
        raise InputError("empty groups")
    budgets = {run.sample_budget for k in keys for run in groups[k]}
    if len(budgets) != 1:
        raise ComparisonError(f"runs were made with different sample budgets: {sorted(budgets)}")

    per_seed = {k: [time_averaged_batch_size(run.records) for run in groups[k]] for k in keys}
    weak = strict = ties = 0
    for s in range(n_seeds):
        vals = [per_seed[k][s] for k in keys]
        nonincreasing = all(a >= b for a, b in zip(vals, vals[1:]))
        all_equal = all(a == b for a, b in zip(vals, vals[1:]))
        weak += nonincreasing
        strict += nonincreasing and not all_equal
        ties += all_equal
    return TrendReport(
        keys=keys,
        means={k: float(np.mean(v)) for k, v in per_seed.items()},
        per_seed=per_seed,
        weak_agreements=weak,
        strict_agreements=strict,
        ties=ties,
        seeds=n_seeds,
        monotone=strict * 2 > n_seeds,
        low_confidence=n_seeds < min_seeds,
    )


def sample_output_index(rounds: int, workers: int, *, mu: float = 0.0, lr: float = 0.0, rng=None):
    """Draw ``(k, m)`` for the randomized output iterate.

    With ``mu > 0`` round ``k`` has weight ``(1 - mu*lr/2)^(-k)``; otherwise
    rounds are uniform. The worker is always uniform.
    """
    rng = np.random.default_rng() if rng is None else rng
    if rounds < 1 or workers < 1:
        raise InputError("need at least one round and one worker")
    if mu > 0:
        q = 1.0 - mu * lr / 2.0
        if not 0 < q < 1:
            raise InputError("need 0 < mu*lr < 2")
        logw = -np.arange(rounds) * np.log(q)
        w = np.exp(logw - logw.max())
        k = int(rng.choice(rounds, p=w / w.sum()))
    else:
        k = int(rng.integers(rounds))
    return k, int(rng.integers(workers))
