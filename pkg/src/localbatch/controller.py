"""Local batch-size controllers driven by gradient-variance norm tests.

Every test compares a variance term against ``eta^2 * |g|^2`` and proposes
the smallest batch size that would satisfy it. The comparison and the
ceiling are evaluated in exact rational arithmetic on the float inputs, so
``passed`` and ``statistic <= current_b`` can never disagree through rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError

__all__ = [
    "ControllerConfig",
    "ControllerDecision",
    "batch_variance",
    "population_variance",
    "norm_test",
    "per_sample_test",
    "expected_batch_deviation",
    "estimated_batch_deviation",
    "exact_test",
    "cross_worker_variance",
    "cross_worker_test",
    "aggregate_sizes",
    "decide",
]

CONTROLLER_KINDS = ("constant", "exact_norm", "per_sample_norm", "cross_worker_norm")
SAMPLING_MODES = ("with_replacement", "without_replacement")
AGGREGATIONS = ("per_worker", "max_over_workers")


@dataclass
class ControllerConfig:
    kind: str = "constant"
    eta: float | tuple = 0.5  # one value, or one per worker
    b0: int = 64
    cap: int | None = None  # None -> per-worker dataset size
    sampling: str = "without_replacement"
    aggregation: str = "max_over_workers"

    def eta_for(self, worker: int) -> float:
        if isinstance(self.eta, (tuple, list)):
            return float(self.eta[worker])
        return float(self.eta)

    def validate(self, workers: int | None = None, pool_size: int | None = None) -> list:
        errors = []
        if self.kind not in CONTROLLER_KINDS:
            errors.append(("controller.kind", None, f"unknown controller {self.kind!r}; expected one of {CONTROLLER_KINDS}"))
        etas = list(self.eta) if isinstance(self.eta, (tuple, list)) else [self.eta]
        for e in etas:
            if not (isinstance(e, (int, float)) and 0 < e < 1):
                errors.append(("controller.eta", None, f"eta must lie in the open interval (0, 1), got {e!r}"))
                break
        if isinstance(self.eta, (tuple, list)) and workers is not None and len(etas) != workers:
            errors.append(("controller.eta", None, f"per-worker eta needs {workers} entries, got {len(etas)}"))
        if self.sampling not in SAMPLING_MODES:
            errors.append(("controller.sampling", None, f"unknown sampling mode {self.sampling!r}; expected one of {SAMPLING_MODES}"))
        if self.aggregation not in AGGREGATIONS:
            errors.append(("controller.aggregation", None, f"unknown aggregation {self.aggregation!r}; expected one of {AGGREGATIONS}"))
        if self.b0 < 1:
            errors.append(("controller.b0", None, "initial local batch size must be >= 1"))
        if self.kind == "per_sample_norm" and self.b0 < 2:
            errors.append(("controller.b0", None, "per-sample variance needs batches of at least 2 samples"))
        if self.cap is not None:
            if self.cap < self.b0:
                errors.append(("controller.cap", None, f"need b0 <= cap, got b0={self.b0}, cap={self.cap}"))
            if pool_size is not None and self.cap > pool_size:
                errors.append(("controller.cap", None, f"cap {self.cap} exceeds the per-worker dataset size {pool_size}"))
        elif pool_size is not None and self.b0 > pool_size:
            errors.append(("controller.b0", None, f"b0 {self.b0} exceeds the per-worker dataset size {pool_size}"))
        if self.kind == "cross_worker_norm" and workers is not None and workers < 2:
            errors.append(("controller.kind", None, "cross_worker_norm needs at least M >= 2 workers"))
        return errors


@dataclass(frozen=True)
class ControllerDecision:
    passed: bool
    statistic: float  # next-size candidate before the ceiling, rounded up to a float
    next_size: int
    variance_estimate: float
    gradient_norm_sq: float


def _as_matrix(grads) -> np.ndarray:
    g = np.asarray(grads, dtype=np.float64)
    if g.ndim == 1:
        g = g[:, None]
    return g


def batch_variance(grads) -> float:
    """Sample variance ``1/(b-1) * sum |g_i - mean|^2`` of a batch of gradients."""
    g = _as_matrix(grads)
    b = g.shape[0]
    if b < 2:
        raise InputError(f"batch variance needs at least 2 gradients, got {b}")
    dev = g - g.sum(axis=0) / b
    return float(np.sum(dev * dev) / (b - 1))


def population_variance(grads) -> float:
    """``1/n * sum |g_i - mean|^2`` over a whole dataset."""
    g = _as_matrix(grads)
    dev = g - g.sum(axis=0) / g.shape[0]
    return float(np.sum(dev * dev) / g.shape[0])


def _cap(cap):
    return math.inf if cap is None else cap


def _float_up(q: Fraction) -> float:
    """Smallest float >= q, so comparisons against integers keep their exact outcome."""
    try:
        f = float(q)
    except OverflowError:
        return math.inf
    if Fraction(f) < q:
        f = math.nextafter(f, math.inf)
    return f


def norm_test(variance: float, grad_norm_sq: float, eta: float, current_b: int, *, cap=None, workers: int = 1) -> ControllerDecision:
    """Shared core of the approximate norm tests.

    passes iff ``variance / (workers * b) <= eta^2 |g|^2``; the candidate size
    is ``variance / (workers * eta^2 * |g|^2)`` and the next size is its
    ceiling clamped to ``[current_b, cap]``.
    """
    if current_b < 1:
        raise InputError("current batch size must be positive")
    if not 0 < eta < 1:
        raise InputError(f"eta must lie in (0, 1), got {eta}")
    if variance < 0 or grad_norm_sq < 0:
        raise InputError("variance and squared norm must be non-negative")
    cap = _cap(cap)
    if grad_norm_sq == 0:
        if variance == 0:
            return ControllerDecision(True, 0.0, int(current_b), variance, 0.0)
        next_size = int(cap) if cap != math.inf else int(current_b)
        return ControllerDecision(False, math.inf, max(next_size, int(current_b)), variance, 0.0)

    ratio = Fraction(variance) / (workers * Fraction(eta) ** 2 * Fraction(grad_norm_sq))
    passed = ratio <= current_b
    target = max(math.ceil(ratio), int(current_b))
    next_size = int(min(cap, target))
    return ControllerDecision(passed, _float_up(ratio), next_size, float(variance), float(grad_norm_sq))


def per_sample_test(grads, eta: float, current_b: int, cap=None) -> ControllerDecision:
    """Approximate local norm test from one worker's per-sample gradients."""
    g = _as_matrix(grads)
    if g.shape[0] != current_b:
        raise InputError(f"got {g.shape[0]} per-sample gradients for a batch of size {current_b}")
    var = batch_variance(g)
    mean = g.sum(axis=0) / g.shape[0]
    return norm_test(var, float(mean @ mean), eta, current_b, cap=cap)


def expected_batch_deviation(sigma2: float, n: int, b, sampling: str = "without_replacement"):
    """``E |grad_B - grad_F|^2`` for a uniformly drawn batch of size ``b``.

    ``sigma2`` is the population variance (normalised by ``n``) of the
    per-sample gradients. Without replacement the finite-population factor
    ``(n - b) / (n - 1)`` applies.
    """
    b = np.asarray(b, dtype=np.float64)
    if np.any(b < 1):
        raise InputError("batch size must be positive")
    if sampling == "with_replacement":
        out = sigma2 / b
    elif sampling == "without_replacement":
        if np.any(b > n):
            raise InputError(f"batch size exceeds population {n} without replacement")
        out = np.zeros_like(b) if n == 1 else sigma2 / b * (n - b) / (n - 1)
    else:
        raise InputError(f"unknown sampling mode {sampling!r}")
    return float(out) if out.ndim == 0 else out


def estimated_batch_deviation(grads, n: int) -> float:
    """Batch estimate ``Var/b * (n - b)/(n - 1)`` of the squared batch-gradient error.

    Over without-replacement batches its mean is ``n/(n-1)`` times
    :func:`expected_batch_deviation`, because the batch sample variance is
    unbiased for the ``(n-1)``-normalised variance, not for ``sigma2``.
    """
    g = _as_matrix(grads)
    b = g.shape[0]
    if b > n:
        raise InputError("batch larger than the population")
    fpc = 0.0 if n == 1 else (n - b) / (n - 1)
    return batch_variance(g) / b * fpc


def exact_test(problem, x, eta: float, current_b: int, sampling: str = "without_replacement", cap=None, indices=None) -> ControllerDecision:
    """Exact variance norm test using the full-gradient oracle.

    ``indices`` restricts the objective to one worker's data. The statistic is
    the real-valued minimal batch size solving the inequality.
    """
    idx = np.arange(problem.n) if indices is None else np.asarray(indices)
    n = idx.size
    grads = problem.per_sample_gradients(x, idx)
    full = grads.sum(axis=0) / n
    gnorm2 = float(full @ full)
    sigma2 = population_variance(grads)
    cap = min(_cap(cap), n) if sampling == "without_replacement" else _cap(cap)
    if current_b > cap:
        raise InputError(f"current batch size {current_b} exceeds cap {cap}")

    deviation = expected_batch_deviation(sigma2, n, current_b, sampling)
    if gnorm2 == 0:
        if sigma2 == 0:
            return ControllerDecision(True, 0.0, int(current_b), deviation, 0.0)
        return ControllerDecision(False, math.inf, int(cap) if cap != math.inf else int(current_b), deviation, 0.0)

    threshold = eta * eta * gnorm2
    if sampling == "with_replacement":
        statistic = sigma2 / threshold
    else:
        statistic = 0.0 if n == 1 else sigma2 * n / (threshold * (n - 1) + sigma2)
    passed = deviation <= threshold

    if passed:
        next_size = int(current_b)
    else:
        # Deviation is decreasing in b: start from the closed form and step to the boundary.
        b = int(min(max(math.ceil(statistic), current_b), cap)) if math.isfinite(statistic) else int(cap)
        while b > current_b and expected_batch_deviation(sigma2, n, b - 1, sampling) <= threshold:
            b -= 1
        while b < cap and expected_batch_deviation(sigma2, n, b, sampling) > threshold:
            b += 1
        next_size = b
    return ControllerDecision(bool(passed), float(statistic), next_size, float(deviation), gnorm2)


def cross_worker_variance(worker_grads, local_b: int):
    """Per-sample variance estimate from the spread of the workers' batch gradients.

    ``local_b * 1/(M-1) * sum_m |g_m - mean|^2``. Leading axes are treated
    as independent replicates; the worker axis is ``-2``.
    """
    g = np.asarray(worker_grads, dtype=np.float64)
    if g.ndim == 1:
        g = g[:, None]
    M = g.shape[-2]
    if M < 2:
        raise ConfigError([("controller.kind", None, "cross-worker variance needs at least 2 workers")])
    dev = g - g.sum(axis=-2, keepdims=True) / M
    out = local_b * np.sum(dev * dev, axis=(-2, -1)) / (M - 1)
    return float(out) if np.ndim(out) == 0 else out


def cross_worker_test(worker_grads, eta: float, current_local_b: int, cap=None) -> ControllerDecision:
    """Norm test for local methods using only the workers' batch gradients."""
    g = _as_matrix(worker_grads)
    M = g.shape[0]
    var = cross_worker_variance(g, current_local_b)
    mean = g.sum(axis=0) / M
    return norm_test(var, float(mean @ mean), eta, current_local_b, cap=cap, workers=M)


def aggregate_sizes(next_sizes: Sequence[int], aggregation: str) -> list:
    if aggregation == "max_over_workers":
        top = max(next_sizes)
        return [top] * len(next_sizes)
    if aggregation == "per_worker":
        return list(next_sizes)
    raise ConfigError([("controller.aggregation", None, f"unknown aggregation {aggregation!r}")])


def decide(config: ControllerConfig, current_sizes: Sequence[int], *, cap=None, per_sample_grads=None,
           worker_grads=None, problem=None, points=None, worker_indices=None):
    """Dispatch one synchronization-time decision for all workers.

    Returns ``(next_sizes, decisions)``; ``decisions`` is empty for the
    constant controller, holds one entry for the shared cross-worker test,
    and one per worker otherwise.
    """
    current_sizes = [int(b) for b in current_sizes]
    M = len(current_sizes)
    cap = config.cap if cap is None else cap
    kind = config.kind
    if kind == "constant":
        return list(current_sizes), []

    if kind == "cross_worker_norm":
        if worker_grads is None:
            raise ConfigError([("controller.kind", None, "cross_worker_norm needs the workers' batch gradients")])
        if len(set(current_sizes)) != 1:
            raise ConfigError([("controller.kind", None, "cross_worker_norm assumes one shared local batch size")])
        d = cross_worker_test(worker_grads, config.eta_for(0), current_sizes[0], cap=cap)
        return [d.next_size] * M, [d]

    if kind == "per_sample_norm":
        if per_sample_grads is None or len(per_sample_grads) != M:
            raise ConfigError([("controller.kind", None, "per_sample_norm needs per-sample gradients for every worker")])
        decisions = [per_sample_test(per_sample_grads[m], config.eta_for(m), current_sizes[m], cap=cap) for m in range(M)]
    elif kind == "exact_norm":
        if problem is None or points is None or len(points) != M:
            raise ConfigError([("controller.kind", None, "exact_norm needs the problem oracle and one point per worker")])
        decisions = [
            exact_test(problem, points[m], config.eta_for(m), current_sizes[m], config.sampling, cap=cap,
                       indices=None if worker_indices is None else worker_indices[m])
            for m in range(M)
        ]
    else:
        raise ConfigError([("controller.kind", None, f"unknown controller {kind!r}")])
    return aggregate_sizes([d.next_size for d in decisions], config.aggregation), decisions
