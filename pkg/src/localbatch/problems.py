"""Finite-sum objectives with closed-form per-sample gradients.

Two families are provided: least squares with an exactly controlled Hessian
spectrum, and binary logistic regression. Both keep their data immutable so
one instance can be shared by every simulated worker.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog
from scipy.special import expit

from .errors import ConfigError, InputError

__all__ = [
    "FiniteSumProblem",
    "QuadraticProblem",
    "LogisticProblem",
    "ProblemConfig",
    "make_quadratic",
    "make_logistic",
    "linearly_separable",
]


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


class FiniteSumProblem:
    """Average of ``n`` per-sample losses over parameters in ``R^d``.

    Sample indices are zero-based. Every reduction over samples runs in
    ascending index order so results do not depend on how a batch was drawn.
    """

    kind = "abstract"

    def __init__(self, features, targets, *, L=None, mu=None, x_star=None, f_star=None):
        features = _frozen(features)
        targets = _frozen(targets)
        if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
            raise InputError("features must be a non-empty (n, d) array")
        if targets.shape != (features.shape[0],):
            raise InputError("targets must have one entry per sample")
        if not (np.all(np.isfinite(features)) and np.all(np.isfinite(targets))):
            raise InputError("problem data must be finite")
        self.features = features
        self.targets = targets
        self.L = L
        self.mu = mu
        self.x_star = None if x_star is None else _frozen(x_star)
        self.f_star = f_star

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    # -- validation -----------------------------------------------------

    def check_point(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.d,):
            raise InputError(f"expected a parameter vector of shape ({self.d},), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise InputError("parameter vector has non-finite entries")
        return x

    def check_indices(self, indices, *, allow_empty=False) -> np.ndarray:
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size == 0 and not allow_empty:
            raise InputError("batch must be non-empty")
        if idx.size and (idx.min() < 0 or idx.max() >= self.n):
            raise InputError(f"sample index out of range [0, {self.n})")
        return np.sort(idx, kind="stable")

    # -- per-sample oracles (subclass hooks) ------------------------------

    def _residual_weights(self, x, idx) -> np.ndarray:
        """Scalar weight w_i with grad f_i(x) = w_i * a_i."""
        raise NotImplementedError

    def _sample_losses(self, x, idx) -> np.ndarray:
        raise NotImplementedError

    # -- public oracles --------------------------------------------------

    def per_sample_gradients(self, x, indices=None) -> np.ndarray:
        """Rows are gradients of the individual losses, in ascending index order."""
        x = self.check_point(x)
        idx = np.arange(self.n) if indices is None else self.check_indices(indices)
        w = self._residual_weights(x, idx)
        return self.features[idx] * w[:, None]

    def per_sample_gradient(self, x, i: int) -> np.ndarray:
        if not 0 <= int(i) < self.n:
            raise InputError(f"sample index {i} out of range [0, {self.n})")
        return self.per_sample_gradients(x, [int(i)])[0]

    def batch_gradient(self, x, batch) -> np.ndarray:
        """Mean per-sample gradient over ``batch`` (a multiset of indices)."""
        grads = self.per_sample_gradients(x, batch)
        return grads.sum(axis=0) / grads.shape[0]

    def full_gradient(self, x, indices=None) -> np.ndarray:
        """Gradient of the mean loss over all samples (or over ``indices``)."""
        return self.batch_gradient(x, np.arange(self.n) if indices is None else indices)

    def loss(self, x, indices=None) -> float:
        x = self.check_point(x)
        idx = np.arange(self.n) if indices is None else self.check_indices(indices)
        return float(self._sample_losses(x, idx).sum() / idx.size)

    def suboptimality(self, x) -> float:
        if self.f_star is None:
            raise InputError(f"{self.kind} problem has no known minimum value")
        return self.loss(x) - self.f_star


class QuadraticProblem(FiniteSumProblem):
    """Least squares, ``f_i(x) = (a_i^T x - y_i)^2 / 2``."""

    kind = "quadratic"

    def __init__(self, features, targets, *, hessian=None, **constants):
        super().__init__(features, targets, **constants)
        if hessian is None:
            hessian = self.features.T @ self.features / self.n
        self.hessian = _frozen(hessian)
        if self.x_star is None:
            rhs = self.features.T @ self.targets / self.n
            x_star, *_ = np.linalg.lstsq(self.hessian, rhs, rcond=None)
            self.x_star = _frozen(x_star)
        if self.f_star is None:
            self.f_star = self.loss(self.x_star)
        if self.L is None or self.mu is None:
            eig = np.linalg.eigvalsh(self.hessian)
            self.mu = float(eig[0]) if self.mu is None else self.mu
            self.L = float(eig[-1]) if self.L is None else self.L

    def _residual_weights(self, x, idx):
        return self.features[idx] @ x - self.targets[idx]

    def _sample_losses(self, x, idx):
        r = self.features[idx] @ x - self.targets[idx]
        return 0.5 * r * r

    def suboptimality(self, x) -> float:
        # Exact for least squares and free of cancellation against f_star.
        e = self.check_point(x) - self.x_star
        return float(0.5 * e @ self.hessian @ e)


class LogisticProblem(FiniteSumProblem):
    """Logistic regression with labels in {-1, +1}, ``f_i(x) = log(1 + exp(-y_i a_i^T x))``."""

    kind = "logistic"

    def __init__(self, features, targets, *, solve=True, **constants):
        super().__init__(features, targets, **constants)
        if not np.all(np.abs(self.targets) == 1.0):
            raise InputError("logistic labels must be -1 or +1")
        if self.L is None:
            self.L = float(np.max(np.sum(self.features**2, axis=1)) / 4.0)
        if solve and self.x_star is None:
            if linearly_separable(self.features, self.targets):
                # No minimizer exists; the infimum 0 is approached along the separating direction.
                self.f_star = 0.0
            else:
                x_star = _newton_logistic(self.features, self.targets)
                if x_star is not None:
                    self.x_star = _frozen(x_star)
                    self.f_star = self.loss(self.x_star)

    def _residual_weights(self, x, idx):
        y = self.targets[idx]
        return -y * expit(-y * (self.features[idx] @ x))

    def _sample_losses(self, x, idx):
        return np.logaddexp(0.0, -self.targets[idx] * (self.features[idx] @ x))


def linearly_separable(A, y) -> bool:
    """Whether some ``w`` has ``y_i a_i^T w >= 1`` for every sample (an LP feasibility check)."""
    A = np.asarray(A, dtype=np.float64)
    res = linprog(np.zeros(A.shape[1]), A_ub=-(np.asarray(y)[:, None] * A), b_ub=-np.ones(A.shape[0]),
                  bounds=[(None, None)] * A.shape[1], method="highs")
    return res.status == 0


def _newton_logistic(A, y, tol=1e-13, max_iter=100):
    """Damped Newton on the mean logistic loss; ``None`` if it does not settle."""
    n, d = A.shape
    x = np.zeros(d)

    def value(z):
        return np.logaddexp(0.0, -y * (A @ z)).mean()

    f = value(x)
    for _ in range(max_iter):
        s = expit(-y * (A @ x))
        g = -(A.T @ (y * s)) / n
        if np.linalg.norm(g) <= tol * max(1.0, abs(f)):
            return x
        h = (A.T * (s * (1 - s))) @ A / n
        try:
            step = np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            return None
        t = 1.0
        while t > 1e-12:
            cand = x - t * step
            fc = value(cand)
            if fc <= f - 0.25 * t * (g @ step):
                break
            t *= 0.5
        else:
            break
        x, f = cand, fc
        if np.linalg.norm(x) > 1e8:
            return None
    s = expit(-y * (A @ x))
    g = -(A.T @ (y * s)) / n
    return x if np.linalg.norm(g) <= 1e-10 else None


def make_quadratic(n: int, d: int, mu: float, L: float, seed: int = 0, noise: float = 1.0) -> QuadraticProblem:
    """Least-squares problem whose mean Hessian has spectrum exactly in ``[mu, L]``.

    The design matrix is ``sqrt(n) U diag(sqrt(lam)) V^T`` with orthonormal
    ``U`` (n x d) and ``V`` (d x d), so ``A^T A / n = V diag(lam) V^T`` with
    ``lam[0] = mu`` and ``lam[-1] = L``. ``noise = 0`` gives an interpolating
    problem (every per-sample gradient vanishes at the minimizer).
    """
    errors = []
    if not (0 < mu <= L):
        errors.append(("problem.mu", None, f"need 0 < mu <= L, got mu={mu}, L={L}"))
    if n < d:
        errors.append(("problem.n", None, f"need n >= d, got n={n}, d={d}"))
    if d < 1:
        errors.append(("problem.d", None, "need d >= 1"))
    if d == 1 and mu != L:
        errors.append(("problem.mu", None, "a 1-D quadratic has a single eigenvalue; need mu == L"))
    if noise < 0:
        errors.append(("problem.noise", None, "noise must be non-negative"))
    if errors:
        raise ConfigError(errors)

    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.standard_normal((n, d)))
    V, _ = np.linalg.qr(rng.standard_normal((d, d)))
    inner = np.sort(rng.uniform(mu, L, size=max(d - 2, 0)))
    lam = np.concatenate(([mu], inner, [L])) if d >= 2 else np.array([L], dtype=float)
    A = np.sqrt(n) * (U * np.sqrt(lam)) @ V.T
    x_true = rng.standard_normal(d)
    y = A @ x_true + noise * rng.standard_normal(n)

    hessian = (V * lam) @ V.T
    x_star = V @ ((V.T @ (A.T @ y / n)) / lam)
    if noise == 0:
        x_star = x_true
    # The constructed spectrum is kept rather than re-multiplying A^T A / n.
    return QuadraticProblem(A, y, hessian=hessian, L=float(L), mu=float(mu), x_star=x_star)


def make_logistic(n: int, d: int, separation: float = 1.0, seed: int = 0) -> LogisticProblem:
    """Balanced two-class Gaussian mixture; class means at +-(separation/2) along a random direction."""
    errors = []
    if n < 2:
        errors.append(("problem.n", None, f"need n >= 2, got {n}"))
    if d < 1:
        errors.append(("problem.d", None, f"need d >= 1, got {d}"))
    if separation < 0:
        errors.append(("problem.separation", None, "separation must be non-negative"))
    if errors:
        raise ConfigError(errors)

    rng = np.random.default_rng(seed)
    y = np.where(np.arange(n) < (n + 1) // 2, 1.0, -1.0)
    y = rng.permutation(y)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    A = rng.standard_normal((n, d)) + np.outer(y * separation / 2.0, direction)
    return LogisticProblem(A, y)


@dataclass
class ProblemConfig:
    """File-level description of a test problem."""

    kind: str = "quadratic"
    n: int = 1000
    d: int = 10
    mu: float = 0.1
    L: float = 1.0
    noise: float = 1.0
    separation: float = 1.0
    seed: int = 0

    def validate(self) -> list:
        errors = []
        if self.kind not in ("quadratic", "logistic"):
            errors.append(("problem.kind", None, f"unknown problem kind {self.kind!r}; expected quadratic or logistic"))
        if self.n < 1:
            errors.append(("problem.n", None, "n must be >= 1"))
        if self.d < 1:
            errors.append(("problem.d", None, "d must be >= 1"))
        if self.kind == "quadratic":
            if not (0 < self.mu <= self.L):
                errors.append(("problem.mu", None, f"need 0 < mu <= L, got mu={self.mu}, L={self.L}"))
            if self.n < self.d:
                errors.append(("problem.n", None, "quadratic problems need n >= d"))
            if self.d == 1 and self.mu != self.L:
                errors.append(("problem.mu", None, "a 1-D quadratic needs mu == L"))
            if self.noise < 0:
                errors.append(("problem.noise", None, "noise must be non-negative"))
        elif self.kind == "logistic":
            if self.n < 2:
                errors.append(("problem.n", None, "logistic problems need n >= 2"))
            if self.separation < 0:
                errors.append(("problem.separation", None, "separation must be non-negative"))
        if self.seed < 0:
            errors.append(("problem.seed", None, "seed must be non-negative"))
        return errors

    def build(self) -> FiniteSumProblem:
        errors = self.validate()
        if errors:
            raise ConfigError(errors)
        if self.kind == "quadratic":
            return make_quadratic(self.n, self.d, self.mu, self.L, seed=self.seed, noise=self.noise)
        return make_logistic(self.n, self.d, separation=self.separation, seed=self.seed)
