"""Local SGD with adaptive local batch sizes driven by norm tests.

The main entry points are :func:`run_training` for simulations, the
controller functions for batch-size decisions, and :mod:`localbatch.analysis`
for rate fits and certificates over recorded runs.
"""

from .analysis import (
    certify_strong_growth,
    fit_geometric,
    fit_sublinear,
    monte_carlo_identity,
    time_averaged_batch_size,
    trend_batch_growth,
)
from .controller import (
    ControllerConfig,
    ControllerDecision,
    batch_variance,
    cross_worker_test,
    cross_worker_variance,
    exact_test,
    expected_batch_deviation,
    norm_test,
    per_sample_test,
)
from .engine import RunConfig, RunRecord, RunResult, run_training, run_training_per_sample, virtual_average_trace
from .errors import (
    ComparisonError,
    ConfigError,
    FeatureError,
    InputError,
    InsufficientDataError,
    LocalBatchError,
    NumericalError,
    SchemaError,
)
from .optimizers import LrSchedule, OptimizerConfig, ScheduleConfig, apply_step, lr_at
from .problems import LogisticProblem, ProblemConfig, QuadraticProblem, make_logistic, make_quadratic

__version__ = "0.1.0"
