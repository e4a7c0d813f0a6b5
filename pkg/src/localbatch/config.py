"""Experiment configuration files.

Configs are TOML with one table per component::

    [run]
    workers = 4            # M, required
    local_steps = 4        # H, required
    sample_budget = 65536  # N, required
    seed = 0
    variant = "implemented"        # or "per_sample"
    data_assignment = "shared"     # or "sharded"
    threads = 1
    reset_optimizer_state = false
    divergence_threshold = 1e12
    oracle_limit = 100000

    [problem]
    kind = "quadratic"     # required; or "logistic"
    n = 1000
    d = 10
    mu = 0.1
    L = 1.0
    noise = 1.0
    separation = 1.0
    seed = 0

    [optimizer]
    kind = "sgd"           # "sgd", "shb" or "adamw"
    momentum = 0.9
    beta1 = 0.9
    beta2 = 0.95
    eps = 1e-8
    weight_decay = 0.1     # omitted -> 0.1 for adamw, 0 otherwise
    clip = 0.0

    [schedule]
    kind = "constant"      # or "warmup_cosine"
    lr = "auto"            # or a number
    base_lr = 0.01         # omitted -> lr / 10
    warmup_samples = 0
    total_samples = 65536  # omitted -> sample_budget

    [controller]
    kind = "constant"      # "exact_norm", "per_sample_norm", "cross_worker_norm"
    eta = 0.5              # or one value per worker
    b0 = 64
    cap = 1000             # omitted -> per-worker dataset size
    sampling = "without_replacement"
    aggregation = "max_over_workers"

    [output]
    dir = "runs/latest"
    snapshot_every = 1     # 0 disables parameter snapshots
    wallclock = false      # write wall-clock seconds into metrics.csv

Overrides use ``section.key=value`` with a TOML value (bare words are read
as strings). Environment variables ``LOCALBATCH__SECTION__KEY=value`` are
applied after the file and before command-line overrides.
"""

from __future__ import annotations

import os
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from .controller import ControllerConfig
from .engine import RunConfig
from .errors import ConfigError
from .optimizers import OptimizerConfig, ScheduleConfig
from .problems import ProblemConfig

__all__ = ["OutputConfig", "ExperimentConfig", "parse_config", "loads_config", "dumps_config", "ENV_PREFIX"]

ENV_PREFIX = "LOCALBATCH__"


@dataclass
class OutputConfig:
    dir: str = "runs/latest"
    wallclock: bool = False


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


# Value kinds understood by the file grammar.
INT, FLOAT, STR, BOOL, LR, ETA = "int", "float", "str", "bool", "lr", "eta"

# section -> key -> (attribute path on ExperimentConfig, kind, required)
SCHEMA = {
    "run": {
        "workers": ("run.workers", INT, True),
        "local_steps": ("run.local_steps", INT, True),
        "sample_budget": ("run.sample_budget", INT, True),
        "seed": ("run.seed", INT, False),
        "variant": ("run.variant", STR, False),
        "data_assignment": ("run.data_assignment", STR, False),
        "threads": ("run.threads", INT, False),
        "reset_optimizer_state": ("run.reset_optimizer_state", BOOL, False),
        "divergence_threshold": ("run.divergence_threshold", FLOAT, False),
        "oracle_limit": ("run.oracle_limit", INT, False),
    },
    "problem": {
        "kind": ("run.problem.kind", STR, True),
        "n": ("run.problem.n", INT, False),
        "d": ("run.problem.d", INT, False),
        "mu": ("run.problem.mu", FLOAT, False),
        "L": ("run.problem.L", FLOAT, False),
        "noise": ("run.problem.noise", FLOAT, False),
        "separation": ("run.problem.separation", FLOAT, False),
        "seed": ("run.problem.seed", INT, False),
    },
    "optimizer": {
        "kind": ("run.optimizer.kind", STR, False),
        "momentum": ("run.optimizer.momentum", FLOAT, False),
        "beta1": ("run.optimizer.beta1", FLOAT, False),
        "beta2": ("run.optimizer.beta2", FLOAT, False),
        "eps": ("run.optimizer.eps", FLOAT, False),
        "weight_decay": ("run.optimizer.weight_decay", FLOAT, False),
        "clip": ("run.optimizer.clip", FLOAT, False),
    },
    "schedule": {
        "kind": ("run.schedule.kind", STR, False),
        "lr": ("run.schedule.lr", LR, False),
        "base_lr": ("run.schedule.base_lr", FLOAT, False),
        "warmup_samples": ("run.schedule.warmup_samples", INT, False),
        "total_samples": ("run.schedule.total_samples", INT, False),
    },
    "controller": {
        "kind": ("run.controller.kind", STR, False),
        "eta": ("run.controller.eta", ETA, False),
        "b0": ("run.controller.b0", INT, False),
        "cap": ("run.controller.cap", INT, False),
        "sampling": ("run.controller.sampling", STR, False),
        "aggregation": ("run.controller.aggregation", STR, False),
    },
    "output": {
        "dir": ("output.dir", STR, False),
        "snapshot_every": ("run.snapshot_every", INT, False),
        "wallclock": ("output.wallclock", BOOL, False),
    },
}


def _coerce(value, kind):
    """Return the converted value, or raise TypeError with a readable reason."""
    is_int = isinstance(value, int) and not isinstance(value, bool)
    if kind == INT:
        if is_int:
            return value
        raise TypeError(f"expected an integer, got {value!r}")
    if kind == FLOAT:
        if is_int or isinstance(value, float):
            return float(value)
        raise TypeError(f"expected a number, got {value!r}")
    if kind == STR:
        if isinstance(value, str):
            return value
        raise TypeError(f"expected a string, got {value!r}")
    if kind == BOOL:
        if isinstance(value, bool):
            return value
        raise TypeError(f"expected true or false, got {value!r}")
    if kind == LR:
        if value == "auto":
            return value
        if is_int or isinstance(value, float):
            return float(value)
        raise TypeError(f"expected a number or \"auto\", got {value!r}")
    if kind == ETA:
        if is_int or isinstance(value, float):
            return float(value)
        if isinstance(value, list) and value and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            return tuple(float(v) for v in value)
        raise TypeError(f"expected a number or a list of numbers, got {value!r}")
    raise AssertionError(kind)


def _set_attr(obj, path, value):
    *parents, leaf = path.split(".")
    for p in parents:
        obj = getattr(obj, p)
    setattr(obj, leaf, value)


def _get_attr(obj, path):
    for p in path.split("."):
        obj = getattr(obj, p)
    return obj


_SECTION_RE = re.compile(r"^\s*\[\s*([A-Za-z0-9_\-]+)\s*\]")
_KEY_RE = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")


def _locate(text):
    """Map ``section`` and ``section.key`` to 1-based line numbers."""
    where = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1)
            where.setdefault(section, lineno)
            continue
        m = _KEY_RE.match(line)
        if m:
            where.setdefault(f"{section}.{m.group(1)}" if section else m.group(1), lineno)
    return where


def parse_value(text: str):
    """Read an override value as TOML, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text.strip()


def env_overrides(environ=None) -> list:
    environ = os.environ if environ is None else environ
    out = []
    for name in sorted(environ):
        if name.startswith(ENV_PREFIX):
            parts = name[len(ENV_PREFIX):].lower().split("__")
            if len(parts) == 2:
                section, key = parts
                # Keys are matched case-insensitively against the schema.
                for real in SCHEMA.get(section, {}):
                    if real.lower() == key:
                        key = real
                out.append(f"{section}.{key}={environ[name]}")
    return out


def loads_config(text: str, overrides=(), *, source: str = "<string>", use_env: bool = False, environ=None) -> ExperimentConfig:
    """Parse and fully validate config text; raises ConfigError listing every problem."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        if line is None:
            m = re.search(r"line (\d+)", str(exc))
            line = int(m.group(1)) if m else None
        raise ConfigError([(source, line, f"malformed TOML: {exc}")]) from None
    where = _locate(text)
    errors = []
    origin = {}  # key path -> line or None for overrides

    def note(key):
        return origin.get(key, where.get(key))

    all_overrides = (env_overrides(environ) if use_env else []) + list(overrides)
    for ov in all_overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            errors.append((ov, None, "override must look like section.key=value"))
            continue
        keypath, value = ov.split("=", 1)
        section, key = keypath.strip().split(".", 1)
        raw.setdefault(section, {})
        if not isinstance(raw[section], dict):
            errors.append((section, None, "override targets a non-table entry"))
            continue
        raw[section][key] = parse_value(value)
        origin[f"{section}.{key}"] = None

    cfg = ExperimentConfig()
    for section, table in raw.items():
        if section not in SCHEMA:
            errors.append((section, where.get(section), f"unknown section [{section}]; expected one of {sorted(SCHEMA)}"))
            continue
        if not isinstance(table, dict):
            errors.append((section, where.get(section), "expected a table"))
            continue
        for key, value in table.items():
            keypath = f"{section}.{key}"
            if key not in SCHEMA[section]:
                errors.append((keypath, note(keypath), f"unknown key; expected one of {sorted(SCHEMA[section])}"))
                continue
            attr, kind, _ = SCHEMA[section][key]
            try:
                _set_attr(cfg, attr, _coerce(value, kind))
            except TypeError as exc:
                errors.append((keypath, note(keypath), str(exc)))
    for section, keys in SCHEMA.items():
        for key, (_, _, required) in keys.items():
            if required and key not in raw.get(section, {}):
                msg = "missing required key" if section in raw else f"missing required key (no [{section}] table)"
                errors.append((f"{section}.{key}", where.get(section), msg))

    structural = bool(errors)
    for keypath, line, msg in cfg.run.validate():
        keypath = "output.snapshot_every" if keypath == "run.snapshot_every" else keypath
        section, _, key = keypath.partition(".")
        # With structural errors present, defaults may not reflect intent; only report keys actually given.
        if structural and key not in (raw.get(section) or {}):
            continue
        errors.append((keypath, note(keypath), msg))
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(path, overrides=(), *, use_env: bool = True, environ=None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([(str(path), None, f"cannot read config: {exc.strerror or exc}")]) from None
    return loads_config(text, overrides, source=str(path), use_env=use_env, environ=environ)


def to_dict(cfg: ExperimentConfig) -> dict:
    out = {}
    for section, keys in SCHEMA.items():
        table = {}
        for key, (attr, _, _) in keys.items():
            value = _get_attr(cfg, attr)
            if value is None:
                continue
            if isinstance(value, tuple):
                value = list(value)
            table[key] = value
        out[section] = table
    return out


def dumps_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))
