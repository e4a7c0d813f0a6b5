import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from localbatch.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUN, EXIT_VERIFY, cmd_run, cmd_sweep, cmd_verify, main
from localbatch.config import ExperimentConfig, dumps_config, env_overrides, loads_config, parse_config
from localbatch.engine import RunRecord
from localbatch.errors import ConfigError, SchemaError
from localbatch.metrics import COLUMNS, format_metrics, read_metrics

MINIMAL = """\
[run]
workers = 4
local_steps = 4
sample_budget = 4096

[problem]
kind = "quadratic"
"""


def write_config(tmp_path, text=MINIMAL, name="cfg.toml"):
    path = tmp_path / name
    path.write_text(text)
    return path


def record(**kw):
    base = dict(round=0, samples_processed=10, local_batch_sizes=(2, 2), lr=0.1, loss=1.0, grad_norm_sq=None,
                variance_estimate=None, test_statistic=None, test_passed=None, next_batch_sizes=(2, 2),
                local_steps=1, wallclock=0.5)
    base.update(kw)
    return RunRecord(**base)


class TestParseConfig:
    def test_minimal_file_gets_defaults(self):
        cfg = loads_config(MINIMAL)
        run = cfg.run
        assert (run.workers, run.local_steps, run.sample_budget) == (4, 4, 4096)
        assert run.problem.kind == "quadratic" and (run.problem.n, run.problem.d) == (1000, 10)
        assert run.controller.kind == "constant" and run.controller.b0 == 64
        assert run.schedule.lr == "auto" and run.optimizer.kind == "sgd"
        assert run.snapshot_every == 1 and cfg.output.wallclock is False

    def test_eta_out_of_range_names_interval_and_line(self):
        with pytest.raises(ConfigError) as exc:
            loads_config(MINIMAL + '\n[controller]\nkind = "exact_norm"\neta = 1.5\n')
        [(key, line, msg)] = exc.value.errors
        assert key == "controller.eta" and line == 11 and "(0, 1)" in msg

    def test_cross_worker_single_worker(self):
        text = MINIMAL.replace("workers = 4", "workers = 1") + '\n[controller]\nkind = "cross_worker_norm"\n'
        with pytest.raises(ConfigError) as exc:
            loads_config(text)
        assert any(k == "controller.kind" and "M >= 2" in m for k, _, m in exc.value.errors)

    def test_collects_every_error(self):
        text = '[run]\nworkers = 0\nlocal_steps = "four"\nspeed = 3\n\n[extra]\nx = 1\n'
        with pytest.raises(ConfigError) as exc:
            loads_config(text)
        found = {(k, line) for k, line, _ in exc.value.errors}
        assert ("run.local_steps", 3) in found
        assert ("run.speed", 4) in found
        assert ("extra", 6) in found
        assert ("run.sample_budget", 1) in found
        assert ("run.workers", 2) in found
        assert any(k == "problem.kind" for k, _ in found)

    def test_malformed_toml_reports_line(self):
        with pytest.raises(ConfigError) as exc:
            loads_config("[run]\nworkers = = 4\n")
        assert exc.value.errors[0][1] == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            parse_config(tmp_path / "nope.toml")

    def test_override_beats_file(self):
        cfg = loads_config(MINIMAL, ["controller.eta=0.3", "controller.kind=exact_norm", "run.seed=5"])
        assert cfg.run.controller.eta == 0.3 and cfg.run.controller.kind == "exact_norm" and cfg.run.seed == 5

    def test_bad_override_value_reported_without_line(self):
        with pytest.raises(ConfigError) as exc:
            loads_config(MINIMAL, ["run.workers=many"])
        assert exc.value.errors == [("run.workers", None, "expected an integer, got 'many'")]

    def test_environment_between_file_and_flags(self):
        env = {"LOCALBATCH__CONTROLLER__ETA": "0.25", "LOCALBATCH__RUN__SEED": "3", "OTHER": "1"}
        assert env_overrides(env) == ["controller.eta=0.25", "run.seed=3"]
        cfg = loads_config(MINIMAL, ["run.seed=9"], use_env=True, environ=env)
        assert cfg.run.controller.eta == 0.25 and cfg.run.seed == 9

    def test_per_worker_eta(self):
        cfg = loads_config(MINIMAL + "\n[controller]\neta = [0.5, 0.6, 0.7, 0.8]\n")
        assert cfg.run.controller.eta == (0.5, 0.6, 0.7, 0.8)

    def test_round_trip_of_every_field(self):
        text = MINIMAL + """
[optimizer]
kind = "adamw"
weight_decay = 0.05
clip = 1.0

[schedule]
kind = "warmup_cosine"
lr = 0.3
base_lr = 0.01
warmup_samples = 100
total_samples = 4000

[controller]
kind = "exact_norm"
eta = [0.5, 0.6, 0.7, 0.8]
b0 = 4
cap = 500
sampling = "with_replacement"
aggregation = "per_worker"

[output]
dir = "somewhere"
snapshot_every = 3
wallclock = true
"""
        cfg = loads_config(text)
        assert loads_config(dumps_config(cfg)) == cfg

    @settings(max_examples=40, deadline=None)
    @given(
        M=st.integers(2, 8), H=st.integers(1, 8), b0=st.integers(2, 32), seed=st.integers(0, 10**6),
        eta=st.floats(0.01, 0.99), lr=st.one_of(st.just("auto"), st.floats(1e-4, 1.0)),
        kind=st.sampled_from(["constant", "exact_norm", "per_sample_norm", "cross_worker_norm"]),
        problem=st.sampled_from(["quadratic", "logistic"]), wallclock=st.booleans(),
    )
    def test_round_trip_property(self, M, H, b0, seed, eta, lr, kind, problem, wallclock):
        cfg = loads_config(MINIMAL, [f"run.workers={M}", f"run.local_steps={H}", f"run.sample_budget={M * H * b0 * 3}",
                                     f"run.seed={seed}", f"controller.eta={eta!r}", f"controller.b0={b0}",
                                     f"controller.kind={kind}", f"problem.kind={problem}",
                                     f"schedule.lr={lr if lr == 'auto' else repr(lr)}",
                                     f"output.wallclock={str(wallclock).lower()}"])
        again = loads_config(dumps_config(cfg))
        assert again == cfg
        assert dumps_config(again) == dumps_config(cfg)

    def test_default_object_serializes(self):
        assert "[controller]" in dumps_config(ExperimentConfig())


class TestMetricsFormat:
    def test_header_is_exact(self):
        assert format_metrics([]).splitlines()[0] == ",".join(COLUMNS)
        assert COLUMNS == ("round", "samples_processed", "local_batch_size", "lr", "loss_avg_iterate", "grad_norm_sq",
                           "variance_estimate", "test_statistic", "test_passed", "wallclock_s")

    def test_reals_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        recs = [record(round=i, samples_processed=10 * (i + 1), lr=float(rng.random()), loss=float(rng.random() * 1e-7),
                       grad_norm_sq=float(rng.random()), test_statistic=float(rng.random() * 1e9), test_passed=bool(i % 2))
                for i in range(50)]
        path = tmp_path / "m.csv"
        path.write_text(format_metrics(recs))
        rows = read_metrics(path)
        for r, row in zip(recs, rows):
            assert (row.lr, row.loss, row.grad_norm_sq, row.test_statistic, row.test_passed) == \
                   (r.lr, r.loss, r.grad_norm_sq, r.test_statistic, r.test_passed)

    def test_missing_values_blank(self):
        line = format_metrics([record()]).splitlines()[1]
        assert line == "0,10,2,0.10000000000000001,1,,,,,"

    def test_wallclock_opt_in(self):
        assert format_metrics([record()], wallclock=True).splitlines()[1].endswith(",0.5")

    def test_heterogeneous_sizes(self):
        assert format_metrics([record(local_batch_sizes=(2, 3, 3))]).splitlines()[1].split(",")[2] == "2;3;3"

    def test_reader_names_wrong_column(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text("round,samples,local_batch_size\n")
        with pytest.raises(SchemaError, match="samples_processed"):
            read_metrics(path)

    def test_reader_names_bad_value_column(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(format_metrics([record()]).replace("0.10000000000000001", "fast"))
        with pytest.raises(SchemaError, match="'lr'"):
            read_metrics(path)


class TestCmdRun:
    def test_budget_example_writes_four_rows(self, tmp_path):
        cfg = write_config(tmp_path)
        assert cmd_run(cfg, out=tmp_path / "r") == EXIT_OK
        rows = read_metrics(tmp_path / "r" / "metrics.csv")
        assert [r.samples_processed for r in rows] == [1024, 2048, 3072, 4096]
        summary = json.loads((tmp_path / "r" / "summary.jsonl").read_text())
        assert summary["rounds"] == 4 and summary["samples_processed"] == 4096 and summary["status"] == "completed"
        assert summary["mean_batch_size"] == 64.0
        assert (tmp_path / "r" / "config.toml").exists() and (tmp_path / "r" / "snapshots.npz").exists()

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = write_config(tmp_path, MINIMAL + '\n[controller]\nkind = "cross_worker_norm"\nb0 = 8\n')
        cmd_run(cfg, ["run.sample_budget=20000"], out=tmp_path / "a", seed=3)
        cmd_run(cfg, ["run.sample_budget=20000", "run.threads=4"], out=tmp_path / "b", seed=3)
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_override_echoed_in_summary(self, tmp_path):
        cfg = write_config(tmp_path, MINIMAL + '\n[controller]\nkind = "exact_norm"\neta = 0.5\nb0 = 2\n')
        assert cmd_run(cfg, ["controller.eta=0.8"], out=tmp_path / "r") == EXIT_OK
        assert json.loads((tmp_path / "r" / "summary.jsonl").read_text())["eta"] == 0.8
        assert "eta = 0.8" in (tmp_path / "r" / "config.toml").read_text()

    def test_config_error_exit_code(self, tmp_path, capsys):
        cfg = write_config(tmp_path, MINIMAL + "\n[controller]\neta = 1.5\n")
        assert cmd_run(cfg, out=tmp_path / "r") == EXIT_CONFIG
        assert "controller.eta (line 10)" in capsys.readouterr().err

    def test_divergence_exit_code_and_partial_metrics(self, tmp_path):
        cfg = write_config(tmp_path)
        code = cmd_run(cfg, ["schedule.lr=50.0", "run.sample_budget=1000000"], out=tmp_path / "r")
        assert code == EXIT_RUN
        rows = read_metrics(tmp_path / "r" / "metrics.csv")
        assert 0 < len(rows) and rows[-1].samples_processed < 1_000_000
        assert json.loads((tmp_path / "r" / "summary.jsonl").read_text())["status"] == "diverged"

    def test_main_dispatch(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "r"), "--seed", "2", "--set", "run.sample_budget=2048"]) == EXIT_OK
        assert len(read_metrics(tmp_path / "r" / "metrics.csv")) == 2


class TestCmdSweep:
    def test_single_point(self, tmp_path):
        cfg = write_config(tmp_path, MINIMAL + '\n[controller]\nkind = "cross_worker_norm"\nb0 = 8\n')
        assert cmd_sweep(cfg, H=[1], eta=[0.8], seeds=[1], out=tmp_path / "s") == EXIT_OK
        rows = list(csv.DictReader(open(tmp_path / "s" / "aggregate.csv")))
        assert len(rows) == 1
        row = rows[0]
        assert (row["H"], row["eta"], row["seed"], row["status"]) == ("1", "0.80000000000000004", "1", "ok")
        assert int(row["steps"]) == int(row["rounds"]) * 1

    def test_grid_arithmetic(self, tmp_path):
        cfg = write_config(tmp_path, MINIMAL + '\n[controller]\nkind = "cross_worker_norm"\nb0 = 8\n')
        assert cmd_sweep(cfg, H=[1, 2], eta=[0.5, 0.9], seeds=[0, 1, 2], out=tmp_path / "s") == EXIT_OK
        rows = list(csv.DictReader(open(tmp_path / "s" / "aggregate.csv")))
        assert len(rows) == 12 and all(r["status"] == "ok" for r in rows)
        assert len({r["dir"] for r in rows}) == 12

    def test_diverging_point_marked_failed(self, tmp_path):
        cfg = write_config(tmp_path)
        code = cmd_sweep(cfg, ["run.sample_budget=200000"], seeds=[0], grid=["schedule.lr=0.01,50.0"], out=tmp_path / "s")
        assert code == EXIT_RUN
        rows = list(csv.DictReader(open(tmp_path / "s" / "aggregate.csv")))
        assert [r["status"] for r in rows] == ["ok", "failed"]
        assert rows[0]["final_loss"] and int(rows[0]["samples"]) >= 200000

    def test_parallel_sweep_same_bytes(self, tmp_path):
        cfg = write_config(tmp_path, MINIMAL + '\n[controller]\nkind = "exact_norm"\nb0 = 2\n')
        cmd_sweep(cfg, H=[1, 4], seeds=[0, 1], out=tmp_path / "serial")
        cmd_sweep(cfg, H=[1, 4], seeds=[0, 1], out=tmp_path / "parallel", jobs=2)
        assert (tmp_path / "serial" / "aggregate.csv").read_bytes() == (tmp_path / "parallel" / "aggregate.csv").read_bytes()
        for sub in (tmp_path / "serial").iterdir():
            if sub.is_dir():
                assert (sub / "metrics.csv").read_bytes() == (tmp_path / "parallel" / sub.name / "metrics.csv").read_bytes()

    def test_empty_grid(self, tmp_path):
        assert cmd_sweep(write_config(tmp_path), out=tmp_path / "s") == EXIT_CONFIG


def report_lines(path):
    return {d["name"]: d for d in map(json.loads, Path(path).read_text().splitlines())}


class TestCmdVerify:
    def test_exact_norm_run_certified(self, tmp_path):
        cfg = write_config(tmp_path, MINIMAL + '\n[controller]\nkind = "exact_norm"\nb0 = 2\n')
        cmd_run(cfg, ["run.sample_budget=50000"], out=tmp_path / "r")
        assert cmd_verify(tmp_path / "r") == EXIT_OK
        rep = report_lines(tmp_path / "r" / "report.jsonl")
        assert rep["strong_growth"]["status"] == "pass"
        assert rep["strong_growth"]["value"] <= 0.25 + 1e-12
        assert set(rep["rate_fit"]) == {"name", "status", "value", "tolerance", "detail"}

    def test_constant_run_skips_identity_checks(self, tmp_path):
        cfg = write_config(tmp_path)
        cmd_run(cfg, ["run.sample_budget=40000"], out=tmp_path / "r")
        assert cmd_verify(tmp_path / "r") == EXIT_OK
        rep = report_lines(tmp_path / "r" / "report.jsonl")
        assert rep["rate_fit"]["status"] == "pass"
        for name in ("strong_growth", "cross_worker_identity"):
            assert rep[name]["status"] == "skip" and rep[name]["detail"]

    def test_cross_worker_identity_checked(self, tmp_path):
        cfg = write_config(tmp_path, MINIMAL + '\n[controller]\nkind = "cross_worker_norm"\nb0 = 8\n')
        cmd_run(cfg, ["run.sample_budget=20000"], out=tmp_path / "r")
        assert cmd_verify(tmp_path / "r") == EXIT_OK
        assert report_lines(tmp_path / "r" / "report.jsonl")["cross_worker_identity"]["status"] == "pass"

    def test_tampered_batch_size(self, tmp_path):
        cfg = write_config(tmp_path, MINIMAL + '\n[controller]\nkind = "exact_norm"\nb0 = 2\n')
        cmd_run(cfg, ["run.sample_budget=50000"], out=tmp_path / "r")
        path = tmp_path / "r" / "metrics.csv"
        lines = path.read_text().splitlines()
        fields = lines[-1].split(",")
        fields[2] = "1"
        lines[-1] = ",".join(fields)
        path.write_text("\n".join(lines) + "\n")
        assert cmd_verify(tmp_path / "r") == EXIT_VERIFY
        assert report_lines(tmp_path / "r" / "report.jsonl")["batch_size_monotone"]["status"] == "fail"

    def test_foreign_metrics(self, tmp_path, capsys):
        d = tmp_path / "foreign"
        d.mkdir()
        (d / "metrics.csv").write_text("epoch,loss\n1,0.5\n")
        assert cmd_verify(d) == EXIT_VERIFY
        rep = report_lines(d / "report.jsonl")
        assert rep["metrics_schema"]["status"] == "fail" and "epoch" in rep["metrics_schema"]["detail"]

    def test_sweep_directory(self, tmp_path):
        cfg = write_config(tmp_path, MINIMAL + '\n[controller]\nkind = "per_sample_norm"\nb0 = 4\n')
        cmd_sweep(cfg, ["run.sample_budget=20000"], H=[1, 4], out=tmp_path / "s")
        assert cmd_verify(tmp_path / "s") == EXIT_OK
        names = report_lines(tmp_path / "s" / "report.jsonl")
        assert "H1/batch_size_monotone" in names and "H4/batch_size_monotone" in names

    def test_nothing_to_verify(self, tmp_path):
        assert cmd_verify(tmp_path) == EXIT_VERIFY


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "localbatch", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "verify" in out.stdout
