#!/usr/bin/env python3
# -*- coding: utf-8 -*-

from __future__ import annotations

import pandas as pd
import pytest

import cli
from precond import PreconditionerError
from pulse import read_run_report
from solver import SolverError
from stencil_operator import OperatorError, apply_operator

from conftest import CONFIG_DIR

SMALL = str(CONFIG_DIR / "small_pulse.ini")


def _first_line(path):
    return path.read_text().splitlines()[0]


class TestRun:
    def test_zero_steps(self, tmp_path, capsys):
        code = cli.main(["run", "--config", SMALL, "--set", "problem.nsteps=0", "--output", str(tmp_path)])
        assert code == cli.EXIT_OK
        assert _first_line(tmp_path / cli.RUN_REPORT_FILE).startswith("# config_hash=")
        assert _first_line(tmp_path / cli.EFFECTIVE_CONFIG_FILE).startswith("# config_hash=")
        assert "solves: 0" in capsys.readouterr().out

    def test_hash_matches_effective_config(self, tmp_path):
        cli.main(["run", "--config", SMALL, "--set", "problem.nsteps=0", "--output", str(tmp_path)])
        assert _first_line(tmp_path / cli.RUN_REPORT_FILE) == _first_line(tmp_path / cli.EFFECTIVE_CONFIG_FILE)

    def test_one_step(self, tmp_path):
        code = cli.main(["run", "--config", SMALL, "--set", "problem.nsteps=1", "--output", str(tmp_path)])
        assert code == cli.EXIT_OK
        report = read_run_report(str(tmp_path / cli.RUN_REPORT_FILE))
        assert report["solve_count"] == 3
        assert report["topology"] == [2, 2]

    def test_failed_solve(self, tmp_path):
        code = cli.main(["run", "--config", SMALL, "--set", "problem.nsteps=1", "--set", "solver.tol=1e-30",
                         "--set", "solver.max_iter=2", "--output", str(tmp_path)])
        assert code == cli.EXIT_FAILURE
        report = read_run_report(str(tmp_path / cli.RUN_REPORT_FILE))
        assert report["failed"]
        assert report["steps"][0][-1]["outcome"] == "max_iter"


class TestBench:
    def test_single_kernel(self, tmp_path):
        code = cli.main(["bench", "--set", "bench.n=64", "--set", "bench.reps=10", "--set", "bench.warmup=2",
                         "--set", "bench.kernels=DPROD", "--output", str(tmp_path)])
        assert code == cli.EXIT_OK
        path = tmp_path / cli.KERNEL_BENCH_FILE
        assert _first_line(path).startswith("# config_hash=")
        frame = pd.read_csv(path, comment="#")
        assert len(frame) == 2
        assert set(frame["kernel"]) == {"DPROD"}


class TestScale:
    def test_topologies(self, tmp_path):
        code = cli.main(["scale", "--config", SMALL, "--set", "problem.nsteps=1", "--topologies", "1x1,2x1,2x2",
                         "--output", str(tmp_path)])
        assert code == cli.EXIT_OK
        frame = pd.read_csv(tmp_path / cli.SCALING_SWEEP_FILE, comment="#")
        assert list(frame["np"]) == [1, 2, 4]
        assert list(frame["status"]) == ["ok", "ok", "ok"]

    def test_zero_tile_count(self, tmp_path):
        code = cli.main(["scale", "--config", SMALL, "--topologies", "0x4", "--output", str(tmp_path)])
        assert code == cli.EXIT_USAGE


class TestVerify:
    def test_empty_selection(self, capsys):
        assert cli.main(["verify", "--checks", ""]) == cli.EXIT_OK
        assert "0 of 0 checks passed" in capsys.readouterr().out

    def test_subset(self, capsys):
        assert cli.main(["verify", "--checks", "operator,spai"]) == cli.EXIT_OK
        assert "2 of 2 checks passed" in capsys.readouterr().out

    def test_perturbed_stencil_fails(self, mocker):
        def perturbed(op, x, path=None):
            result = apply_operator(op, x) if path is None else apply_operator(op, x, path)
            result.interior[1, 1, 0] += 1e-6
            return result

        mocker.patch("verify.apply_operator", side_effect=perturbed)
        assert cli.main(["verify", "--checks", "operator"]) == cli.EXIT_FAILURE

    def test_unknown_check(self):
        assert cli.main(["verify", "--checks", "bogus"]) == cli.EXIT_USAGE

    @pytest.mark.slow
    def test_all_checks(self):
        assert cli.main(["verify"]) == cli.EXIT_OK


class TestUsage:
    def test_unknown_command(self):
        assert cli.main(["frobnicate"]) == cli.EXIT_USAGE

    def test_missing_command(self):
        assert cli.main([]) == cli.EXIT_USAGE

    def test_help(self):
        assert cli.main(["--help"]) == cli.EXIT_OK

    def test_bad_override(self, tmp_path):
        assert cli.main(["run", "--set", "grid.nx9=3", "--output", str(tmp_path)]) == cli.EXIT_USAGE

    def test_missing_config(self, tmp_path):
        assert cli.main(["run", "--config", str(tmp_path / "none.ini")]) == cli.EXIT_USAGE

    def test_duplicate_key_in_config(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text("[grid]\nnx1 = 20\nnx1 = 30\n")
        assert cli.main(["run", "--config", str(path), "--output", str(tmp_path)]) == cli.EXIT_USAGE

    @pytest.mark.parametrize("error", [SolverError("bad config"), OperatorError("bad shape"),
                                       PreconditionerError("bad kind")])
    def test_library_errors_map_to_usage(self, tmp_path, mocker, error):
        mocker.patch("cli.run", side_effect=error)
        code = cli.main(["run", "--config", SMALL, "--set", "problem.nsteps=1", "--output", str(tmp_path)])
        assert code == cli.EXIT_USAGE
