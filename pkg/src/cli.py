#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
MIT License

Copyright (c) 2024 cauchy1988

Permission is hereby granted, free of charge, to any person obtaining a copy
of this software and associated documentation files (the "Software"), to deal
in the Software without restriction, including without limitation the rights
to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
copies of the Software, and to permit persons to whom the Software is
furnished to do so, subject to the following conditions:

The above copyright notice and this permission notice shall be included in all
copies or substantial portions of the Software.

THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
SOFTWARE.
"""


from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import List, Optional, Sequence

from bench import BenchError, default_topologies, run_kernel_bench, run_scaling_sweep
from grid import CommunicatorError, GridError, decompose
from kernels import KernelError
from parameters import (ConfigError, Parameters, build_bench_config, build_pulse_problem, parse_topologies,
                        read_config_file)
from precond import PreconditionerError
from pulse import PulseError, run
from solver import SolverError
from stencil_operator import OperatorError
from verify import VerifyError, run_checks

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

RUN_REPORT_FILE = "run_report.txt"
EFFECTIVE_CONFIG_FILE = "effective_config.ini"
KERNEL_BENCH_FILE = "kernel_bench.csv"
SCALING_SWEEP_FILE = "scaling_sweep.csv"
SNAPSHOT_DIR = "snapshots"


def build_parser() -> argparse.ArgumentParser:
	parser = argparse.ArgumentParser(prog="fldkrylov",
	                                 description="Implicit flux-limited diffusion mini-app: pulse runs, kernel "
	                                             "benchmarks, scaling sweeps and oracle checks")
	common = argparse.ArgumentParser(add_help=False)
	common.add_argument("--config", default=None, help="INI configuration file; built-in defaults when omitted")
	common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
	                    help="override one configuration value; repeatable, applied after the file")
	common.add_argument("--output", default=".", help="directory for report, CSV and effective config files")
	common.add_argument("--verbose", action="store_true", help="log at DEBUG level")

	commands = parser.add_subparsers(dest="command", required=True)
	commands.add_parser("run", parents=[common], help="run the Gaussian pulse problem")
	commands.add_parser("bench", parents=[common], help="time the BLAS-1 and stencil kernels on both paths")
	scale = commands.add_parser("scale", parents=[common], help="run the pulse problem over a topology sweep")
	scale.add_argument("--topologies", default=None, metavar="LIST",
	                   help="comma separated NX1xNX2 shapes, e.g. 1x1,10x1,5x4; evenly dividing reference "
	                        "shapes when omitted")
	verify = commands.add_parser("verify", parents=[common], help="run the small-instance oracle checks")
	verify.add_argument("--checks", default=None, metavar="LIST",
	                    help="comma separated subset of operator,solver,spai,variants,pulse; all when omitted")
	verify.add_argument("--seed", type=int, default=None, help="seed for the random test operators")
	return parser


def configure_logging(verbose: bool) -> None:
	logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, stream=sys.stderr,
	                    format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)


def load_parameters(config: Optional[str], overrides: Sequence[str]) -> Parameters:
	params = read_config_file(config) if config else Parameters()
	params.apply_overrides(overrides)
	return params


def _prepare_output(directory: str, params: Parameters) -> None:
	os.makedirs(directory, exist_ok=True)
	params.export_parameters(os.path.join(directory, EFFECTIVE_CONFIG_FILE))


def cmd_run(params: Parameters, output: str) -> int:
	problem = build_pulse_problem(params)
	topology = decompose(problem.grid, *problem.topology)
	_prepare_output(output, params)
	report = run(problem, topology, os.path.join(output, SNAPSHOT_DIR))
	report.write(os.path.join(output, RUN_REPORT_FILE), params.fingerprint)
	print(f"solves: {report.solve_count}  iterations: {report.total_iterations}  "
	      f"reduction events: {report.total_reduction_events}  wall time: {report.wall_time_s:.3f} s")
	print(f"energy: {report.initial_energy:.15e} -> {report.final_energy:.15e}")
	print(f"field checksum: {report.field_checksum()}")
	if not report.all_converged:
		print(f"run failed: {report.failure}")
		return EXIT_FAILURE
	return EXIT_OK


def cmd_bench(params: Parameters, output: str) -> int:
	cfg = build_bench_config(params)
	_prepare_output(output, params)
	report = run_kernel_bench(cfg)
	report.to_csv(os.path.join(output, KERNEL_BENCH_FILE), header=f"config_hash={params.fingerprint}")
	print(report.render())
	mismatches = report.checksum_mismatches()
	if mismatches:
		logger.error("kernel paths disagree on checksums for %s", ", ".join(mismatches))
		return EXIT_FAILURE
	return EXIT_OK


def cmd_scale(params: Parameters, output: str, topologies: Optional[str]) -> int:
	problem = build_pulse_problem(params)
	shapes = parse_topologies(topologies) if topologies is not None else default_topologies(problem.grid)
	_prepare_output(output, params)
	report = run_scaling_sweep(problem, shapes, params["bench.run_count"])
	report.to_csv(os.path.join(output, SCALING_SWEEP_FILE), header=f"config_hash={params.fingerprint}")
	print(report.render())
	report.iterations_consistent(problem.nsteps * problem.solves_per_step)
	return EXIT_OK


def cmd_verify(params: Parameters, checks: Optional[str], seed: Optional[int]) -> int:
	names = None if checks is None else [c.strip() for c in checks.split(",") if c.strip()]
	results = run_checks(names, seed if seed is not None else params["bench.seed"])
	for result in results:
		print(result.line())
	passed = sum(r.passed for r in results)
	print(f"{passed} of {len(results)} checks passed")
	return EXIT_OK if passed == len(results) else EXIT_FAILURE


def main(argv: Optional[List[str]] = None) -> int:
	parser = build_parser()
	try:
		args = parser.parse_args(argv)
	except SystemExit as e:
		return EXIT_OK if e.code in (0, None) else EXIT_USAGE
	configure_logging(args.verbose)
	try:
		params = load_parameters(args.config, args.overrides)
		if args.command == "run":
			return cmd_run(params, args.output)
		if args.command == "bench":
			return cmd_bench(params, args.output)
		if args.command == "scale":
			return cmd_scale(params, args.output, args.topologies)
		return cmd_verify(params, args.checks, args.seed)
	except (ConfigError, GridError, CommunicatorError, OperatorError, PreconditionerError, SolverError, KernelError,
	        BenchError, PulseError, VerifyError) as e:
		logger.error("%s", e)
		return EXIT_USAGE


if __name__ == "__main__":
	sys.exit(main())
