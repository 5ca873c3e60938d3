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

import enum
import logging
import statistics
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from grid import BoundaryCondition, Field, GridError, GridSpec, decompose, halo_exchange, max_worker_count
from kernels import KernelPath, daxpy, ddaxpy, dprod, dscal
from precond import apply_precond, build_spai
from pulse import PulseProblem, run
from stencil_operator import FaceCoefficients, apply_operator, build_diffusion_operator

logger = logging.getLogger(__name__)

KERNEL_COLUMNS = ["kernel", "path", "total_s", "per_call_ns", "checksum"]
SWEEP_COLUMNS = ["np", "nx1_tiles", "nx2_tiles", "time_s_median", "time_s_min", "iters_total",
                 "reductions_total", "runs", "status"]
# Checksums of the two paths must agree to this relative tolerance
CHECKSUM_REL_TOL = 1e-12
# Topology shapes of the reference scaling campaign
REFERENCE_TOPOLOGIES: Tuple[Tuple[int, int], ...] = (
	(1, 1), (10, 1), (20, 1), (10, 2), (5, 4), (25, 1), (40, 1), (20, 2), (10, 4), (50, 1), (25, 2), (10, 5))


class BenchError(Exception):
	"""Custom exception for benchmark configuration and reporting"""
	pass


class BenchKernel(enum.Enum):
	MATVEC = "MATVEC"
	DPROD = "DPROD"
	DAXPY = "DAXPY"
	DSCAL = "DSCAL"
	DDAXPY = "DDAXPY"
	PRECOND = "PRECOND"

	@classmethod
	def parse(cls, text: str) -> BenchKernel:
		for kernel in cls:
			if kernel.value == text.strip().upper():
				return kernel
		raise BenchError(f"unknown bench kernel {text!r}, expected one of {[k.value for k in cls]}")


DEFAULT_KERNELS = (BenchKernel.MATVEC, BenchKernel.DPROD, BenchKernel.DAXPY, BenchKernel.DSCAL, BenchKernel.DDAXPY)


@dataclass
class BenchConfig:
	n: int = 1000
	reps: int = 100_000
	kernels: Tuple[BenchKernel, ...] = DEFAULT_KERNELS
	paths: Tuple[KernelPath, ...] = (KernelPath.SCALAR_REFERENCE, KernelPath.VECTORIZED)
	warmup_reps: int = 1000
	rng_seed: int = 20211
	include_precond: bool = False

	def __post_init__(self) -> None:
		if self.n < 1:
			raise BenchError(f"n must be at least 1, got {self.n}")
		if self.reps < 1:
			raise BenchError(f"reps must be at least 1, got {self.reps}")
		if self.warmup_reps < 0:
			raise BenchError(f"warmup_reps must be non-negative, got {self.warmup_reps}")
		if not self.kernels:
			raise BenchError("at least one kernel must be selected")
		if not self.paths:
			raise BenchError("at least one kernel path must be selected")
		if self.include_precond and BenchKernel.PRECOND not in self.kernels:
			self.kernels = tuple(self.kernels) + (BenchKernel.PRECOND,)


@dataclass
class KernelTiming:
	kernel: BenchKernel
	path: KernelPath
	total_s: float
	reps: int
	checksum: float

	@property
	def per_call_ns(self) -> float:
		return self.total_s / self.reps * 1e9


@dataclass
class BenchReport:
	timings: List[KernelTiming]
	timer_resolution_s: float
	config: BenchConfig

	def to_frame(self) -> pd.DataFrame:
		rows = [{"kernel": t.kernel.value, "path": t.path.value, "total_s": t.total_s,
		         "per_call_ns": t.per_call_ns, "checksum": t.checksum} for t in self.timings]
		return pd.DataFrame(rows, columns=KERNEL_COLUMNS)

	def ratios(self) -> Dict[str, float]:
		"""Vectorized over scalar-reference time per kernel, where both paths ran"""
		by_key = {(t.kernel, t.path): t for t in self.timings}
		out = {}
		for kernel in self.config.kernels:
			scalar = by_key.get((kernel, KernelPath.SCALAR_REFERENCE))
			vectorized = by_key.get((kernel, KernelPath.VECTORIZED))
			if scalar is not None and vectorized is not None and scalar.total_s > 0:
				out[kernel.value] = vectorized.total_s / scalar.total_s
		return out

	def checksum_mismatches(self, rel_tol: float = CHECKSUM_REL_TOL) -> List[str]:
		"""Kernels whose two paths disagree beyond rel_tol"""
		by_kernel: Dict[BenchKernel, List[float]] = {}
		for t in self.timings:
			by_kernel.setdefault(t.kernel, []).append(t.checksum)
		bad = []
		for kernel, sums in by_kernel.items():
			if len(sums) < 2:
				continue
			scale = max(abs(s) for s in sums)
			if max(sums) - min(sums) > rel_tol * max(scale, np.finfo(float).tiny):
				bad.append(kernel.value)
		return bad

	def to_csv(self, path: str, header: Optional[str] = None) -> None:
		with open(path, "w", newline="") as f:
			if header:
				f.write(f"# {header}\n")
			self.to_frame().to_csv(f, index=False, float_format="%.17g")

	def render(self) -> str:
		frame = self.to_frame()
		ratios = self.ratios()
		frame["ratio"] = [ratios.get(k, float("nan")) if p == KernelPath.VECTORIZED.value else float("nan")
		                  for k, p in zip(frame["kernel"], frame["path"])]
		text = frame.to_string(index=False, float_format=lambda v: f"{v:.6g}", na_rep="")
		return f"{text}\ntimer resolution: {self.timer_resolution_s:.3e} s"


def _fold(result: Any, rep: int) -> float:
	"""Pick one value of a kernel result to accumulate into the checksum"""
	if isinstance(result, Field):
		flat = result.interior.reshape(-1)
		return float(flat[rep % flat.size])
	if isinstance(result, np.ndarray):
		return float(result[rep % result.size])
	return float(result)


def _kernel_calls(cfg: BenchConfig, rng: np.random.Generator) -> Dict[BenchKernel, Callable[[KernelPath], Any]]:
	n = cfg.n
	x = rng.random(n)
	y = rng.random(n)
	z = rng.random(n)
	a, b, d = rng.uniform(0.5, 1.5, 3)
	calls: Dict[BenchKernel, Callable[[KernelPath], Any]] = {
		BenchKernel.DPROD: lambda path: dprod(x, y, path),
		BenchKernel.DAXPY: lambda path: daxpy(a, x, y, path),
		BenchKernel.DSCAL: lambda path: dscal(x, d, y, path),
		BenchKernel.DDAXPY: lambda path: ddaxpy(a, x, b, y, z, path),
	}
	if BenchKernel.MATVEC in cfg.kernels or BenchKernel.PRECOND in cfg.kernels:
		# 1-D collapsed system: n equations on an n x 1 x 1 grid
		grid = GridSpec(n, 1, 1, 1.0, 1.0)
		faces = FaceCoefficients(rng.uniform(0.5, 1.5, (n + 1, 1, 1)), np.zeros((n, 2, 1)))
		bc = BoundaryCondition.zero_flux()
		op = build_diffusion_operator(grid, faces, 0.5, bc=bc)
		field_x = Field.from_interior(x.reshape(n, 1, 1))
		halo_exchange(field_x, decompose(grid, 1, 1), bc)
		calls[BenchKernel.MATVEC] = lambda path: apply_operator(op, field_x, path)
		if BenchKernel.PRECOND in cfg.kernels:
			spai = build_spai(op)
			calls[BenchKernel.PRECOND] = lambda path: apply_precond(spai, field_x, path)
	return calls


def run_kernel_bench(cfg: BenchConfig) -> BenchReport:
	"""
	Time every selected (kernel, path) on seeded inputs.

	Each call's result feeds a running checksum inside the timed loop so no call
	can be skipped; per-call time is total / reps.
	"""
	rng = np.random.default_rng(cfg.rng_seed)
	calls = _kernel_calls(cfg, rng)
	resolution = time.get_clock_info("perf_counter").resolution
	timings: List[KernelTiming] = []
	for kernel in cfg.kernels:
		call = calls[kernel]
		for path in cfg.paths:
			for rep in range(cfg.warmup_reps):
				call(path)
			checksum = 0.0
			start = time.perf_counter()
			for rep in range(cfg.reps):
				checksum += _fold(call(path), rep)
			total = time.perf_counter() - start
			timings.append(KernelTiming(kernel, path, total, cfg.reps, checksum))
			logger.info("%s %s: %.3f s total, %.1f ns per call", kernel.value, path.value, total,
			            total / cfg.reps * 1e9)
	return BenchReport(timings, resolution, cfg)


@dataclass
class SweepReport:
	rows: List[Dict[str, Any]] = field(default_factory=list)

	def to_frame(self) -> pd.DataFrame:
		return pd.DataFrame(self.rows, columns=SWEEP_COLUMNS)

	def to_csv(self, path: str, header: Optional[str] = None) -> None:
		with open(path, "w", newline="") as f:
			if header:
				f.write(f"# {header}\n")
			self.to_frame().to_csv(f, index=False)

	def render(self) -> str:
		return self.to_frame().to_string(index=False, na_rep="")

	def iterations_consistent(self, solves: int, per_solve_tolerance: int = 1) -> bool:
		"""Soft check: total iterations of completed rows differ by at most one per solve"""
		totals = [row["iters_total"] for row in self.rows if row["status"] == "ok"]
		if len(totals) < 2:
			return True
		spread = max(totals) - min(totals)
		consistent = spread <= per_solve_tolerance * solves
		if not consistent:
			logger.warning("iteration totals differ by %d across topologies, tolerance %d", spread,
			               per_solve_tolerance * solves)
		return consistent


def _skipped_row(nprx1: int, nprx2: int, reason: str) -> Dict[str, Any]:
	return {"np": nprx1 * nprx2, "nx1_tiles": nprx1, "nx2_tiles": nprx2, "time_s_median": None,
	        "time_s_min": None, "iters_total": None, "reductions_total": None, "runs": 0,
	        "status": f"skipped: {reason}"}


def default_topologies(grid: GridSpec) -> List[Tuple[int, int]]:
	"""Reference topology shapes that divide the grid evenly"""
	return [(p1, p2) for p1, p2 in REFERENCE_TOPOLOGIES if grid.nx1 % p1 == 0 and grid.nx2 % p2 == 0]


def run_scaling_sweep(problem: PulseProblem, topologies: Sequence[Tuple[int, int]], run_count: int = 3,
                      max_workers: Optional[int] = None) -> SweepReport:
	"""
	Run the pulse problem once per topology and repetition.

	Args:
		problem: Pulse workload
		topologies: (nprx1, nprx2) shapes, one row each
		run_count: Repetitions per topology; median and min wall time are reported
		max_workers: Worker cap, defaults to the environment cap

	Returns:
		SweepReport; invalid or oversized topologies produce skipped rows
	"""
	if run_count < 1:
		raise BenchError(f"run_count must be at least 1, got {run_count}")
	cap = max_worker_count() if max_workers is None else max_workers
	report = SweepReport()
	for nprx1, nprx2 in topologies:
		try:
			topology = decompose(problem.grid, nprx1, nprx2)
		except GridError as e:
			report.rows.append(_skipped_row(nprx1, nprx2, str(e)))
			continue
		if topology.worker_count > cap:
			report.rows.append(_skipped_row(nprx1, nprx2, f"{topology.worker_count} workers exceed cap {cap}"))
			continue
		logger.info("sweep topology %dx%d, %d runs", nprx1, nprx2, run_count)
		times: List[float] = []
		counts = set()
		failure = None
		for _ in range(run_count):
			result = run(problem, topology)
			if result.failed:
				failure = result.failure
				break
			times.append(result.wall_time_s)
			counts.add((result.total_iterations, result.total_reduction_events))
		if failure is not None:
			report.rows.append(_skipped_row(nprx1, nprx2, f"run failed: {failure}"))
			continue
		if len(counts) != 1:
			logger.warning("topology %dx%d: repeated runs disagree on counts %s", nprx1, nprx2, sorted(counts))
		iterations, reductions = sorted(counts)[0]
		report.rows.append({"np": topology.worker_count, "nx1_tiles": nprx1, "nx2_tiles": nprx2,
		                    "time_s_median": statistics.median(times), "time_s_min": min(times),
		                    "iters_total": iterations, "reductions_total": reductions, "runs": run_count,
		                    "status": "ok"})
	return report
