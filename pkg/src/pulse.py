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

import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from grid import BoundaryCondition, Field, GridSpec, TileTopology, decompose
from oracle import gaussian_profile
from precond import build_preconditioner
from solver import SolverConfig, SolverStats, SolverTimings, bicgstab
from stencil_operator import FaceCoefficients, Limiter, build_diffusion_operator, flux_limited_D

logger = logging.getLogger(__name__)

# Resolution and boundary clearance rules, in units of the pulse width
MIN_WIDTH_IN_ZONES = 3.0
ANALYTIC_CLEARANCE = 5.0
LIMITER_ENERGY_FLOOR = 1e-12
SNAPSHOT_HEADER_DTYPE = "<i8"
SNAPSHOT_VALUE_DTYPE = "<f8"


class PulseError(Exception):
	"""Custom exception for pulse problem operations"""
	pass


class StepFailure(PulseError):
	"""A linear solve inside a time step did not converge"""

	def __init__(self, message: str, stats: List[SolverStats]):
		super().__init__(message)
		self.stats = stats


def _default_grid() -> GridSpec:
	return GridSpec(200, 100, 2, 0.01, 0.01)


@dataclass
class PulseProblem:
	"""Implicit diffusion of a 2-D Gaussian pulse carried by every species"""
	grid: GridSpec = field(default_factory=_default_grid)
	sigma0: float = 0.033
	center: Tuple[float, float] = (1.0, 0.5)
	amplitude: float = 1.0
	d0: float = 0.04
	dt: float = 1e-3
	nsteps: int = 100
	solves_per_step: int = 3
	limiter: Limiter = Limiter.NONE
	opacity: float = 1.0
	light_speed: float = 1.0
	coupling: float = 0.0
	bc: BoundaryCondition = field(default_factory=BoundaryCondition.zero_flux)
	solver: SolverConfig = field(default_factory=SolverConfig)
	topology: Tuple[int, int] = (1, 1)
	snapshot_every: int = 0

	def __post_init__(self) -> None:
		min_width = MIN_WIDTH_IN_ZONES * max(self.grid.dx1, self.grid.dx2)
		if self.sigma0 < min_width * (1.0 - 1e-12):
			raise PulseError(f"sigma0={self.sigma0} under-resolves the pulse, need >= {min_width}")
		if not self.amplitude > 0:
			raise PulseError(f"amplitude must be positive, got {self.amplitude}")
		if self.d0 < 0 or not math.isfinite(self.d0):
			raise PulseError(f"d0 must be non-negative, got {self.d0}")
		if not self.dt > 0 or not math.isfinite(self.dt):
			raise PulseError(f"dt must be positive, got {self.dt}")
		if self.nsteps < 0:
			raise PulseError(f"nsteps must be non-negative, got {self.nsteps}")
		if self.solves_per_step < 1:
			raise PulseError(f"solves_per_step must be at least 1, got {self.solves_per_step}")
		if self.coupling < 0:
			raise PulseError(f"coupling rate must be non-negative, got {self.coupling}")
		if self.snapshot_every < 0:
			raise PulseError(f"snapshot_every must be non-negative, got {self.snapshot_every}")

	@property
	def final_time(self) -> float:
		return self.nsteps * self.dt

	def width(self, t: float) -> float:
		"""sigma(t) of the free-space solution"""
		return math.sqrt(self.sigma0 * self.sigma0 + 2.0 * self.d0 * t)

	def boundary_clearance(self, t: float) -> float:
		"""Distance from the center to the nearest boundary, in units of sigma(t)"""
		extent1, extent2 = self.grid.extent
		distance = min(self.center[0], extent1 - self.center[0], self.center[1], extent2 - self.center[1])
		return distance / self.width(t)

	def coupling_matrix(self) -> Optional[np.ndarray]:
		"""Conservative exchange block k (ns I - J); column sums vanish"""
		if self.coupling == 0.0:
			return None
		ns = self.grid.nspecies
		return self.coupling * (ns * np.eye(ns) - np.ones((ns, ns)))

	def with_overrides(self, **changes: Any) -> PulseProblem:
		return dataclasses.replace(self, **changes)


def init_gaussian(problem: PulseProblem) -> Field:
	"""E(x, 0) = amplitude exp(-|x - center|^2 / (2 sigma0^2)) at zone centers, every species"""
	x1, x2 = problem.grid.zone_centers()
	profile = gaussian_profile(x1, x2, problem.center, problem.amplitude, problem.sigma0 ** 2)
	values = np.repeat(profile[:, :, None], problem.grid.nspecies, axis=2)
	return Field.from_interior(values)


def analytic_solution(problem: PulseProblem, t: float) -> Field:
	"""
	Free-space solution amplitude (sigma0^2 / sigma(t)^2) exp(-|x - center|^2 / (2 sigma(t)^2)).

	Raises:
		PulseError: If the limiter or coupling is on, or the pulse comes closer than
			ANALYTIC_CLEARANCE widths to a boundary
	"""
	if problem.limiter is not Limiter.NONE:
		raise PulseError("analytic solution needs the limiter disabled")
	if problem.coupling != 0.0:
		raise PulseError("analytic solution needs zero species coupling")
	if t < 0:
		raise PulseError(f"time must be non-negative, got {t}")
	clearance = problem.boundary_clearance(t)
	if clearance < ANALYTIC_CLEARANCE * (1.0 - 1e-12):
		raise PulseError(f"pulse is {clearance:.2f} widths from the boundary at t={t}, need {ANALYTIC_CLEARANCE}")
	variance = problem.width(t) ** 2
	x1, x2 = problem.grid.zone_centers()
	peak = problem.amplitude * problem.sigma0 ** 2 / variance
	profile = gaussian_profile(x1, x2, problem.center, peak, variance)
	return Field.from_interior(np.repeat(profile[:, :, None], problem.grid.nspecies, axis=2))


def _face_coefficients(problem: PulseProblem, state: np.ndarray) -> FaceCoefficients:
	if problem.limiter is Limiter.NONE:
		return FaceCoefficients.constant(problem.grid, problem.d0)
	# far-field zones may dip below zero by the solver tolerance
	floored = np.maximum(state, LIMITER_ENERGY_FLOOR * problem.amplitude)
	return flux_limited_D(floored, problem.opacity, problem.grid, problem.limiter, problem.light_speed)


def step(state: Field, problem: PulseProblem,
         topology: Optional[TileTopology] = None) -> Tuple[Field, List[SolverStats]]:
	"""
	Advance one time step as solves_per_step backward-Euler stages of dt / solves_per_step.

	Coefficients are frozen at the start of each stage; every stage rebuilds the
	operator and preconditioner before its solve.

	Raises:
		StepFailure: If a solve does not converge; carries the stats of the step so far
	"""
	current = state.interior.copy()
	if current.shape != problem.grid.shape:
		raise PulseError(f"state {current.shape} does not match grid {problem.grid.shape}")
	if not np.isfinite(current).all():
		raise PulseError("state contains non-finite values")
	if topology is None:
		topology = decompose(problem.grid, *problem.topology)
	stage_dt = problem.dt / problem.solves_per_step
	couple = problem.coupling_matrix()
	records: List[SolverStats] = []
	for stage in range(problem.solves_per_step):
		op = build_diffusion_operator(problem.grid, _face_coefficients(problem, current), stage_dt, couple, problem.bc)
		m = build_preconditioner(problem.solver.precond, op)
		b = Field.from_interior(current + op.boundary_rhs)
		x0 = Field.from_interior(current) if problem.solver.warm_start else None
		x, stats = bicgstab(op, m, b, x0, problem.solver, topology)
		records.append(stats)
		if not stats.converged:
			raise StepFailure(f"stage {stage} ended with {stats.outcome_label} after {stats.iterations} iterations, "
			                  f"relative residual {stats.final_relative_residual:.3e}", records)
		current = x.interior.copy()
	return Field.from_interior(current), records


def total_energy(values: Field) -> float:
	"""Zone sum of the energy density over every species"""
	return float(np.sum(values.interior))


@dataclass(eq=False)
class RunReport:
	"""Outcome of one pulse run; serializable except for the final field"""
	final: Field
	steps: List[List[SolverStats]]
	wall_time_s: float
	initial_energy: float
	final_energy: float
	topology: Tuple[int, int]
	failed: bool = False
	failure: Optional[str] = None

	@property
	def solves(self) -> List[SolverStats]:
		return [stats for step_stats in self.steps for stats in step_stats]

	@property
	def solve_count(self) -> int:
		return len(self.solves)

	@property
	def steps_completed(self) -> int:
		return len(self.steps) - (1 if self.failed else 0)

	@property
	def total_iterations(self) -> int:
		return sum(s.iterations for s in self.solves)

	@property
	def total_reduction_events(self) -> int:
		return sum(s.reduction_events for s in self.solves)

	@property
	def total_matvecs(self) -> int:
		return sum(s.matvec_count for s in self.solves)

	@property
	def all_converged(self) -> bool:
		return not self.failed and all(s.converged for s in self.solves)

	def timings(self) -> SolverTimings:
		total = SolverTimings()
		for stats in self.solves:
			total.add(stats.timings)
		return total

	def field_checksum(self) -> str:
		return hashlib.blake2b(np.ascontiguousarray(self.final.interior).tobytes(), digest_size=16).hexdigest()

	def to_dict(self) -> Dict[str, Any]:
		return {
			"failed": self.failed,
			"failure": self.failure,
			"topology": list(self.topology),
			"steps_completed": self.steps_completed,
			"solve_count": self.solve_count,
			"total_iterations": self.total_iterations,
			"total_reduction_events": self.total_reduction_events,
			"total_matvecs": self.total_matvecs,
			"wall_time_s": self.wall_time_s,
			"timings": self.timings().to_dict(),
			"initial_energy": self.initial_energy,
			"final_energy": self.final_energy,
			"field_checksum": self.field_checksum(),
			"steps": [[stats.to_record() for stats in step_stats] for step_stats in self.steps],
		}

	def write(self, path: str, config_hash: str) -> None:
		"""Structured text report: a provenance comment line followed by JSON"""
		with open(path, "w") as f:
			f.write(f"# config_hash={config_hash}\n")
			json.dump(self.to_dict(), f, indent=2)
			f.write("\n")


def read_run_report(path: str) -> Dict[str, Any]:
	with open(path, "r") as f:
		body = "".join(line for line in f if not line.startswith("#"))
	return json.loads(body)


def write_snapshot(path: str, values: Field) -> None:
	"""Header nx1, nx2, nspecies as little-endian int64, then float64 with i2 outer, i1, species inner"""
	data = values.interior
	header = np.asarray(data.shape, dtype=SNAPSHOT_HEADER_DTYPE)
	body = np.ascontiguousarray(data.transpose(1, 0, 2), dtype=SNAPSHOT_VALUE_DTYPE)
	with open(path, "wb") as f:
		f.write(header.tobytes())
		f.write(body.tobytes())


def read_snapshot(path: str) -> np.ndarray:
	with open(path, "rb") as f:
		raw = f.read()
	header = np.frombuffer(raw[:24], dtype=SNAPSHOT_HEADER_DTYPE)
	if header.size != 3:
		raise PulseError(f"snapshot {path} is truncated")
	n1, n2, ns = (int(v) for v in header)
	body = np.frombuffer(raw[24:], dtype=SNAPSHOT_VALUE_DTYPE)
	if body.size != n1 * n2 * ns:
		raise PulseError(f"snapshot {path} holds {body.size} values, header promises {n1 * n2 * ns}")
	return body.reshape(n2, n1, ns).transpose(1, 0, 2).copy()


def run(problem: PulseProblem, topology: Optional[TileTopology] = None,
        snapshot_dir: Optional[str] = None) -> RunReport:
	"""
	Run nsteps time steps from the Gaussian initial state.

	Args:
		problem: Pulse problem
		topology: Decomposition, built from problem.topology when omitted
		snapshot_dir: Directory for field snapshots every problem.snapshot_every steps

	Returns:
		RunReport; a step failure stops the run and the report keeps the partial record
	"""
	if topology is None:
		topology = decompose(problem.grid, *problem.topology)
	if snapshot_dir is not None and problem.snapshot_every > 0:
		os.makedirs(snapshot_dir, exist_ok=True)
	state = init_gaussian(problem)
	initial_energy = total_energy(state)
	steps: List[List[SolverStats]] = []
	failure: Optional[str] = None

	logger.info("pulse run on %dx%dx%d, topology %dx%d, total steps : %d", problem.grid.nx1, problem.grid.nx2,
	            problem.grid.nspecies, topology.nprx1, topology.nprx2, problem.nsteps)
	start = time.perf_counter()
	for n in range(problem.nsteps):
		try:
			state, records = step(state, problem, topology)
		except StepFailure as e:
			steps.append(e.stats)
			failure = f"step {n}: {e}"
			logger.error("pulse run aborted at %s", failure)
			break
		steps.append(records)
		logger.debug("step %d: iterations %s", n, [s.iterations for s in records])
		if (n + 1) % max(1, problem.nsteps // 10) == 0:
			logger.info("step %d of %d done, iterations this step: %d", n + 1, problem.nsteps,
			            sum(s.iterations for s in records))
		if snapshot_dir is not None and problem.snapshot_every > 0 and (n + 1) % problem.snapshot_every == 0:
			write_snapshot(os.path.join(snapshot_dir, f"snapshot_{n + 1:05d}.bin"), state)
	wall = time.perf_counter() - start

	report = RunReport(state, steps, wall, initial_energy, total_energy(state), (topology.nprx1, topology.nprx2),
	                   failed=failure is not None, failure=failure)
	logger.info("pulse run finished in %.3f s: %d solves, %d iterations, %d reduction events", wall,
	            report.solve_count, report.total_iterations, report.total_reduction_events)
	return report


@dataclass
class ConvergenceStudy:
	dts: List[float]
	errors: List[float]
	error_ratios: List[float]
	self_convergence_ratios: List[float]


def _relative_l2(values: np.ndarray, reference: np.ndarray) -> float:
	return float(np.linalg.norm(values - reference) / np.linalg.norm(reference))


def convergence_study(problem: PulseProblem, dts: Sequence[float]) -> ConvergenceStudy:
	"""
	Errors against the analytic solution at problem.final_time for each dt.

	Every dt must divide the final time into a whole number of steps. Also reports
	the self-convergence ratios |E_dt - E_dt/2| / |E_dt/2 - E_dt/4| for consecutive
	triples, which isolate the temporal error from the spatial one.
	"""
	if len(dts) < 2:
		raise PulseError("a convergence study needs at least two time steps")
	final_time = problem.final_time
	reference = analytic_solution(problem, final_time).interior
	finals: List[np.ndarray] = []
	errors: List[float] = []
	for dt in dts:
		nsteps = int(round(final_time / dt))
		if nsteps < 1 or not math.isclose(nsteps * dt, final_time, rel_tol=1e-9):
			raise PulseError(f"dt={dt} does not divide the final time {final_time}")
		report = run(problem.with_overrides(dt=dt, nsteps=nsteps))
		if report.failed:
			raise PulseError(f"convergence run with dt={dt} failed: {report.failure}")
		finals.append(report.final.interior)
		errors.append(_relative_l2(report.final.interior, reference))
		logger.info("convergence study dt=%g: relative L2 error %.4e", dt, errors[-1])
	error_ratios = [errors[i] / errors[i + 1] for i in range(len(errors) - 1)]
	self_ratios = [float(np.linalg.norm(finals[i] - finals[i + 1]) / np.linalg.norm(finals[i + 1] - finals[i + 2]))
	               for i in range(len(finals) - 2)]
	return ConvergenceStudy(list(dts), errors, error_ratios, self_ratios)
