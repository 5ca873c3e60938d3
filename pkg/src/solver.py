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
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from grid import Communicator, Field, Tile, TileTopology, decompose, gather, run_tile_workers, scatter
from kernels import KernelPath, daxpy, ddaxpy, dscal, ganged_dprod
from precond import PreconditionerKind, PreconditionerSpec, apply_precond
from stencil_operator import OperatorSpec, apply_operator

logger = logging.getLogger(__name__)

# Breakdown thresholds
RHO_BREAKDOWN_FACTOR = 1e-30
OMEGA_BREAKDOWN_FLOOR = 1e-300
# Tolerance used when comparing variant iterates; small enough that only an exact zero residual converges
PROBE_TOL = float(np.finfo(np.float64).tiny)


class SolverError(Exception):
	"""Custom exception for solver setup faults"""
	pass


class SolverVariant(enum.Enum):
	CLASSIC = "classic"
	GANGED = "ganged"

	@classmethod
	def parse(cls, text: str) -> SolverVariant:
		for variant in cls:
			if variant.value == text.strip().lower():
				return variant
		raise SolverError(f"unknown solver variant {text!r}, expected one of {[v.value for v in cls]}")


class Outcome(enum.Enum):
	CONVERGED = "converged"
	MAX_ITER = "max_iter"
	BREAKDOWN = "breakdown"


class BreakdownKind(enum.Enum):
	RHO_ZERO = "rho_zero"
	OMEGA_ZERO = "omega_zero"


@dataclass
class SolverConfig:
	tol: float = 1e-8
	max_iter: Optional[int] = None
	variant: SolverVariant = SolverVariant.GANGED
	precond: PreconditionerKind = PreconditionerKind.SPAI
	warm_start: bool = False
	kernel_path: KernelPath = KernelPath.VECTORIZED

	def __post_init__(self) -> None:
		if not (self.tol > 0) or not math.isfinite(self.tol):
			raise SolverError(f"tol must be positive and finite, got {self.tol}")
		if self.max_iter is not None and self.max_iter < 1:
			raise SolverError(f"max_iter must be at least 1, got {self.max_iter}")

	def iteration_cap(self, unknowns: int) -> int:
		"""max_iter, or 10 * sqrt(N) when unset"""
		if self.max_iter is not None:
			return self.max_iter
		return max(1, int(10 * math.sqrt(unknowns)))


@dataclass
class SolverTimings:
	"""Seconds spent per routine, monotonic clock"""
	matvec_s: float = 0.0
	precond_s: float = 0.0
	reduction_s: float = 0.0
	halo_s: float = 0.0

	def add(self, other: SolverTimings) -> None:
		self.matvec_s += other.matvec_s
		self.precond_s += other.precond_s
		self.reduction_s += other.reduction_s
		self.halo_s += other.halo_s

	def to_dict(self) -> Dict[str, float]:
		return {"matvec_s": self.matvec_s, "precond_s": self.precond_s,
		        "reduction_s": self.reduction_s, "halo_s": self.halo_s}


@dataclass
class SolverStats:
	variant: SolverVariant = SolverVariant.GANGED
	iterations: int = 0
	reduction_events: int = 0
	matvec_count: int = 0
	residual_history: List[float] = field(default_factory=list)
	outcome: Outcome = Outcome.MAX_ITER
	breakdown: Optional[BreakdownKind] = None
	final_relative_residual: float = float("nan")
	setup_reductions: int = 0
	reductions_per_iteration: List[int] = field(default_factory=list)
	residual_checks: int = 0
	timings: SolverTimings = field(default_factory=SolverTimings)

	@property
	def converged(self) -> bool:
		return self.outcome is Outcome.CONVERGED

	@property
	def outcome_label(self) -> str:
		if self.outcome is Outcome.BREAKDOWN and self.breakdown is not None:
			return f"breakdown({self.breakdown.value})"
		return self.outcome.value

	def to_record(self) -> Dict[str, Any]:
		return {
			"iterations": self.iterations,
			"reduction_events": self.reduction_events,
			"matvec_count": self.matvec_count,
			"outcome": self.outcome_label,
			"final_relative_residual": self.final_relative_residual,
			"variant": self.variant.value,
			"setup_reductions": self.setup_reductions,
			"reductions_per_iteration": list(self.reductions_per_iteration),
			"residual_checks": self.residual_checks,
			"residual_history": list(self.residual_history),
			"timings": self.timings.to_dict(),
		}


IterateCallback = Callable[[int, np.ndarray], None]


class _TileSolver:
	"""
	One worker's share of a BiCGSTAB solve.

	Vectors are tile-interior arrays; scalar recurrences are computed redundantly on
	every worker from globally reduced inner products.
	"""

	def __init__(self, comm: Communicator, tile: Tile, a: OperatorSpec, m: PreconditionerSpec,
	             cfg: SolverConfig):
		self.comm = comm
		self.tile = tile
		self.a = a
		self.m = m
		self.cfg = cfg
		self.path = cfg.kernel_path
		self.work = Field.for_tile(tile, a.shape[2])
		self.stats = SolverStats(variant=cfg.variant)
		self.b_norm = 1.0
		self._events = 0

	def reduce(self, pairs: Sequence[Tuple[np.ndarray, np.ndarray]], in_iteration: bool = True) -> np.ndarray:
		local = ganged_dprod(pairs, self.path)
		start = time.perf_counter()
		total = self.comm.global_reduce_sum(self.tile.tile_id, local)
		self.stats.timings.reduction_s += time.perf_counter() - start
		self.stats.reduction_events += 1
		if in_iteration:
			self._events += 1
		return total

	def _load(self, vector: np.ndarray) -> Field:
		self.work.interior[...] = vector
		start = time.perf_counter()
		self.comm.halo_exchange(self.work, self.a.bc)
		self.stats.timings.halo_s += time.perf_counter() - start
		return self.work

	def matvec(self, vector: np.ndarray) -> np.ndarray:
		loaded = self._load(vector)
		start = time.perf_counter()
		result = apply_operator(self.a, loaded, self.path).interior.copy()
		self.stats.timings.matvec_s += time.perf_counter() - start
		self.stats.matvec_count += 1
		return result

	def precondition(self, vector: np.ndarray) -> np.ndarray:
		if self.m.kind is PreconditionerKind.IDENTITY:
			return vector.copy()
		if self.m.needs_halo:
			loaded = self._load(vector)
		else:
			self.work.interior[...] = vector
			loaded = self.work
		start = time.perf_counter()
		result = apply_precond(self.m, loaded, self.path).interior.copy()
		self.stats.timings.precond_s += time.perf_counter() - start
		return result

	def _close_iteration(self, relative_residual: float) -> None:
		self.stats.iterations += 1
		self.stats.reductions_per_iteration.append(self._events)
		self.stats.residual_history.append(relative_residual)
		self._events = 0

	def _close_partial(self) -> None:
		# an iteration cut short by breakdown still owns the events it issued
		if self._events:
			self.stats.reductions_per_iteration.append(self._events)
			self._events = 0

	def _true_residual(self, b: np.ndarray, x: np.ndarray, r_hat: np.ndarray) -> Tuple[np.ndarray, float, float]:
		r_true = dscal(b, 1.0, self.matvec(x), self.path)
		rr, rho = self.reduce([(r_true, r_true), (r_hat, r_true)], in_iteration=False)
		self.stats.residual_checks += 1
		return r_true, float(rr), float(rho)

	def solve(self, b: np.ndarray, x0: np.ndarray, cap: int,
	          callback: Optional[IterateCallback] = None) -> Tuple[np.ndarray, SolverStats]:
		"""
		Right-preconditioned BiCGSTAB on this tile; returns the local solution and statistics.

		Classic issues 4 reduction events per iteration and Ganged 2. The iteration that
		exits on the half-step residual issues 3 (Classic) or 2 (Ganged).
		"""
		stats = self.stats
		path = self.path
		ganged = self.cfg.variant is SolverVariant.GANGED
		tol = self.cfg.tol

		x = x0.copy()
		r = dscal(b, 1.0, self.matvec(x), path)
		r_hat = r.copy()
		if ganged:
			bb, rr, rho = self.reduce([(b, b), (r, r), (r_hat, r)], in_iteration=False)
		else:
			bb, rr = self.reduce([(b, b), (r, r)], in_iteration=False)
			rho = 0.0
		stats.setup_reductions = 1

		b_norm = math.sqrt(bb)
		self.b_norm = b_norm
		if b_norm == 0.0:
			stats.outcome = Outcome.CONVERGED
			stats.final_relative_residual = 0.0
			return np.zeros_like(b), stats
		threshold = tol * b_norm
		r_norm = math.sqrt(max(rr, 0.0))
		stats.residual_history.append(r_norm / b_norm)
		if r_norm <= threshold:
			stats.outcome = Outcome.CONVERGED
			stats.final_relative_residual = r_norm / b_norm
			return x, stats
		rho_floor = RHO_BREAKDOWN_FACTOR * r_norm * r_norm

		rho_prev = alpha = omega = 1.0
		p = np.zeros_like(b)
		v = np.zeros_like(b)
		certified = False

		while stats.iterations < cap:
			if not ganged:
				rho = float(self.reduce([(r_hat, r)])[0])
			if abs(rho) < rho_floor:
				self._breakdown(BreakdownKind.RHO_ZERO)
				break
			beta = (rho / rho_prev) * (alpha / omega)
			p = daxpy(beta, daxpy(-omega, v, p, path), r, path)
			p_hat = self.precondition(p)
			v = self.matvec(p_hat)
			rv = float(self.reduce([(r_hat, v)])[0])
			if rv == 0.0:
				self._breakdown(BreakdownKind.RHO_ZERO)
				break
			alpha = rho / rv
			s = dscal(r, alpha, v, path)
			s_hat = self.precondition(s)
			t = self.matvec(s_hat)
			if ganged:
				ts, tt, ss, rs, rt = self.reduce([(t, s), (t, t), (s, s), (r_hat, s), (r_hat, t)])
			else:
				ts, tt, ss = self.reduce([(t, s), (t, t), (s, s)])
			s_norm = math.sqrt(max(ss, 0.0))

			if s_norm <= threshold:
				x = daxpy(alpha, p_hat, x, path)
				r = s
				self._close_iteration(s_norm / b_norm)
				if callback is not None:
					callback(stats.iterations, x)
				r, certified, rho = self._certify(b, x, r_hat, threshold)
				if certified:
					break
				rho_prev, omega = 1.0, 1.0
				alpha = 1.0
				p = np.zeros_like(b)
				v = np.zeros_like(b)
				continue

			if abs(tt) < OMEGA_BREAKDOWN_FLOOR or ts / tt == 0.0:
				x = daxpy(alpha, p_hat, x, path)
				self._breakdown(BreakdownKind.OMEGA_ZERO)
				break
			omega = ts / tt
			x = ddaxpy(alpha, p_hat, omega, s_hat, x, path)
			r = dscal(s, omega, t, path)
			rho_prev = rho
			if ganged:
				rr = max(ss - 2.0 * omega * ts + omega * omega * tt, 0.0)
				rho = rs - omega * rt
			else:
				rr = float(self.reduce([(r, r)])[0])
			r_norm = math.sqrt(max(rr, 0.0))
			self._close_iteration(r_norm / b_norm)
			if callback is not None:
				callback(stats.iterations, x)

			if r_norm <= threshold:
				r, certified, rho_check = self._certify(b, x, r_hat, threshold)
				if certified:
					break
				if ganged:
					rho = rho_check

		if not certified:
			if stats.outcome is not Outcome.BREAKDOWN:
				stats.outcome = Outcome.MAX_ITER
			_, rr_true, _ = self._true_residual(b, x, r_hat)
			stats.final_relative_residual = math.sqrt(rr_true) / b_norm
		return x, stats

	def _certify(self, b: np.ndarray, x: np.ndarray, r_hat: np.ndarray,
	             threshold: float) -> Tuple[np.ndarray, bool, float]:
		"""True-residual recheck; on failure the recursive residual is replaced by the true one"""
		r_true, rr_true, rho_true = self._true_residual(b, x, r_hat)
		true_norm = math.sqrt(rr_true)
		if true_norm <= threshold:
			self.stats.outcome = Outcome.CONVERGED
			self.stats.final_relative_residual = true_norm / self.b_norm
			return r_true, True, rho_true
		logger.debug("tile %d: true residual %.3e above threshold %.3e, replacing recursive residual",
		             self.tile.tile_id, true_norm, threshold)
		return r_true, False, rho_true

	def _breakdown(self, kind: BreakdownKind) -> None:
		self._close_partial()
		self.stats.outcome = Outcome.BREAKDOWN
		self.stats.breakdown = kind


def _check_field(name: str, values: Field, op: OperatorSpec) -> None:
	if values.interior_shape != op.shape:
		raise SolverError(f"{name} interior {values.interior_shape} does not match operator {op.shape}")
	if not np.isfinite(values.interior).all():
		raise SolverError(f"{name} contains non-finite values")


def bicgstab(a: OperatorSpec, m: PreconditionerSpec, b: Field, x0: Optional[Field] = None,
             cfg: Optional[SolverConfig] = None, topology: Optional[TileTopology] = None,
             callback: Optional[IterateCallback] = None) -> Tuple[Field, SolverStats]:
	"""
	Solve A x = b with right-preconditioned BiCGSTAB.

	Args:
		a: Global operator
		m: Global preconditioner built from `a`
		b: Right-hand side, global interior
		x0: Initial guess, zero when omitted
		cfg: Solver configuration
		topology: Tile decomposition to solve on; a single tile when omitted
		callback: Called with (iteration, x) after every iteration; single-tile solves only

	Returns:
		Solution field and the statistics of tile 0 (identical on every tile)

	Raises:
		SolverError: On inconsistent shapes, non-finite input or a callback on a multi-tile solve
	"""
	cfg = cfg or SolverConfig()
	_check_field("b", b, a)
	if x0 is None:
		x0 = b.zeros_like()
	_check_field("x0", x0, a)
	if topology is None:
		topology = decompose(a.grid, 1, 1)
	if topology.grid.shape != a.shape:
		raise SolverError(f"topology grid {topology.grid.shape} does not match operator {a.shape}")
	if callback is not None and topology.worker_count > 1:
		raise SolverError("iterate callbacks are only supported on single-tile solves")
	cap = cfg.iteration_cap(a.diag.size)
	b_tiles = scatter(b.interior, topology)
	x_tiles = scatter(x0.interior, topology)

	def work(comm: Communicator, tile: Tile) -> Tuple[np.ndarray, SolverStats]:
		solver = _TileSolver(comm, tile, a.local(tile), m.local(tile), cfg)
		return solver.solve(b_tiles[tile.tile_id].interior.copy(), x_tiles[tile.tile_id].interior.copy(),
		                    cap, callback)

	results = run_tile_workers(topology, work)
	solution = gather([Field.from_interior(x, tile.tile_id) for (x, _), tile in zip(results, topology.tiles)],
	                  topology)
	stats = results[0][1]
	logger.debug("bicgstab %s: %s after %d iterations, relative residual %.3e",
	             cfg.variant.value, stats.outcome_label, stats.iterations, stats.final_relative_residual)
	return Field.from_interior(solution), stats


def bicgstab_variant_equivalence_probe(a: OperatorSpec, m: PreconditionerSpec, b: Field,
                                       x0: Optional[Field], n_iters: int,
                                       kernel_path: KernelPath = KernelPath.VECTORIZED
                                       ) -> List[Tuple[np.ndarray, np.ndarray]]:
	"""
	Iterate pairs (x_k Classic, x_k Ganged) for k = 1..n_iters.

	Both variants run with a vanishing tolerance so neither stops early unless it
	reaches an exact solution or breaks down; the list is cut to the shorter run.
	"""
	if n_iters < 1:
		raise SolverError(f"n_iters must be at least 1, got {n_iters}")
	iterates = {}
	for variant in SolverVariant:
		recorded: List[np.ndarray] = []
		cfg = SolverConfig(tol=PROBE_TOL, max_iter=n_iters, variant=variant, precond=m.kind, kernel_path=kernel_path)
		bicgstab(a, m, b, x0, cfg, callback=lambda k, x, out=recorded: out.append(x.copy()))
		iterates[variant] = recorded
	classic, ganged = iterates[SolverVariant.CLASSIC], iterates[SolverVariant.GANGED]
	count = min(len(classic), len(ganged))
	return list(zip(classic[:count], ganged[:count]))
