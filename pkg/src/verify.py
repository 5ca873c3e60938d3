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

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

import oracle
from grid import BoundaryCondition, Field, GridSpec, decompose, halo_exchange
from kernels import KernelPath
from precond import build_block_jacobi, build_spai
from pulse import PulseProblem, analytic_solution, run
from solver import SolverConfig, SolverVariant, bicgstab, bicgstab_variant_equivalence_probe
from stencil_operator import FaceCoefficients, OperatorSpec, apply_operator, build_diffusion_operator

logger = logging.getLogger(__name__)

OPERATOR_TOL = 1e-12
SOLVE_TOL = 1e-10
SOLUTION_TOL = 1e-6
SPAI_TOL = 1e-10
VARIANT_TOL = 1e-10
VARIANT_ITERS = 10
PULSE_ERROR_BOUND = 0.1
DEFAULT_SEED = 20211


class VerifyError(Exception):
	"""Custom exception for the oracle check suite"""
	pass


@dataclass
class CheckResult:
	name: str
	passed: bool
	measured: float
	bound: float
	detail: str = ""

	def line(self) -> str:
		status = "PASS" if self.passed else "FAIL"
		text = f"{status} {self.name}: measured {self.measured:.3e}, bound {self.bound:.3e}"
		return f"{text} ({self.detail})" if self.detail else text


def random_operator(rng: np.random.Generator, nx1: int, nx2: int, nspecies: int = 2,
                    bc: Optional[BoundaryCondition] = None, dt: float = 0.3) -> OperatorSpec:
	"""Diffusion operator with random positive face coefficients and conservative random coupling"""
	grid = GridSpec(nx1, nx2, nspecies, 1.0, 1.0)
	faces = FaceCoefficients(rng.uniform(0.5, 1.5, (nx1 + 1, nx2, nspecies)),
	                         rng.uniform(0.5, 1.5, (nx1, nx2 + 1, nspecies)))
	couple = None
	if nspecies > 1:
		couple = -rng.uniform(0.0, 0.5, (nx1, nx2, nspecies, nspecies))
		species = np.arange(nspecies)
		couple[..., species, species] = 0.0
		couple[..., species, species] = -couple.sum(axis=-2)
	return build_diffusion_operator(grid, faces, dt, couple, bc)


def _random_field(rng: np.random.Generator, op: OperatorSpec) -> Field:
	values = Field.from_interior(rng.standard_normal(op.shape))
	halo_exchange(values, decompose(op.grid, 1, 1), op.bc)
	return values


def _relative(error: float, scale: float) -> float:
	return error / max(scale, np.finfo(float).tiny)


def check_operator(rng: np.random.Generator) -> CheckResult:
	"""Stencil application on both kernel paths against the dense assembly"""
	worst = 0.0
	for bc in (BoundaryCondition.zero_flux(), BoundaryCondition.dirichlet(0.0)):
		op = random_operator(rng, 6, 5, 2, bc)
		x = _random_field(rng, op)
		expected = oracle.assemble_dense(op) @ oracle.flatten(x.interior)
		# entry errors measured against max|coef| * max|x|
		scale = op.coefficient_scale() * np.abs(x.interior).max()
		for path in KernelPath:
			got = oracle.flatten(apply_operator(op, x, path).interior)
			worst = max(worst, _relative(np.abs(got - expected).max(), scale))
	return CheckResult("operator", worst <= OPERATOR_TOL, worst, OPERATOR_TOL, "max scaled entry error")


def check_solver(rng: np.random.Generator) -> CheckResult:
	"""Preconditioned BiCGSTAB against a dense LU solve"""
	worst = 0.0
	for variant in SolverVariant:
		op = random_operator(rng, 7, 6, 2)
		b = rng.standard_normal(op.shape)
		expected = oracle.dense_solve(oracle.DenseSystem(oracle.assemble_dense(op), oracle.flatten(b)))
		cfg = SolverConfig(tol=SOLVE_TOL, max_iter=500, variant=variant)
		x, stats = bicgstab(op, build_spai(op), Field.from_interior(b), cfg=cfg)
		if not stats.converged:
			return CheckResult("solver", False, float("inf"), SOLUTION_TOL,
			                   f"{variant.value} ended with {stats.outcome_label}")
		error = np.linalg.norm(oracle.flatten(x.interior) - expected)
		worst = max(worst, _relative(error, np.linalg.norm(expected)))
	return CheckResult("solver", worst <= SOLUTION_TOL, worst, SOLUTION_TOL, "relative solution error")


def check_spai(rng: np.random.Generator) -> CheckResult:
	"""Every SPAI column residual matches the dense least-squares optimum and beats block-Jacobi"""
	op = random_operator(rng, 5, 4, 2, dt=1.0)
	spai = build_spai(op)
	matrix = oracle.assemble_dense(op)
	n1, n2, ns = op.shape
	worst = 0.0
	beaten = 0
	for i2 in range(n2):
		for i1 in range(n1):
			for s in range(ns):
				column = oracle.dictionary_index(i1, i2, s, n1, ns)
				pattern = oracle.spai_column_pattern(n1, n2, ns, i1, i2, s)
				_, optimum = oracle.spai_column_lstsq(matrix, pattern, column)
				got = float(spai.report.column_residuals[i1, i2, s])
				worst = max(worst, got - optimum)
				if got > oracle.block_jacobi_column_residual(matrix, column, ns) + SPAI_TOL:
					beaten += 1
	passed = worst <= SPAI_TOL and beaten == 0
	return CheckResult("spai", passed, worst, SPAI_TOL,
	                   f"{beaten} columns worse than block-Jacobi, {spai.report.fallback_columns} fallbacks")


def check_variants(rng: np.random.Generator) -> CheckResult:
	"""Classic and Ganged iterates agree in exact-arithmetic terms"""
	op = random_operator(rng, 8, 6, 2)
	b = Field.from_interior(rng.standard_normal(op.shape))
	pairs = bicgstab_variant_equivalence_probe(op, build_block_jacobi(op), b, None, VARIANT_ITERS)
	if not pairs:
		return CheckResult("variants", False, float("inf"), VARIANT_TOL, "no iterates recorded")
	worst = max(_relative(np.linalg.norm(c - g), np.linalg.norm(c)) for c, g in pairs)
	return CheckResult("variants", worst <= VARIANT_TOL, worst, VARIANT_TOL, f"{len(pairs)} iterates compared")


def check_pulse(rng: np.random.Generator) -> CheckResult:
	"""Small pulse run against the free-space analytic solution"""
	problem = PulseProblem(grid=GridSpec(40, 40, 2, 1.0, 1.0), sigma0=3.0, center=(20.0, 20.0), d0=0.35, dt=0.5,
	                       nsteps=10, solver=SolverConfig(tol=1e-10))
	report = run(problem)
	if report.failed:
		return CheckResult("pulse", False, float("inf"), PULSE_ERROR_BOUND, report.failure or "run failed")
	reference = analytic_solution(problem, problem.final_time).interior
	error = _relative(np.linalg.norm(report.final.interior - reference), np.linalg.norm(reference))
	return CheckResult("pulse", error <= PULSE_ERROR_BOUND, error, PULSE_ERROR_BOUND, "relative L2 error")


CHECKS: Dict[str, Callable[[np.random.Generator], CheckResult]] = {
	"operator": check_operator,
	"solver": check_solver,
	"spai": check_spai,
	"variants": check_variants,
	"pulse": check_pulse,
}


def run_checks(names: Optional[Sequence[str]] = None, seed: int = DEFAULT_SEED) -> List[CheckResult]:
	"""
	Run the selected checks in order, all of them when names is None.

	A check that raises is reported as failed rather than aborting the suite.

	Raises:
		VerifyError: If a name is not a known check
	"""
	selected = list(CHECKS) if names is None else list(names)
	for name in selected:
		if name not in CHECKS:
			raise VerifyError(f"unknown check {name!r}, expected some of {list(CHECKS)}")
	results = []
	for name in selected:
		rng = np.random.default_rng(seed)
		try:
			result = CHECKS[name](rng)
		except Exception as e:
			logger.exception("check %s raised", name)
			result = CheckResult(name, False, float("nan"), float("nan"), f"raised {type(e).__name__}: {e}")
		logger.info(result.line())
		results.append(result)
	return results
