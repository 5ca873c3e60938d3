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

# Slow, independent reference implementations for tests and the verify command.
# Nothing here calls into the production stencil, kernel or solver code.


from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
import scipy.linalg

DENSE_GUARD = 10_000
LSTSQ_MAX_COLS = 16
PIVOT_TOL = 1e-14
RESIDUAL_TOL = 1e-10


class OracleError(Exception):
	"""Custom exception for oracle operations"""
	pass


@dataclass(eq=False)
class DenseSystem:
	matrix: np.ndarray
	rhs: np.ndarray

	def __post_init__(self) -> None:
		self.matrix = np.asarray(self.matrix, dtype=np.float64)
		self.rhs = np.asarray(self.rhs, dtype=np.float64).reshape(-1)
		n = self.rhs.size
		if n > DENSE_GUARD:
			raise OracleError(f"dense system of {n} unknowns exceeds guard {DENSE_GUARD}")
		if self.matrix.shape != (n, n):
			raise OracleError(f"matrix shape {self.matrix.shape} does not match rhs length {n}")


def dense_solve(system: DenseSystem) -> np.ndarray:
	"""
	LU with partial pivoting.

	Raises:
		OracleError: If a pivot is below PIVOT_TOL relative to the largest entry, or the
			residual check fails
	"""
	scale = np.abs(system.matrix).max(initial=0.0)
	if scale == 0.0:
		raise OracleError("matrix is zero")
	lu, piv = scipy.linalg.lu_factor(system.matrix, check_finite=True)
	pivots = np.abs(np.diag(lu))
	if (pivots < PIVOT_TOL * scale).any():
		raise OracleError(f"matrix singular to tolerance: smallest pivot {pivots.min():.3e}, scale {scale:.3e}")
	x = scipy.linalg.lu_solve((lu, piv), system.rhs)
	residual = np.linalg.norm(system.matrix @ x - system.rhs)
	b_norm = np.linalg.norm(system.rhs)
	if residual > RESIDUAL_TOL * max(b_norm, np.finfo(float).tiny):
		raise OracleError(f"dense solve residual {residual:.3e} exceeds {RESIDUAL_TOL} * ||b|| = {RESIDUAL_TOL * b_norm:.3e}")
	return x


def dense_lstsq(a_local: np.ndarray, e: np.ndarray) -> Tuple[np.ndarray, float]:
	"""Least squares by the normal equations; returns (coefficients, residual norm)"""
	a_local = np.asarray(a_local, dtype=np.float64)
	e = np.asarray(e, dtype=np.float64)
	rows, cols = a_local.shape
	if rows < cols:
		raise OracleError(f"least squares needs rows >= cols, got {rows}x{cols}")
	if cols > LSTSQ_MAX_COLS:
		raise OracleError(f"least squares limited to {LSTSQ_MAX_COLS} columns, got {cols}")
	m = np.linalg.solve(a_local.T @ a_local, a_local.T @ e)
	return m, float(np.linalg.norm(a_local @ m - e))


def lstsq_qr(a_local: np.ndarray, e: np.ndarray) -> Tuple[np.ndarray, float]:
	"""Same problem through a reduced QR factorization"""
	q, r = np.linalg.qr(np.asarray(a_local, dtype=np.float64), mode="reduced")
	m = scipy.linalg.solve_triangular(r, q.T @ e)
	return m, float(np.linalg.norm(a_local @ m - e))


def dictionary_index(i1: int, i2: int, s: int, nx1: int, nspecies: int) -> int:
	return s + nspecies * (i1 + nx1 * i2)


def assemble_dense(op) -> np.ndarray:
	"""Dense matrix of a stencil operator, built entry by entry"""
	n1, n2, ns = op.diag.shape
	size = n1 * n2 * ns
	if size > DENSE_GUARD:
		raise OracleError(f"dense assembly of {size} unknowns exceeds guard {DENSE_GUARD}")
	matrix = np.zeros((size, size))
	for i2 in range(n2):
		for i1 in range(n1):
			for s in range(ns):
				row = dictionary_index(i1, i2, s, n1, ns)
				matrix[row, row] = op.diag[i1, i2, s]
				if i1 > 0:
					matrix[row, dictionary_index(i1 - 1, i2, s, n1, ns)] = op.west[i1, i2, s]
				if i1 < n1 - 1:
					matrix[row, dictionary_index(i1 + 1, i2, s, n1, ns)] = op.east[i1, i2, s]
				if i2 > 0:
					matrix[row, dictionary_index(i1, i2 - 1, s, n1, ns)] = op.south[i1, i2, s]
				if i2 < n2 - 1:
					matrix[row, dictionary_index(i1, i2 + 1, s, n1, ns)] = op.north[i1, i2, s]
				for t in range(ns):
					if t != s:
						matrix[row, dictionary_index(i1, i2, t, n1, ns)] = op.couple[i1, i2, s, t]
	return matrix


def flatten(values: np.ndarray) -> np.ndarray:
	n1, n2, ns = values.shape
	out = np.empty(n1 * n2 * ns)
	for i2 in range(n2):
		for i1 in range(n1):
			for s in range(ns):
				out[dictionary_index(i1, i2, s, n1, ns)] = values[i1, i2, s]
	return out


def unflatten(vector: np.ndarray, shape: Tuple[int, int, int]) -> np.ndarray:
	n1, n2, ns = shape
	out = np.empty(shape)
	for i2 in range(n2):
		for i1 in range(n1):
			for s in range(ns):
				out[i1, i2, s] = vector[dictionary_index(i1, i2, s, n1, ns)]
	return out


def sequential_dot(x: Sequence[float], y: Sequence[float]) -> float:
	x = np.asarray(x, dtype=np.float64).reshape(-1)
	y = np.asarray(y, dtype=np.float64).reshape(-1)
	if x.size != y.size:
		raise OracleError(f"length mismatch {x.size} != {y.size}")
	total = 0.0
	for a, b in zip(x.tolist(), y.tolist()):
		total += a * b
	return total


def gaussian_profile(x1: np.ndarray, x2: np.ndarray, center: Tuple[float, float], peak: float,
                     variance: float) -> np.ndarray:
	"""peak * exp(-|x - center|^2 / (2 variance)) on the tensor grid x1 x x2"""
	if variance <= 0:
		raise OracleError(f"variance must be positive, got {variance}")
	d1 = (np.asarray(x1) - center[0])[:, None]
	d2 = (np.asarray(x2) - center[1])[None, :]
	return peak * np.exp(-(d1 * d1 + d2 * d2) / (2.0 * variance))


def spai_column_pattern(nx1: int, nx2: int, nspecies: int, i1: int, i2: int, s: int) -> List[int]:
	"""Dictionary indices of the pattern of SPAI column (i1, i2, s) that lie inside the grid"""
	pattern = []
	for d1, d2 in ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)):
		j1, j2 = i1 + d1, i2 + d2
		if 0 <= j1 < nx1 and 0 <= j2 < nx2:
			pattern.append(dictionary_index(j1, j2, s, nx1, nspecies))
	for t in range(nspecies):
		if t != s:
			pattern.append(dictionary_index(i1, i2, t, nx1, nspecies))
	return pattern


def spai_column_lstsq(matrix: np.ndarray, pattern: Sequence[int], column: int) -> Tuple[np.ndarray, float]:
	"""Best ||A m - e_column|| with m supported on `pattern`, over the rows A touches"""
	sub = matrix[:, list(pattern)]
	rows = np.flatnonzero(np.abs(sub).sum(axis=1) > 0)
	if column not in rows:
		rows = np.union1d(rows, [column])
	e = (rows == column).astype(np.float64)
	return dense_lstsq(sub[rows], e)


def block_jacobi_column_residual(matrix: np.ndarray, column: int, nspecies: int) -> float:
	"""||A m - e_column|| for the block-Jacobi column m = inv(D_z) e_s"""
	zone_start = column - column % nspecies
	block = matrix[zone_start:zone_start + nspecies, zone_start:zone_start + nspecies]
	m = np.zeros(matrix.shape[0])
	m[zone_start:zone_start + nspecies] = np.linalg.solve(block, np.eye(nspecies)[:, column % nspecies])
	e = np.zeros(matrix.shape[0])
	e[column] = 1.0
	return float(np.linalg.norm(matrix @ m - e))
