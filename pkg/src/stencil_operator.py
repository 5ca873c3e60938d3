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
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
from numba import njit

from grid import BoundaryCondition, BoundaryKind, Field, GridSpec, Tile
from kernels import KernelPath

# Largest system assemble_banded will materialize
ASSEMBLY_GUARD = 10_000


class OperatorError(Exception):
	"""Custom exception for stencil operator operations"""
	pass


class Limiter(enum.Enum):
	NONE = "none"
	LEVERMORE_POMRANING = "levermore_pomraning"

	@classmethod
	def parse(cls, text: str) -> Limiter:
		for limiter in cls:
			if limiter.value == text.strip().lower():
				return limiter
		raise OperatorError(f"unknown limiter {text!r}, expected one of {[l.value for l in cls]}")


@dataclass(eq=False)
class FaceCoefficients:
	"""Face-centred diffusion coefficients; x1 is (nx1 + 1, nx2, ns), x2 is (nx1, nx2 + 1, ns)"""
	x1: np.ndarray
	x2: np.ndarray

	@classmethod
	def constant(cls, grid: GridSpec, value: Union[float, Sequence[float]]) -> FaceCoefficients:
		per_species = np.broadcast_to(np.asarray(value, dtype=np.float64), (grid.nspecies,))
		x1 = np.empty((grid.nx1 + 1, grid.nx2, grid.nspecies))
		x2 = np.empty((grid.nx1, grid.nx2 + 1, grid.nspecies))
		x1[...] = per_species
		x2[...] = per_species
		return cls(x1, x2)


@dataclass(eq=False)
class OperatorSpec:
	"""
	Matrix-free five-band stencil operator.

	Every coefficient array is (n1, n2, ns) over the zones it covers; couple is
	(n1, n2, ns, ns) with a zero diagonal and already carries the dt factor.
	Boundary neighbor coefficients are zero: zero-flux folds them into diag and
	Dirichlet moves them into boundary_rhs.
	"""
	grid: GridSpec
	bc: BoundaryCondition
	diag: np.ndarray
	west: np.ndarray
	east: np.ndarray
	south: np.ndarray
	north: np.ndarray
	couple: np.ndarray
	boundary_rhs: np.ndarray = field(default=None)

	def __post_init__(self) -> None:
		shape = self.diag.shape
		if len(shape) != 3:
			raise OperatorError(f"diag must be (n1, n2, ns), got {shape}")
		for name in ("west", "east", "south", "north"):
			if getattr(self, name).shape != shape:
				raise OperatorError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
		if self.couple.shape != shape + (shape[2],):
			raise OperatorError(f"couple has shape {self.couple.shape}, expected {shape + (shape[2],)}")
		if self.boundary_rhs is None:
			self.boundary_rhs = np.zeros(shape)
		for name in ("diag", "west", "east", "south", "north", "couple", "boundary_rhs"):
			if not np.isfinite(getattr(self, name)).all():
				raise OperatorError(f"non-finite coefficient in {name}")

	@property
	def shape(self):
		return self.diag.shape

	@classmethod
	def identity(cls, grid: GridSpec, bc: Optional[BoundaryCondition] = None) -> OperatorSpec:
		zeros = np.zeros(grid.shape)
		return cls(grid, bc or BoundaryCondition.zero_flux(), np.ones(grid.shape), zeros.copy(), zeros.copy(),
		           zeros.copy(), zeros.copy(), np.zeros(grid.shape + (grid.nspecies,)))

	def local(self, tile: Tile) -> OperatorSpec:
		"""View of the coefficients covering one tile"""
		s1, s2 = tile.slices
		return OperatorSpec(self.grid, self.bc, self.diag[s1, s2], self.west[s1, s2], self.east[s1, s2],
		                    self.south[s1, s2], self.north[s1, s2], self.couple[s1, s2], self.boundary_rhs[s1, s2])

	def coefficient_scale(self) -> float:
		return float(max(np.abs(a).max(initial=0.0) for a in
		                 (self.diag, self.west, self.east, self.south, self.north, self.couple)))


def _coupling_blocks(grid: GridSpec, couple: Optional[np.ndarray]) -> np.ndarray:
	ns = grid.nspecies
	if couple is None:
		return np.zeros(grid.shape + (ns,))
	couple = np.asarray(couple, dtype=np.float64)
	if couple.shape == (ns, ns):
		return np.broadcast_to(couple, grid.shape + (ns,)).copy()
	if couple.shape == grid.shape + (ns,):
		return couple.copy()
	raise OperatorError(f"coupling must be ({ns}, {ns}) or per zone {grid.shape + (ns,)}, got {couple.shape}")


def build_diffusion_operator(grid: GridSpec, d_face: Union[FaceCoefficients, float], dt: float,
                             couple: Optional[np.ndarray] = None,
                             bc: Optional[BoundaryCondition] = None) -> OperatorSpec:
	"""
	Build A = I + dt (L + C) for one backward-Euler stage.

	Args:
		grid: Global grid
		d_face: Face-centred diffusion coefficients, or one constant for every face and species
		dt: Stage length, must be positive
		couple: Per-zone species coupling, (ns, ns) or (nx1, nx2, ns, ns); None for no coupling
		bc: Physical boundary condition, zero-flux by default

	Returns:
		OperatorSpec with dt folded into every coefficient

	Raises:
		OperatorError: If dt is not positive or a coefficient is negative or non-finite
	"""
	bc = bc or BoundaryCondition.zero_flux()
	if not np.isfinite(dt) or dt <= 0:
		raise OperatorError(f"dt must be positive and finite, got {dt}")
	if not isinstance(d_face, FaceCoefficients):
		d_face = FaceCoefficients.constant(grid, d_face)
	n1, n2, ns = grid.shape
	if d_face.x1.shape != (n1 + 1, n2, ns) or d_face.x2.shape != (n1, n2 + 1, ns):
		raise OperatorError(f"face coefficients {d_face.x1.shape}/{d_face.x2.shape} do not fit grid {grid.shape}")
	for name, values in (("x1", d_face.x1), ("x2", d_face.x2)):
		if not np.isfinite(values).all():
			raise OperatorError(f"non-finite diffusion coefficient on {name} faces")
		if (values < 0).any():
			raise OperatorError(f"negative diffusion coefficient on {name} faces: {values.min()}")
	blocks = _coupling_blocks(grid, couple)
	if not np.isfinite(blocks).all():
		raise OperatorError("non-finite coupling coefficient")

	c1 = dt / (grid.dx1 * grid.dx1)
	c2 = dt / (grid.dx2 * grid.dx2)
	west = -c1 * d_face.x1[:-1]
	east = -c1 * d_face.x1[1:]
	south = -c2 * d_face.x2[:, :-1]
	north = -c2 * d_face.x2[:, 1:]
	species = np.arange(ns)
	diag = 1.0 - (west + east + south + north) + dt * blocks[..., species, species]
	offdiag = dt * blocks
	offdiag[..., species, species] = 0.0

	boundary_rhs = np.zeros(grid.shape)
	faces = ((west, (0, slice(None))), (east, (-1, slice(None))),
	         (south, (slice(None), 0)), (north, (slice(None), -1)))
	for coefficient, index in faces:
		if bc.kind is BoundaryKind.ZERO_FLUX:
			diag[index] += coefficient[index]
		else:
			boundary_rhs[index] -= coefficient[index] * bc.value
		coefficient[index] = 0.0
	return OperatorSpec(grid, bc, diag, west, east, south, north, offdiag, boundary_rhs)


@njit(cache=False)
def _apply_scalar(diag, west, east, south, north, couple, x, y):
	n1, n2, ns = diag.shape
	for j in range(n2):
		for i in range(n1):
			for s in range(ns):
				acc = diag[i, j, s] * x[i + 1, j + 1, s]
				acc += west[i, j, s] * x[i, j + 1, s]
				acc += east[i, j, s] * x[i + 2, j + 1, s]
				acc += south[i, j, s] * x[i + 1, j, s]
				acc += north[i, j, s] * x[i + 1, j + 2, s]
				for t in range(ns):
					if t != s:
						acc += couple[i, j, s, t] * x[i + 1, j + 1, t]
				y[i, j, s] = acc


def apply_operator(op: OperatorSpec, x: Field, path: KernelPath = KernelPath.VECTORIZED) -> Field:
	"""
	y = A x on the interior of one tile; x halos must be current.

	Raises:
		OperatorError: If the field interior does not match the operator
	"""
	if x.interior_shape != op.shape:
		raise OperatorError(f"field interior {x.interior_shape} does not match operator {op.shape}")
	out = x.zeros_like()
	if path is KernelPath.SCALAR_REFERENCE:
		y = np.empty(op.shape)
		_apply_scalar(op.diag, op.west, op.east, op.south, op.north, op.couple, x.data, y)
		out.interior[...] = y
		return out
	d = x.data
	center = d[1:-1, 1:-1, :]
	y = op.diag * center
	y += op.west * d[:-2, 1:-1, :]
	y += op.east * d[2:, 1:-1, :]
	y += op.south * d[1:-1, :-2, :]
	y += op.north * d[1:-1, 2:, :]
	if op.shape[2] > 1:
		y += np.einsum("abij,abj->abi", op.couple, center)
	out.interior[...] = y
	return out


def flatten_field(values: np.ndarray) -> np.ndarray:
	"""Dictionary ordering: species innermost, then i1, then i2"""
	return np.ascontiguousarray(np.asarray(values).transpose(1, 0, 2)).reshape(-1)


def unflatten_field(vector: np.ndarray, shape) -> np.ndarray:
	n1, n2, ns = shape
	return np.asarray(vector).reshape(n2, n1, ns).transpose(1, 0, 2).copy()


def assemble_banded(op: OperatorSpec) -> sp.csr_matrix:
	"""
	Explicit sparse matrix of the operator in dictionary ordering, for small instances only.

	Raises:
		OperatorError: If the system exceeds ASSEMBLY_GUARD unknowns
	"""
	n1, n2, ns = op.shape
	size = n1 * n2 * ns
	if size > ASSEMBLY_GUARD:
		raise OperatorError(f"refusing to assemble {size} unknowns, guard is {ASSEMBLY_GUARD}")
	i1, i2, s = np.indices(op.shape)
	index = s + ns * (i1 + n1 * i2)
	rows, cols, vals = [index.ravel()], [index.ravel()], [op.diag.ravel()]
	neighbors = ((op.west, (slice(1, None), slice(None)), -ns),
	             (op.east, (slice(None, -1), slice(None)), ns),
	             (op.south, (slice(None), slice(1, None)), -ns * n1),
	             (op.north, (slice(None), slice(None, -1)), ns * n1))
	for coefficient, region, offset in neighbors:
		rows.append(index[region].ravel())
		cols.append(index[region].ravel() + offset)
		vals.append(coefficient[region].ravel())
	for t in range(ns):
		for u in range(ns):
			if t != u:
				rows.append(index[..., t].ravel())
				cols.append(index[..., u].ravel())
				vals.append(op.couple[..., t, u].ravel())
	matrix = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
	                       shape=(size, size)).tocsr()
	matrix.eliminate_zeros()
	return matrix


def limiter_lambda(ratio: np.ndarray, limiter: Limiter) -> np.ndarray:
	"""Flux limiter; 1/3 in the diffusive limit, lambda * R -> 1 when free streaming"""
	ratio = np.asarray(ratio, dtype=np.float64)
	if limiter is Limiter.NONE:
		return np.full_like(ratio, 1.0 / 3.0)
	return (2.0 + ratio) / (6.0 + 3.0 * ratio + ratio * ratio)


def _to_faces(values: np.ndarray, axis: int) -> np.ndarray:
	first = np.take(values, [0], axis=axis)
	last = np.take(values, [values.shape[axis] - 1], axis=axis)
	n = values.shape[axis]
	inner = 0.5 * (np.take(values, range(n - 1), axis=axis) + np.take(values, range(1, n), axis=axis))
	return np.concatenate([first, inner, last], axis=axis)


def flux_limited_D(energy_density: Union[Field, np.ndarray], opacity: Union[float, Sequence[float]],
                   grid: GridSpec, limiter: Limiter = Limiter.LEVERMORE_POMRANING,
                   light_speed: float = 1.0) -> FaceCoefficients:
	"""
	Face diffusion coefficients D = c lambda(R) / kappa with R = |grad E| / (kappa E).

	Zone-centred gradients and energies are averaged to faces; boundary faces take
	the adjacent zone value.

	Raises:
		OperatorError: If the energy density is not strictly positive or the opacity is not positive
	"""
	values = energy_density.interior if isinstance(energy_density, Field) else np.asarray(energy_density)
	if values.shape != grid.shape:
		raise OperatorError(f"energy density {values.shape} does not match grid {grid.shape}")
	if not np.isfinite(values).all() or (values <= 0).any():
		raise OperatorError("energy density must be finite and strictly positive for the flux limiter")
	kappa = np.broadcast_to(np.asarray(opacity, dtype=np.float64), (grid.nspecies,))
	if (kappa <= 0).any():
		raise OperatorError(f"opacity must be positive, got {kappa}")
	if light_speed <= 0:
		raise OperatorError(f"light speed must be positive, got {light_speed}")
	if limiter is Limiter.NONE:
		return FaceCoefficients.constant(grid, light_speed / (3.0 * kappa))

	g1 = np.gradient(values, grid.dx1, axis=0) if grid.nx1 > 1 else np.zeros_like(values)
	g2 = np.gradient(values, grid.dx2, axis=1) if grid.nx2 > 1 else np.zeros_like(values)
	magnitude = np.sqrt(g1 * g1 + g2 * g2)
	coefficients = []
	for axis in (0, 1):
		ratio = _to_faces(magnitude, axis) / (kappa * _to_faces(values, axis))
		coefficients.append(light_speed * limiter_lambda(ratio, limiter) / kappa)
	return FaceCoefficients(coefficients[0], coefficients[1])
