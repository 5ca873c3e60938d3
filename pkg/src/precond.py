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
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg

from grid import Field, Tile
from kernels import KernelPath
from stencil_operator import OperatorSpec, apply_operator

logger = logging.getLogger(__name__)

# Relative pivot tolerance for the SPAI normal equations
SPAI_PIVOT_TOL = 1e-12
# Blocks whose condition number exceeds this are treated as singular
BLOCK_CONDITION_LIMIT = 1e14

# Pattern of one SPAI column: the zone itself and its four stencil neighbors
PATTERN_OFFSETS: Tuple[Tuple[int, int], ...] = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))
# Rows of A touched by the pattern columns: every zone within Manhattan distance 2
FOOTPRINT_OFFSETS: Tuple[Tuple[int, int], ...] = tuple(
	(a, b) for b in range(-2, 3) for a in range(-2, 3) if abs(a) + abs(b) <= 2)


class PreconditionerError(Exception):
	"""Custom exception for preconditioner construction and application"""
	pass


class PreconditionerKind(enum.Enum):
	IDENTITY = "identity"
	BLOCK_JACOBI = "block_jacobi"
	SPAI = "spai"

	@classmethod
	def parse(cls, text: str) -> PreconditionerKind:
		for kind in cls:
			if kind.value == text.strip().lower():
				return kind
		raise PreconditionerError(f"unknown preconditioner {text!r}, expected one of {[k.value for k in cls]}")


@dataclass(eq=False)
class SpaiReport:
	"""Per-column least-squares residuals, shape (n1, n2, ns), and the columns that fell back to block-Jacobi"""
	column_residuals: np.ndarray
	fallback_mask: np.ndarray

	@property
	def fallback_columns(self) -> int:
		return int(self.fallback_mask.sum())


@dataclass(eq=False)
class PreconditionerSpec:
	kind: PreconditionerKind
	blocks: Optional[np.ndarray] = None
	stencil: Optional[OperatorSpec] = None
	report: Optional[SpaiReport] = None

	def local(self, tile: Tile) -> PreconditionerSpec:
		s1, s2 = tile.slices
		if self.kind is PreconditionerKind.BLOCK_JACOBI:
			return PreconditionerSpec(self.kind, blocks=self.blocks[s1, s2])
		if self.kind is PreconditionerKind.SPAI:
			return PreconditionerSpec(self.kind, stencil=self.stencil.local(tile))
		return self

	@property
	def needs_halo(self) -> bool:
		return self.kind is PreconditionerKind.SPAI


def identity_preconditioner() -> PreconditionerSpec:
	return PreconditionerSpec(PreconditionerKind.IDENTITY)


def diagonal_blocks(op: OperatorSpec) -> np.ndarray:
	"""Per-zone ns x ns diagonal blocks of A"""
	ns = op.shape[2]
	blocks = op.couple.copy()
	species = np.arange(ns)
	blocks[..., species, species] = op.diag
	return blocks


def _invert_blocks(blocks: np.ndarray) -> np.ndarray:
	condition = np.linalg.cond(blocks)
	singular = ~np.isfinite(condition) | (condition > BLOCK_CONDITION_LIMIT)
	if singular.any():
		zone = tuple(int(i) for i in np.argwhere(singular)[0])
		raise PreconditionerError(f"diagonal block at zone {zone} is singular (condition {condition[zone]:.3e})")
	return np.linalg.inv(blocks)


def build_block_jacobi(op: OperatorSpec) -> PreconditionerSpec:
	"""
	Block-Jacobi preconditioner from the exact inverses of A's diagonal blocks.

	Raises:
		PreconditionerError: If a diagonal block is singular; the message names the zone
	"""
	return PreconditionerSpec(PreconditionerKind.BLOCK_JACOBI, blocks=_invert_blocks(diagonal_blocks(op)))


def _padded(values: np.ndarray, width: int = 2) -> np.ndarray:
	return np.pad(values, ((width, width), (width, width)) + ((0, 0),) * (values.ndim - 2))


def _column_in_domain(n1: int, n2: int, offset: Tuple[int, int]) -> np.ndarray:
	i1, i2 = np.indices((n1, n2))
	j1, j2 = i1 + offset[0], i2 + offset[1]
	return (j1 >= 0) & (j1 < n1) & (j2 >= 0) & (j2 < n2)


def _local_matrices(op: OperatorSpec, species: int) -> Tuple[np.ndarray, List[Tuple[Tuple[int, int], int]], int]:
	"""
	Restriction of A to the footprint rows and the pattern columns of every column (z, species).

	Returns:
		(matrices of shape (n1, n2, rows, cols), pattern as (offset, species) pairs, index of the unit row)
	"""
	n1, n2, ns = op.shape
	pattern = [(offset, species) for offset in PATTERN_OFFSETS]
	pattern += [((0, 0), t) for t in range(ns) if t != species]
	rows = [(offset, s) for offset in FOOTPRINT_OFFSETS for s in range(ns)]
	padded = {name: _padded(getattr(op, name)) for name in ("diag", "west", "east", "south", "north")}
	padded_couple = _padded(op.couple)
	neighbor_names = {(-1, 0): "west", (1, 0): "east", (0, -1): "south", (0, 1): "north"}

	local = np.zeros((n1, n2, len(rows), len(pattern)))
	for r, (row_offset, row_species) in enumerate(rows):
		window = (slice(2 + row_offset[0], 2 + row_offset[0] + n1), slice(2 + row_offset[1], 2 + row_offset[1] + n2))
		for c, (col_offset, col_species) in enumerate(pattern):
			delta = (col_offset[0] - row_offset[0], col_offset[1] - row_offset[1])
			if delta == (0, 0):
				if row_species == col_species:
					local[:, :, r, c] = padded["diag"][window + (row_species,)]
				else:
					local[:, :, r, c] = padded_couple[window + (row_species, col_species)]
			elif delta in neighbor_names and row_species == col_species:
				local[:, :, r, c] = padded[neighbor_names[delta]][window + (row_species,)]
	unit_row = rows.index(((0, 0), species))
	return local, pattern, unit_row


def _cholesky_solve(gram: np.ndarray, rhs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
	"""Batched normal-equation solve; returns (solution, rank-deficient mask)"""
	scale = np.abs(np.diagonal(gram, axis1=-2, axis2=-1)).max(axis=-1)
	deficient = np.zeros(gram.shape[:-2], dtype=bool)
	try:
		factor = np.linalg.cholesky(gram)
	except np.linalg.LinAlgError:
		factor = np.zeros_like(gram)
		for zone in np.ndindex(*gram.shape[:-2]):
			try:
				factor[zone] = scipy.linalg.cholesky(gram[zone], lower=True)
			except scipy.linalg.LinAlgError:
				deficient[zone] = True
	pivots = np.diagonal(factor, axis1=-2, axis2=-1) ** 2
	deficient |= (pivots < SPAI_PIVOT_TOL * scale[..., None]).any(axis=-1)
	safe = np.where(deficient[..., None, None], np.eye(gram.shape[-1]), gram)
	solution = np.linalg.solve(safe, rhs[..., None])[..., 0]
	return solution, deficient


def build_spai(op: OperatorSpec) -> PreconditionerSpec:
	"""
	Sparse approximate inverse with the operator's own stencil pattern.

	Each column j = (z, s) of M keeps the entries at z, its four neighbors (species s)
	and the species partners at z, chosen to minimize ||A m_j - e_j||_2 over that
	pattern. Columns whose local normal equations are rank deficient fall back to
	the block-Jacobi column and are counted in the report.

	Raises:
		PreconditionerError: If a fallback column needs a singular diagonal block
	"""
	n1, n2, ns = op.shape
	diag_m = np.zeros(op.shape)
	west_m = np.zeros(op.shape)
	east_m = np.zeros(op.shape)
	south_m = np.zeros(op.shape)
	north_m = np.zeros(op.shape)
	couple_m = np.zeros(op.shape + (ns,))
	residuals = np.zeros(op.shape)
	fallback = np.zeros(op.shape, dtype=bool)
	block_inverse: Optional[np.ndarray] = None

	for s in range(ns):
		local, pattern, unit_row = _local_matrices(op, s)
		gram = np.einsum("abrc,abrd->abcd", local, local)
		rhs = local[:, :, unit_row, :].copy()
		for c, (offset, _) in enumerate(pattern):
			outside = ~_column_in_domain(n1, n2, offset)
			gram[outside, c, :] = 0.0
			gram[outside, :, c] = 0.0
			gram[outside, c, c] = 1.0
			rhs[outside, c] = 0.0
		coefficients, deficient = _cholesky_solve(gram, rhs)

		if deficient.any():
			if block_inverse is None:
				block_inverse = _invert_blocks(diagonal_blocks(op))
			for c, (offset, partner) in enumerate(pattern):
				value = block_inverse[..., partner, s] if offset == (0, 0) else 0.0
				coefficients[..., c] = np.where(deficient, value, coefficients[..., c])
			logger.debug("spai species %d: %d columns fell back to block-Jacobi", s, int(deficient.sum()))

		applied = np.einsum("abrc,abc->abr", local, coefficients)
		applied[..., unit_row] -= 1.0
		residuals[..., s] = np.sqrt(np.einsum("abr,abr->ab", applied, applied))
		fallback[..., s] = deficient

		# column (z, s) entry at pattern point z + offset is the row (z + offset) coefficient toward z
		for c, (offset, partner) in enumerate(pattern):
			m = coefficients[..., c]
			if offset == (0, 0):
				if partner == s:
					diag_m[..., s] = m
				else:
					couple_m[..., partner, s] = m
			elif offset == (-1, 0):
				east_m[:-1, :, s] = m[1:, :]
			elif offset == (1, 0):
				west_m[1:, :, s] = m[:-1, :]
			elif offset == (0, -1):
				north_m[:, :-1, s] = m[:, 1:]
			else:
				south_m[:, 1:, s] = m[:, :-1]

	stencil = OperatorSpec(op.grid, op.bc, diag_m, west_m, east_m, south_m, north_m, couple_m)
	report = SpaiReport(residuals, fallback)
	if report.fallback_columns:
		logger.warning("spai: %d of %d columns fell back to block-Jacobi", report.fallback_columns, fallback.size)
	return PreconditionerSpec(PreconditionerKind.SPAI, stencil=stencil, report=report)


def build_preconditioner(kind: PreconditionerKind, op: OperatorSpec) -> PreconditionerSpec:
	if kind is PreconditionerKind.IDENTITY:
		return identity_preconditioner()
	if kind is PreconditionerKind.BLOCK_JACOBI:
		return build_block_jacobi(op)
	return build_spai(op)


def apply_precond(m: PreconditionerSpec, v: Field, path: KernelPath = KernelPath.VECTORIZED) -> Field:
	"""
	z = M v; for SPAI the halos of v must be current.

	Raises:
		PreconditionerError: If the field does not match the preconditioner
	"""
	if m.kind is PreconditionerKind.IDENTITY:
		return v
	if m.kind is PreconditionerKind.BLOCK_JACOBI:
		if m.blocks.shape[:3] != v.interior_shape:
			raise PreconditionerError(f"field interior {v.interior_shape} does not match blocks {m.blocks.shape[:3]}")
		out = v.zeros_like()
		out.interior[...] = np.einsum("abij,abj->abi", m.blocks, v.interior)
		return out
	if m.stencil.shape != v.interior_shape:
		raise PreconditionerError(f"field interior {v.interior_shape} does not match SPAI stencil {m.stencil.shape}")
	return apply_operator(m.stencil, v, path)
