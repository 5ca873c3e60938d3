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
import os
import threading
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from joblib import Parallel, delayed

logger = logging.getLogger(__name__)

# Constants
HALO_WIDTH = 1
MAX_WORKERS_ENV = "FLDKRYLOV_MAX_WORKERS"
DEFAULT_MAX_WORKERS = 64
BARRIER_TIMEOUT_S = 600.0

T = TypeVar("T")


class GridError(Exception):
	"""Custom exception for grid and decomposition operations"""
	pass


class CommunicatorError(Exception):
	"""Raised when tile workers use a collective inconsistently"""
	pass


@dataclass(frozen=True)
class GridSpec:
	"""Uniform Cartesian grid of nx1 x nx2 zones carrying nspecies values per zone"""
	nx1: int
	nx2: int
	nspecies: int = 2
	dx1: float = 1.0
	dx2: float = 1.0

	def __post_init__(self) -> None:
		if int(self.nx1) != self.nx1 or int(self.nx2) != self.nx2 or int(self.nspecies) != self.nspecies:
			raise GridError(f"zone and species counts must be integers: {self.nx1}, {self.nx2}, {self.nspecies}")
		if self.nx1 < 1 or self.nx2 < 1:
			raise GridError(f"zone counts must be positive: nx1={self.nx1}, nx2={self.nx2}")
		if self.nspecies < 1:
			raise GridError(f"nspecies must be at least 1, got {self.nspecies}")
		if not (self.dx1 > 0 and self.dx2 > 0) or not np.isfinite([self.dx1, self.dx2]).all():
			raise GridError(f"zone widths must be positive: dx1={self.dx1}, dx2={self.dx2}")

	@property
	def shape(self) -> Tuple[int, int, int]:
		return self.nx1, self.nx2, self.nspecies

	@property
	def size(self) -> int:
		return self.nx1 * self.nx2 * self.nspecies

	def zone_centers(self) -> Tuple[np.ndarray, np.ndarray]:
		"""Zone-center coordinates along x1 and x2 (domain starts at the origin)"""
		x1 = (np.arange(self.nx1) + 0.5) * self.dx1
		x2 = (np.arange(self.nx2) + 0.5) * self.dx2
		return x1, x2

	@property
	def extent(self) -> Tuple[float, float]:
		return self.nx1 * self.dx1, self.nx2 * self.dx2


class BoundaryKind(enum.Enum):
	ZERO_FLUX = "zero_flux"
	DIRICHLET = "dirichlet"


@dataclass(frozen=True)
class BoundaryCondition:
	"""Physical boundary treatment shared by the halo fill and the operator build"""
	kind: BoundaryKind = BoundaryKind.ZERO_FLUX
	value: float = 0.0

	@classmethod
	def zero_flux(cls) -> BoundaryCondition:
		return cls(BoundaryKind.ZERO_FLUX)

	@classmethod
	def dirichlet(cls, value: float) -> BoundaryCondition:
		if not np.isfinite(value):
			raise GridError(f"Dirichlet value must be finite, got {value}")
		return cls(BoundaryKind.DIRICHLET, float(value))


class Direction(enum.Enum):
	WEST = (-1, 0)
	EAST = (1, 0)
	SOUTH = (0, -1)
	NORTH = (0, 1)


@dataclass(frozen=True)
class Tile:
	tile_id: int
	p1: int
	p2: int
	start1: int
	len1: int
	start2: int
	len2: int

	@property
	def slices(self) -> Tuple[slice, slice]:
		"""Slices of the global zone index space owned by this tile"""
		return slice(self.start1, self.start1 + self.len1), slice(self.start2, self.start2 + self.len2)


@dataclass(frozen=True)
class TileTopology:
	"""NPRX1 x NPRX2 Cartesian tile decomposition; tile ids run x1-fastest"""
	grid: GridSpec
	nprx1: int
	nprx2: int
	extents1: Tuple[Tuple[int, int], ...]
	extents2: Tuple[Tuple[int, int], ...]

	@property
	def worker_count(self) -> int:
		return self.nprx1 * self.nprx2

	@property
	def tile_extents(self) -> List[Tuple[Tuple[int, int], Tuple[int, int]]]:
		return [(self.extents1[t % self.nprx1], self.extents2[t // self.nprx1]) for t in range(self.worker_count)]

	def tile(self, tile_id: int) -> Tile:
		if tile_id < 0 or tile_id >= self.worker_count:
			raise GridError(f"tile id {tile_id} outside topology of {self.worker_count} tiles")
		p1, p2 = tile_id % self.nprx1, tile_id // self.nprx1
		(start1, len1), (start2, len2) = self.extents1[p1], self.extents2[p2]
		return Tile(tile_id, p1, p2, start1, len1, start2, len2)

	@property
	def tiles(self) -> List[Tile]:
		return [self.tile(t) for t in range(self.worker_count)]

	def neighbor(self, tile_id: int, direction: Direction) -> Optional[int]:
		"""Tile id across the given face, or None at a physical boundary"""
		tile = self.tile(tile_id)
		q1, q2 = tile.p1 + direction.value[0], tile.p2 + direction.value[1]
		if q1 < 0 or q1 >= self.nprx1 or q2 < 0 or q2 >= self.nprx2:
			return None
		return q1 + self.nprx1 * q2


def _split(n: int, parts: int) -> Tuple[Tuple[int, int], ...]:
	# remainder-first: the first n % parts tiles take one extra zone
	base, remainder = divmod(n, parts)
	extents = []
	start = 0
	for i in range(parts):
		length = base + 1 if i < remainder else base
		extents.append((start, length))
		start += length
	return tuple(extents)


def decompose(grid: GridSpec, nprx1: int, nprx2: int) -> TileTopology:
	"""
	Partition the grid into nprx1 x nprx2 tiles.

	Args:
		grid: Global grid
		nprx1: Tile count along x1
		nprx2: Tile count along x2

	Returns:
		Topology whose tile extents cover the grid exactly once

	Raises:
		GridError: If a tile count is not positive or would leave a tile empty
	"""
	if int(nprx1) != nprx1 or int(nprx2) != nprx2:
		raise GridError(f"tile counts must be integers: nprx1={nprx1}, nprx2={nprx2}")
	if nprx1 < 1 or nprx2 < 1:
		raise GridError(f"tile counts must be positive: nprx1={nprx1}, nprx2={nprx2}")
	if nprx1 > grid.nx1 or nprx2 > grid.nx2:
		raise GridError(f"topology {nprx1}x{nprx2} would create empty tiles on a {grid.nx1}x{grid.nx2} grid")
	return TileTopology(grid, int(nprx1), int(nprx2), _split(grid.nx1, int(nprx1)), _split(grid.nx2, int(nprx2)))


@dataclass(eq=False)
class Field:
	"""Tile-local values with a one-zone halo ring; data has shape (len1 + 2, len2 + 2, nspecies)"""
	data: np.ndarray
	tile_id: int = 0

	def __post_init__(self) -> None:
		if self.data.ndim != 3 or self.data.shape[0] < 3 or self.data.shape[1] < 3:
			raise GridError(f"field data must be (len1 + 2, len2 + 2, nspecies), got {self.data.shape}")

	@classmethod
	def zeros(cls, len1: int, len2: int, nspecies: int, tile_id: int = 0) -> Field:
		return cls(np.zeros((len1 + 2 * HALO_WIDTH, len2 + 2 * HALO_WIDTH, nspecies)), tile_id)

	@classmethod
	def for_tile(cls, tile: Tile, nspecies: int) -> Field:
		return cls.zeros(tile.len1, tile.len2, nspecies, tile.tile_id)

	@classmethod
	def from_interior(cls, values: np.ndarray, tile_id: int = 0) -> Field:
		values = np.asarray(values, dtype=np.float64)
		if values.ndim != 3:
			raise GridError(f"interior values must be (len1, len2, nspecies), got {values.shape}")
		field = cls.zeros(values.shape[0], values.shape[1], values.shape[2], tile_id)
		field.interior[...] = values
		return field

	@property
	def interior(self) -> np.ndarray:
		return self.data[HALO_WIDTH:-HALO_WIDTH, HALO_WIDTH:-HALO_WIDTH, :]

	@property
	def interior_shape(self) -> Tuple[int, int, int]:
		return self.interior.shape

	def zeros_like(self) -> Field:
		return Field(np.zeros_like(self.data), self.tile_id)

	def copy(self) -> Field:
		return Field(self.data.copy(), self.tile_id)


def scatter(values: np.ndarray, topology: TileTopology) -> List[Field]:
	"""Split a global (nx1, nx2, nspecies) array into per-tile fields"""
	if values.shape != topology.grid.shape:
		raise GridError(f"global array shape {values.shape} does not match grid {topology.grid.shape}")
	return [Field.from_interior(values[tile.slices], tile.tile_id) for tile in topology.tiles]


def gather(fields: Sequence[Field], topology: TileTopology) -> np.ndarray:
	"""Assemble tile interiors back into one global array"""
	if len(fields) != topology.worker_count:
		raise GridError(f"expected {topology.worker_count} tile fields, got {len(fields)}")
	out = np.empty(topology.grid.shape)
	for field in fields:
		tile = topology.tile(field.tile_id)
		if field.interior_shape != (tile.len1, tile.len2, topology.grid.nspecies):
			raise GridError(f"field of tile {tile.tile_id} has shape {field.interior_shape}")
		out[tile.slices] = field.interior
	return out


def _fill_physical(data: np.ndarray, direction: Direction, bc: BoundaryCondition) -> None:
	if bc.kind is BoundaryKind.ZERO_FLUX:
		if direction is Direction.WEST:
			data[0, 1:-1, :] = data[1, 1:-1, :]
		elif direction is Direction.EAST:
			data[-1, 1:-1, :] = data[-2, 1:-1, :]
		elif direction is Direction.SOUTH:
			data[1:-1, 0, :] = data[1:-1, 1, :]
		else:
			data[1:-1, -1, :] = data[1:-1, -2, :]
		return
	if direction is Direction.WEST:
		data[0, 1:-1, :] = bc.value
	elif direction is Direction.EAST:
		data[-1, 1:-1, :] = bc.value
	elif direction is Direction.SOUTH:
		data[1:-1, 0, :] = bc.value
	else:
		data[1:-1, -1, :] = bc.value


def _fill_halo(field: Field, topology: TileTopology, bc: BoundaryCondition,
               board: Sequence[Optional[np.ndarray]]) -> None:
	"""Copy neighbor edge interiors into the halo of one tile; corners are left untouched"""
	data = field.data
	for direction in Direction:
		neighbor_id = topology.neighbor(field.tile_id, direction)
		if neighbor_id is None:
			_fill_physical(data, direction, bc)
			continue
		source = board[neighbor_id]
		if source is None:
			raise CommunicatorError(f"tile {neighbor_id} posted no data for the halo exchange")
		if direction is Direction.WEST:
			data[0, 1:-1, :] = source[-2, 1:-1, :]
		elif direction is Direction.EAST:
			data[-1, 1:-1, :] = source[1, 1:-1, :]
		elif direction is Direction.SOUTH:
			data[1:-1, 0, :] = source[1:-1, -2, :]
		else:
			data[1:-1, -1, :] = source[1:-1, 1, :]


def halo_exchange(field: Field, topology: TileTopology, bc: BoundaryCondition,
                  neighbors: Optional[Sequence[Field]] = None) -> Field:
	"""
	Fill the halo ring of one tile field in place.

	Args:
		field: Tile field with populated interior
		topology: Decomposition the field belongs to
		bc: Physical boundary condition
		neighbors: Fields of every tile in tile-id order; only needed with more than one tile

	Returns:
		The same field, halos filled
	"""
	if topology.worker_count == 1:
		_fill_halo(field, topology, bc, [field.data])
		return field
	if neighbors is None or len(neighbors) != topology.worker_count:
		raise CommunicatorError("multi-tile halo exchange needs the fields of every tile")
	_fill_halo(field, topology, bc, [f.data for f in neighbors])
	return field


def exchange_all(fields: Sequence[Field], topology: TileTopology, bc: BoundaryCondition) -> List[Field]:
	"""Serial halo exchange over every tile; reads interiors only, so the update order is irrelevant"""
	for field in fields:
		halo_exchange(field, topology, bc, fields)
	return list(fields)


def global_reduce_sum(contributions: Sequence[Sequence[float]]) -> np.ndarray:
	"""
	Sum per-worker scalar vectors in ascending worker order.

	Args:
		contributions: One equal-length sequence per worker, in tile-id order

	Returns:
		Elementwise sums, bit-reproducible for a fixed worker count

	Raises:
		CommunicatorError: If the contributions differ in length
	"""
	if not contributions:
		raise CommunicatorError("global reduction needs at least one contribution")
	arrays = [np.asarray(c, dtype=np.float64).ravel() for c in contributions]
	length = arrays[0].size
	for worker, values in enumerate(arrays):
		if values.size != length:
			raise CommunicatorError(f"worker {worker} contributed {values.size} values, worker 0 contributed {length}")
	total = arrays[0].copy()
	for values in arrays[1:]:
		total = total + values
	return total


class Communicator:
	"""
	In-process collectives for one group of tile workers.

	Every worker thread calls the collectives in the same order; each
	collective is a barrier-delimited post/read exchange on shared boards.
	"""

	def __init__(self, topology: TileTopology, timeout: float = BARRIER_TIMEOUT_S):
		self.topology = topology
		self.size = topology.worker_count
		self._barrier = threading.Barrier(self.size, timeout=timeout)
		self._reduce_board: List[Optional[np.ndarray]] = [None] * self.size
		self._halo_board: List[Optional[np.ndarray]] = [None] * self.size
		self.reduction_events: List[int] = [0] * self.size

	def _sync(self) -> None:
		try:
			self._barrier.wait()
		except threading.BrokenBarrierError as e:
			raise CommunicatorError("collective aborted by another worker") from e

	def abort(self) -> None:
		self._barrier.abort()

	def global_reduce_sum(self, tile_id: int, values: Sequence[float]) -> np.ndarray:
		"""One global reduction event carrying all of `values`"""
		local = np.asarray(values, dtype=np.float64).ravel().copy()
		self.reduction_events[tile_id] += 1
		if self.size == 1:
			return global_reduce_sum([local])
		self._reduce_board[tile_id] = local
		self._sync()
		error: Optional[CommunicatorError] = None
		total = local
		try:
			total = global_reduce_sum(self._reduce_board)
		except CommunicatorError as e:
			error = e
		self._sync()
		if error is not None:
			raise error
		return total

	def halo_exchange(self, field: Field, bc: BoundaryCondition) -> Field:
		if self.size == 1:
			return halo_exchange(field, self.topology, bc)
		self._halo_board[field.tile_id] = field.data
		self._sync()
		_fill_halo(field, self.topology, bc, self._halo_board)
		# neighbors may overwrite their interiors only after every read is done
		self._sync()
		return field


def max_worker_count() -> int:
	"""Worker cap from the environment, DEFAULT_MAX_WORKERS when unset"""
	raw = os.environ.get(MAX_WORKERS_ENV)
	if raw is None or raw.strip() == "":
		return DEFAULT_MAX_WORKERS
	try:
		value = int(raw)
	except ValueError as e:
		raise GridError(f"{MAX_WORKERS_ENV} must be an integer, got {raw!r}") from e
	if value < 1:
		raise GridError(f"{MAX_WORKERS_ENV} must be positive, got {value}")
	return value


def run_tile_workers(topology: TileTopology, work: Callable[[Communicator, Tile], T],
                     max_workers: Optional[int] = None) -> List[T]:
	"""
	Run `work` once per tile, one thread per tile, sharing one Communicator.

	Args:
		topology: Decomposition defining the worker group
		work: Per-tile body; must call collectives in the same order on every tile
		max_workers: Parallelism cap, defaults to max_worker_count()

	Returns:
		Per-tile results in tile-id order

	Raises:
		GridError: If the topology needs more workers than the cap allows
	"""
	cap = max_worker_count() if max_workers is None else max_workers
	if topology.worker_count > cap:
		raise GridError(f"topology {topology.nprx1}x{topology.nprx2} needs {topology.worker_count} workers, cap is {cap}")
	comm = Communicator(topology)

	def _guarded(tile: Tile) -> T:
		try:
			return work(comm, tile)
		except BaseException:
			comm.abort()
			raise

	if topology.worker_count == 1:
		return [_guarded(topology.tile(0))]
	logger.debug("launching %d tile workers for topology %dx%d", topology.worker_count, topology.nprx1, topology.nprx2)
	# every tile must own a thread at once, otherwise the first barrier never fills
	return Parallel(n_jobs=topology.worker_count, backend="threading", batch_size=1, pre_dispatch="all")(
		delayed(_guarded)(tile) for tile in topology.tiles)
