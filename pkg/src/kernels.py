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
from typing import List, Sequence, Tuple

import numpy as np
from numba import njit

# Width of the partial-sum lanes used by the vectorized dot product
LANE_WIDTH = 8


class KernelError(Exception):
	"""Custom exception for BLAS-1 kernel operations"""
	pass


class KernelPath(enum.Enum):
	SCALAR_REFERENCE = "scalar"
	VECTORIZED = "vectorized"

	@classmethod
	def parse(cls, text: str) -> KernelPath:
		for path in cls:
			if path.value == text.strip().lower():
				return path
		raise KernelError(f"unknown kernel path {text!r}, expected one of {[p.value for p in cls]}")


@njit(cache=False)
def _dprod_scalar(x, y):
	total = 0.0
	for i in range(x.shape[0]):
		total += x[i] * y[i]
	return total


@njit(cache=False)
def _daxpy_scalar(a, x, y):
	out = np.empty_like(y)
	for i in range(y.shape[0]):
		out[i] = a * x[i] + y[i]
	return out


@njit(cache=False)
def _dscal_scalar(c, d, y):
	out = np.empty_like(c)
	for i in range(c.shape[0]):
		out[i] = c[i] - d * y[i]
	return out


@njit(cache=False)
def _ddaxpy_scalar(a, x, b, y, z):
	out = np.empty_like(z)
	for i in range(z.shape[0]):
		out[i] = a * x[i] + b * y[i] + z[i]
	return out


def _check_shapes(name: str, *arrays: np.ndarray) -> None:
	shape = arrays[0].shape
	for array in arrays[1:]:
		if array.shape != shape:
			raise KernelError(f"{name}: length mismatch between operands {shape} and {array.shape}")


def _flat(v: np.ndarray) -> np.ndarray:
	return np.ascontiguousarray(v, dtype=np.float64).reshape(-1)


def _dprod_lanes(x: np.ndarray, y: np.ndarray) -> float:
	n = x.size
	full = n - n % LANE_WIDTH
	lanes = np.zeros(LANE_WIDTH)
	if full:
		lanes += np.multiply(x[:full], y[:full]).reshape(-1, LANE_WIDTH).sum(axis=0)
	for i in range(full, n):
		lanes[i - full] += x[i] * y[i]
	total = 0.0
	for lane in lanes:
		total += lane
	return float(total)


def dprod(x: np.ndarray, y: np.ndarray, path: KernelPath = KernelPath.VECTORIZED) -> float:
	"""
	Dot product of two equally shaped arrays.

	The scalar path sums sequentially in index order. The vectorized path keeps
	LANE_WIDTH partial sums and combines them in lane order, so both paths are
	deterministic but may differ in the last bits.

	Raises:
		KernelError: If the operand shapes differ
	"""
	x = np.asarray(x)
	y = np.asarray(y)
	_check_shapes("dprod", x, y)
	if path is KernelPath.SCALAR_REFERENCE:
		return float(_dprod_scalar(_flat(x), _flat(y)))
	return _dprod_lanes(_flat(x), _flat(y))


def daxpy(a: float, x: np.ndarray, y: np.ndarray, path: KernelPath = KernelPath.VECTORIZED) -> np.ndarray:
	"""a*x + y"""
	x = np.asarray(x)
	y = np.asarray(y)
	_check_shapes("daxpy", x, y)
	if path is KernelPath.SCALAR_REFERENCE:
		return _daxpy_scalar(float(a), _flat(x), _flat(y)).reshape(y.shape)
	return a * x + y


def dscal(c: np.ndarray, d: float, y: np.ndarray, path: KernelPath = KernelPath.VECTORIZED) -> np.ndarray:
	"""c - d*y"""
	c = np.asarray(c)
	y = np.asarray(y)
	_check_shapes("dscal", c, y)
	if path is KernelPath.SCALAR_REFERENCE:
		return _dscal_scalar(_flat(c), float(d), _flat(y)).reshape(c.shape)
	return c - d * y


def ddaxpy(a: float, x: np.ndarray, b: float, y: np.ndarray, z: np.ndarray,
           path: KernelPath = KernelPath.VECTORIZED) -> np.ndarray:
	"""a*x + b*y + z, evaluated left to right on both paths"""
	x = np.asarray(x)
	y = np.asarray(y)
	z = np.asarray(z)
	_check_shapes("ddaxpy", x, y, z)
	if path is KernelPath.SCALAR_REFERENCE:
		return _ddaxpy_scalar(float(a), _flat(x), float(b), _flat(y), _flat(z)).reshape(z.shape)
	return a * x + b * y + z


def ganged_dprod(pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
                 path: KernelPath = KernelPath.VECTORIZED) -> List[float]:
	"""Several local dot products computed together so one reduction can carry them all"""
	return [dprod(x, y, path) for x, y in pairs]
