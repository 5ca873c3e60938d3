#!/usr/bin/env python3
# -*- coding: utf-8 -*-

from __future__ import annotations

import math

import numpy as np
import pytest

import oracle
from grid import Field
from precond import build_spai
from solver import SolverConfig, bicgstab


class TestDenseSolve:
    def test_identity(self, rng):
        b = rng.standard_normal(6)
        np.testing.assert_allclose(oracle.dense_solve(oracle.DenseSystem(np.eye(6), b)), b)

    def test_diagonal(self):
        x = oracle.dense_solve(oracle.DenseSystem(np.diag([2.0, 4.0]), np.array([2.0, 4.0])))
        np.testing.assert_allclose(x, [1.0, 1.0])

    def test_singular(self):
        with pytest.raises(oracle.OracleError):
            oracle.dense_solve(oracle.DenseSystem(np.array([[1.0, 2.0], [2.0, 4.0]]), np.ones(2)))

    def test_shape_checks(self):
        with pytest.raises(oracle.OracleError):
            oracle.DenseSystem(np.eye(3), np.ones(2))
        with pytest.raises(oracle.OracleError):
            oracle.DenseSystem(np.eye(1), np.ones(10_001))

    def test_cross_validates_bicgstab(self, make_operator, rng):
        op = make_operator(6, 5, 2)
        b = rng.standard_normal(op.shape)
        dense = oracle.dense_solve(oracle.DenseSystem(oracle.assemble_dense(op), oracle.flatten(b)))
        x, stats = bicgstab(op, build_spai(op), Field.from_interior(b), cfg=SolverConfig(tol=1e-10))
        assert stats.converged
        assert np.linalg.norm(oracle.flatten(x.interior) - dense) <= 1e-6 * np.linalg.norm(dense)


class TestLeastSquares:
    def test_square(self, rng):
        a = rng.standard_normal((4, 4)) + 4 * np.eye(4)
        e = np.eye(4)[:, 1]
        m, residual = oracle.dense_lstsq(a, e)
        np.testing.assert_allclose(m, np.linalg.solve(a, e), atol=1e-12)
        assert residual == pytest.approx(0.0, abs=1e-12)

    def test_consistent_overdetermined(self, rng):
        a = rng.standard_normal((8, 3))
        e = a @ np.array([1.0, -2.0, 0.5])
        _, residual = oracle.dense_lstsq(a, e)
        assert residual == pytest.approx(0.0, abs=1e-10)

    def test_normal_equations_match_qr(self, rng):
        a = rng.standard_normal((8, 5))
        e = rng.standard_normal(8)
        m_normal, r_normal = oracle.dense_lstsq(a, e)
        m_qr, r_qr = oracle.lstsq_qr(a, e)
        np.testing.assert_allclose(m_normal, m_qr, atol=1e-10)
        assert r_normal == pytest.approx(r_qr, abs=1e-10)

    def test_limits(self, rng):
        with pytest.raises(oracle.OracleError):
            oracle.dense_lstsq(rng.standard_normal((3, 4)), np.ones(3))
        with pytest.raises(oracle.OracleError):
            oracle.dense_lstsq(rng.standard_normal((40, 17)), np.ones(40))


class TestHelpers:
    def test_sequential_dot(self):
        assert oracle.sequential_dot([1.0, 2.0, 3.0], [4.0, 5.0, 6.0]) == 32.0
        with pytest.raises(oracle.OracleError):
            oracle.sequential_dot([1.0], [1.0, 2.0])

    def test_flatten_round_trip_ordering(self):
        values = np.arange(12.0).reshape(3, 2, 2)
        flat = oracle.flatten(values)
        assert flat[oracle.dictionary_index(2, 1, 1, 3, 2)] == values[2, 1, 1]
        assert flat[1] == values[0, 0, 1]
        assert flat[2] == values[1, 0, 0]
        np.testing.assert_array_equal(oracle.unflatten(flat, values.shape), values)

    def test_gaussian_profile(self):
        x1 = np.array([0.0, 1.0, 2.0])
        x2 = np.array([0.0])
        profile = oracle.gaussian_profile(x1, x2, (0.0, 0.0), 3.0, 1.0)
        assert profile[0, 0] == 3.0
        assert profile[1, 0] == pytest.approx(3.0 * math.exp(-0.5))
        with pytest.raises(oracle.OracleError):
            oracle.gaussian_profile(x1, x2, (0.0, 0.0), 1.0, 0.0)

    def test_spai_pattern_truncated_at_corner(self):
        pattern = oracle.spai_column_pattern(4, 3, 2, 0, 0, 1)
        # self, east, north and the partner species
        assert sorted(pattern) == sorted([1, 3, 9, 0])

    def test_assemble_dense_guard(self):
        from stencil_operator import OperatorSpec
        from grid import GridSpec
        with pytest.raises(oracle.OracleError):
            oracle.assemble_dense(OperatorSpec.identity(GridSpec(101, 100, 1)))
