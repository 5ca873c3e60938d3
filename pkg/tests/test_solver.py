#!/usr/bin/env python3
# -*- coding: utf-8 -*-

from __future__ import annotations

import numpy as np
import pytest

import oracle
from grid import BoundaryCondition, Communicator, Field, GridSpec, decompose
from kernels import KernelPath
from precond import PreconditionerKind, build_preconditioner, identity_preconditioner
from solver import (BreakdownKind, Outcome, SolverConfig, SolverError, SolverVariant, bicgstab,
                    bicgstab_variant_equivalence_probe)
from stencil_operator import OperatorSpec
from verify import random_operator

VARIANTS = list(SolverVariant)


def _dense_reference(op, b):
    system = oracle.DenseSystem(oracle.assemble_dense(op), oracle.flatten(b))
    return oracle.dense_solve(system)


def _rotation_operator():
    """One zone, two species, A = [[0, 1], [-1, 0]]: (r0, A r0) vanishes for r0 = e_0"""
    grid = GridSpec(1, 1, 2)
    zeros = np.zeros(grid.shape)
    couple = np.zeros(grid.shape + (2,))
    couple[0, 0, 0, 1] = 1.0
    couple[0, 0, 1, 0] = -1.0
    return OperatorSpec(grid, BoundaryCondition.zero_flux(), zeros.copy(), zeros.copy(), zeros.copy(),
                        zeros.copy(), zeros.copy(), couple)


def _diagonal_operator():
    grid = GridSpec(4, 3, 1)
    op = OperatorSpec.identity(grid)
    op.diag[...] = np.linspace(1.0, 3.0, grid.size).reshape(grid.shape)
    return op


class TestSolve:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_identity_system(self, rng, variant):
        grid = GridSpec(4, 3, 2)
        b = Field.from_interior(rng.standard_normal(grid.shape))
        x, stats = bicgstab(OperatorSpec.identity(grid), identity_preconditioner(), b,
                            cfg=SolverConfig(variant=variant))
        np.testing.assert_allclose(x.interior, b.interior, rtol=1e-15)
        assert stats.iterations == 1
        assert stats.converged

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_zero_rhs(self, make_operator, variant):
        op = make_operator(4, 3, 2)
        x, stats = bicgstab(op, build_preconditioner(PreconditionerKind.SPAI, op), Field.zeros(4, 3, 2),
                            cfg=SolverConfig(variant=variant))
        assert stats.iterations == 0
        assert stats.outcome is Outcome.CONVERGED
        assert (x.interior == 0).all()

    @pytest.mark.parametrize("variant", VARIANTS)
    @pytest.mark.parametrize("kind", list(PreconditionerKind))
    def test_matches_dense_solve(self, make_operator, rng, variant, kind):
        op = make_operator(8, 6, 2)
        b = rng.standard_normal(op.shape)
        expected = _dense_reference(op, b)
        x, stats = bicgstab(op, build_preconditioner(kind, op), Field.from_interior(b),
                            cfg=SolverConfig(tol=1e-10, variant=variant, precond=kind))
        assert stats.converged
        assert stats.final_relative_residual <= 1e-10
        error = np.linalg.norm(oracle.flatten(x.interior) - expected)
        assert error <= 1e-6 * np.linalg.norm(expected)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_random_systems_match_dense_solve(self, variant):
        rng = np.random.default_rng(20)
        for _ in range(20):
            nx1, nx2, ns = int(rng.integers(2, 9)), int(rng.integers(2, 8)), int(rng.integers(1, 3))
            bc = BoundaryCondition.zero_flux() if rng.random() < 0.5 else BoundaryCondition.dirichlet(0.0)
            op = random_operator(rng, nx1, nx2, ns, bc, dt=float(rng.uniform(0.1, 1.0)))
            kind = list(PreconditionerKind)[int(rng.integers(0, len(PreconditionerKind)))]
            b = rng.standard_normal(op.shape)
            expected = _dense_reference(op, b)
            x, stats = bicgstab(op, build_preconditioner(kind, op), Field.from_interior(b),
                                cfg=SolverConfig(tol=1e-10, variant=variant, precond=kind))
            assert stats.converged, (nx1, nx2, ns, kind)
            error = np.linalg.norm(oracle.flatten(x.interior) - expected)
            assert error <= 1e-6 * np.linalg.norm(expected)

    def test_scalar_kernel_path(self, make_operator, rng):
        op = make_operator(6, 5, 2)
        b = Field.from_interior(rng.standard_normal(op.shape))
        m = build_preconditioner(PreconditionerKind.SPAI, op)
        scalar_cfg = SolverConfig(tol=1e-10, kernel_path=KernelPath.SCALAR_REFERENCE)
        x_scalar, stats_scalar = bicgstab(op, m, b, cfg=scalar_cfg)
        x_vector, stats_vector = bicgstab(op, m, b, cfg=SolverConfig(tol=1e-10))
        assert stats_scalar.converged and stats_vector.converged
        np.testing.assert_allclose(x_scalar.interior, x_vector.interior, rtol=1e-7, atol=1e-7)

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_warm_start_from_solution(self, make_operator, rng, variant):
        op = make_operator(5, 4, 2)
        b = Field.from_interior(rng.standard_normal(op.shape))
        m = build_preconditioner(PreconditionerKind.SPAI, op)
        cfg = SolverConfig(tol=1e-10, variant=variant)
        x, _ = bicgstab(op, m, b, cfg=cfg)
        _, stats = bicgstab(op, m, b, x, cfg)
        assert stats.iterations <= 1

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_iteration_cap(self, make_operator, rng, variant):
        op = make_operator(8, 6, 2)
        b = Field.from_interior(rng.standard_normal(op.shape))
        cfg = SolverConfig(tol=1e-30, max_iter=2, variant=variant, precond=PreconditionerKind.IDENTITY)
        _, stats = bicgstab(op, identity_preconditioner(), b, cfg=cfg)
        assert stats.outcome is Outcome.MAX_ITER
        assert stats.iterations == 2
        assert 0.0 < stats.final_relative_residual < 1.0

    @pytest.mark.parametrize("variant", VARIANTS)
    def test_rho_breakdown(self, variant):
        op = _rotation_operator()
        b = Field.from_interior(np.array([[[1.0, 0.0]]]))
        _, stats = bicgstab(op, identity_preconditioner(), b,
                            cfg=SolverConfig(variant=variant, precond=PreconditionerKind.IDENTITY))
        assert stats.outcome is Outcome.BREAKDOWN
        assert stats.breakdown is BreakdownKind.RHO_ZERO
        assert stats.outcome_label == "breakdown(rho_zero)"
        assert stats.final_relative_residual == pytest.approx(1.0)

    def test_default_iteration_cap(self):
        assert SolverConfig().iteration_cap(40_000) == 2000
        assert SolverConfig(max_iter=7).iteration_cap(40_000) == 7

    @pytest.mark.parametrize("kwargs", [{"tol": 0.0}, {"tol": float("nan")}, {"max_iter": 0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(SolverError):
            SolverConfig(**kwargs)

    def test_shape_mismatch(self, make_operator):
        op = make_operator(4, 3, 2)
        with pytest.raises(SolverError):
            bicgstab(op, identity_preconditioner(), Field.zeros(3, 3, 2))

    def test_non_finite_rhs(self, make_operator):
        op = make_operator(4, 3, 2)
        values = np.zeros(op.shape)
        values[1, 1, 0] = np.nan
        with pytest.raises(SolverError):
            bicgstab(op, identity_preconditioner(), Field.from_interior(values))


class TestReductionAccounting:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_event_identity(self, make_operator, rng, variant):
        op = make_operator(8, 6, 2)
        b = Field.from_interior(rng.standard_normal(op.shape))
        _, stats = bicgstab(op, build_preconditioner(PreconditionerKind.SPAI, op), b,
                            cfg=SolverConfig(tol=1e-10, variant=variant))
        assert stats.setup_reductions == 1
        assert stats.reduction_events == (stats.setup_reductions + sum(stats.reductions_per_iteration)
                                          + stats.residual_checks)
        assert stats.matvec_count == 1 + 2 * stats.iterations + stats.residual_checks
        assert len(stats.reductions_per_iteration) == stats.iterations
        assert len(stats.residual_history) == stats.iterations + 1

    def test_per_iteration_counts(self, make_operator, rng):
        op = make_operator(8, 6, 2)
        b = Field.from_interior(rng.standard_normal(op.shape))
        m = build_preconditioner(PreconditionerKind.BLOCK_JACOBI, op)
        _, classic = bicgstab(op, m, b, cfg=SolverConfig(tol=1e-10, variant=SolverVariant.CLASSIC))
        _, ganged = bicgstab(op, m, b, cfg=SolverConfig(tol=1e-10, variant=SolverVariant.GANGED))
        assert set(classic.reductions_per_iteration[:-1]) == {4}
        assert classic.reductions_per_iteration[-1] in (3, 4)
        assert set(ganged.reductions_per_iteration) == {2}
        assert ganged.reduction_events / ganged.iterations < classic.reduction_events / classic.iterations

    def test_communicator_sees_every_event(self, make_operator, rng, mocker):
        spy = mocker.spy(Communicator, "global_reduce_sum")
        op = make_operator(6, 4, 2)
        b = Field.from_interior(rng.standard_normal(op.shape))
        _, stats = bicgstab(op, identity_preconditioner(), b, cfg=SolverConfig(precond=PreconditionerKind.IDENTITY),
                            topology=decompose(op.grid, 1, 1))
        assert spy.call_count == stats.reduction_events


class TestTopology:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_multi_tile_matches_single_tile(self, make_operator, rng, variant):
        op = make_operator(12, 8, 2)
        b = Field.from_interior(rng.standard_normal(op.shape))
        m = build_preconditioner(PreconditionerKind.SPAI, op)
        cfg = SolverConfig(tol=1e-10, variant=variant)
        x1, stats1 = bicgstab(op, m, b, cfg=cfg)
        x4, stats4 = bicgstab(op, m, b, cfg=cfg, topology=decompose(op.grid, 2, 2))
        assert stats4.converged
        assert abs(stats1.iterations - stats4.iterations) <= 1
        np.testing.assert_allclose(x4.interior, x1.interior, rtol=0, atol=1e-7 * np.abs(x1.interior).max())

    def test_block_jacobi_on_uneven_tiles(self, make_operator, rng):
        op = make_operator(7, 5, 2)
        b = rng.standard_normal(op.shape)
        expected = _dense_reference(op, b)
        x, stats = bicgstab(op, build_preconditioner(PreconditionerKind.BLOCK_JACOBI, op), Field.from_interior(b),
                            cfg=SolverConfig(tol=1e-10, precond=PreconditionerKind.BLOCK_JACOBI),
                            topology=decompose(op.grid, 3, 2))
        assert stats.converged
        assert np.linalg.norm(oracle.flatten(x.interior) - expected) <= 1e-6 * np.linalg.norm(expected)

    def test_deterministic(self, make_operator, rng):
        op = make_operator(10, 6, 2)
        b = Field.from_interior(rng.standard_normal(op.shape))
        m = build_preconditioner(PreconditionerKind.SPAI, op)
        topology = decompose(op.grid, 5, 2)
        first = bicgstab(op, m, b, topology=topology)
        second = bicgstab(op, m, b, topology=topology)
        np.testing.assert_array_equal(first[0].interior, second[0].interior)
        assert first[1].iterations == second[1].iterations
        assert first[1].reduction_events == second[1].reduction_events

    def test_callback_needs_single_tile(self, make_operator, rng):
        op = make_operator(4, 4, 2)
        b = Field.from_interior(rng.standard_normal(op.shape))
        with pytest.raises(SolverError):
            bicgstab(op, identity_preconditioner(), b, topology=decompose(op.grid, 2, 1),
                     callback=lambda k, x: None)


class TestVariantEquivalence:
    def test_identity_system(self, rng):
        grid = GridSpec(3, 3, 2)
        b = Field.from_interior(rng.standard_normal(grid.shape))
        pairs = bicgstab_variant_equivalence_probe(OperatorSpec.identity(grid), identity_preconditioner(), b,
                                                   None, 5)
        assert len(pairs) == 1
        np.testing.assert_array_equal(pairs[0][0], pairs[0][1])

    def test_diffusion_system(self, make_operator, rng):
        op = make_operator(8, 6, 2)
        b = Field.from_interior(rng.standard_normal(op.shape))
        pairs = bicgstab_variant_equivalence_probe(op, build_preconditioner(PreconditionerKind.BLOCK_JACOBI, op),
                                                   b, None, 10)
        assert len(pairs) >= 5
        for classic, ganged in pairs:
            assert np.linalg.norm(classic - ganged) <= 1e-10 * np.linalg.norm(classic)

    def test_diagonal_system(self, rng):
        op = _diagonal_operator()
        b = Field.from_interior(rng.standard_normal(op.shape))
        pairs = bicgstab_variant_equivalence_probe(op, identity_preconditioner(), b, None, 4)
        assert pairs
        for classic, ganged in pairs:
            assert np.linalg.norm(classic - ganged) <= 1e-12 * np.linalg.norm(classic)

    def test_needs_positive_iterations(self, make_operator, rng):
        op = make_operator(3, 3, 2)
        with pytest.raises(SolverError):
            bicgstab_variant_equivalence_probe(op, identity_preconditioner(), Field.zeros(3, 3, 2), None, 0)
