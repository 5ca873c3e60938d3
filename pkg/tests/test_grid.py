#!/usr/bin/env python3
# -*- coding: utf-8 -*-

from __future__ import annotations

import numpy as np
import pytest

from grid import (BoundaryCondition, CommunicatorError, Direction, Field, GridError, GridSpec, MAX_WORKERS_ENV,
                  decompose, exchange_all, gather, global_reduce_sum, halo_exchange, max_worker_count,
                  run_tile_workers, scatter)


def _global_halo_reference(values, bc):
    """Halo-padded global array from a single-tile exchange"""
    grid = GridSpec(*values.shape)
    field = Field.from_interior(values)
    halo_exchange(field, decompose(grid, 1, 1), bc)
    return field.data


def _assert_halo_matches(field, tile, reference):
    window = reference[tile.start1:tile.start1 + tile.len1 + 2, tile.start2:tile.start2 + tile.len2 + 2]
    # corners are never exchanged
    np.testing.assert_array_equal(field.data[1:-1, :], window[1:-1, :])
    np.testing.assert_array_equal(field.data[:, 1:-1], window[:, 1:-1])


class TestGridSpec:
    def test_shape_and_size(self):
        grid = GridSpec(200, 100, 2, 0.01, 0.01)
        assert grid.shape == (200, 100, 2)
        assert grid.size == 40_000
        assert grid.extent == pytest.approx((2.0, 1.0))

    def test_zone_centers(self):
        x1, x2 = GridSpec(4, 2, 1, 0.5, 2.0).zone_centers()
        np.testing.assert_allclose(x1, [0.25, 0.75, 1.25, 1.75])
        np.testing.assert_allclose(x2, [1.0, 3.0])

    @pytest.mark.parametrize("kwargs", [
        {"nx1": 0, "nx2": 4},
        {"nx1": 4, "nx2": -1},
        {"nx1": 4, "nx2": 4, "nspecies": 0},
        {"nx1": 4, "nx2": 4, "dx1": 0.0},
        {"nx1": 4, "nx2": 4, "dx2": float("inf")},
        {"nx1": 4.5, "nx2": 4},
    ])
    def test_invalid_grid_rejected(self, kwargs):
        with pytest.raises(GridError):
            GridSpec(**kwargs)


class TestDecompose:
    def test_row_topology(self):
        topology = decompose(GridSpec(200, 100), 10, 1)
        assert topology.worker_count == 10
        assert all(tile.len1 == 20 and tile.len2 == 100 for tile in topology.tiles)

    def test_single_tile(self):
        topology = decompose(GridSpec(8, 8), 1, 1)
        tile = topology.tile(0)
        assert (tile.start1, tile.len1, tile.start2, tile.len2) == (0, 8, 0, 8)

    def test_remainder_first(self):
        topology = decompose(GridSpec(7, 5), 3, 2)
        assert [length for _, length in topology.extents1] == [3, 2, 2]
        assert [length for _, length in topology.extents2] == [3, 2]

    def test_extents_partition_grid(self):
        grid = GridSpec(23, 17)
        topology = decompose(grid, 4, 3)
        covered = np.zeros((23, 17), dtype=int)
        for tile in topology.tiles:
            covered[tile.slices] += 1
        assert (covered == 1).all()

    def test_tile_ids_run_x1_fastest(self):
        topology = decompose(GridSpec(20, 12), 5, 4)
        tile = topology.tile(7)
        assert (tile.p1, tile.p2) == (2, 1)
        assert topology.neighbor(7, Direction.EAST) == 8
        assert topology.neighbor(7, Direction.NORTH) == 12
        assert topology.neighbor(0, Direction.WEST) is None
        assert topology.neighbor(0, Direction.SOUTH) is None

    @pytest.mark.parametrize("nprx1, nprx2", [(0, 1), (1, 0), (-2, 1), (9, 1), (1, 6), (1.5, 1)])
    def test_invalid_topology_rejected(self, nprx1, nprx2):
        with pytest.raises(GridError):
            decompose(GridSpec(8, 5), nprx1, nprx2)

    def test_unknown_tile_id(self):
        with pytest.raises(GridError):
            decompose(GridSpec(8, 8), 2, 2).tile(4)


class TestHaloExchange:
    def test_single_tile_zero_flux_mirrors_interior(self, rng):
        values = rng.standard_normal((5, 4, 2))
        field = Field.from_interior(values)
        halo_exchange(field, decompose(GridSpec(5, 4, 2), 1, 1), BoundaryCondition.zero_flux())
        np.testing.assert_array_equal(field.data[0, 1:-1], values[0])
        np.testing.assert_array_equal(field.data[-1, 1:-1], values[-1])
        np.testing.assert_array_equal(field.data[1:-1, 0], values[:, 0])
        np.testing.assert_array_equal(field.data[1:-1, -1], values[:, -1])

    def test_dirichlet_fills_value(self, rng):
        field = Field.from_interior(rng.standard_normal((4, 3, 1)))
        halo_exchange(field, decompose(GridSpec(4, 3, 1), 1, 1), BoundaryCondition.dirichlet(2.5))
        assert (field.data[0, 1:-1] == 2.5).all()
        assert (field.data[1:-1, -1] == 2.5).all()

    def test_constant_field_two_tiles(self):
        grid = GridSpec(6, 4, 1)
        topology = decompose(grid, 2, 1)
        fields = exchange_all(scatter(np.full(grid.shape, 3.0), topology), topology, BoundaryCondition.zero_flux())
        for field in fields:
            assert (field.data[1:-1, :] == 3.0).all()
            assert (field.data[:, 1:-1] == 3.0).all()

    def test_index_formula_on_four_tiles(self):
        grid = GridSpec(9, 7, 1)
        i1, i2 = np.indices((9, 7))
        values = (i1 + 10.0 * i2)[..., None]
        bc = BoundaryCondition.zero_flux()
        reference = _global_halo_reference(values, bc)
        topology = decompose(grid, 2, 2)
        fields = exchange_all(scatter(values, topology), topology, bc)
        for field, tile in zip(fields, topology.tiles):
            _assert_halo_matches(field, tile, reference)

    def test_multi_tile_needs_neighbors(self):
        grid = GridSpec(6, 4, 1)
        topology = decompose(grid, 2, 1)
        fields = scatter(np.zeros(grid.shape), topology)
        with pytest.raises(CommunicatorError):
            halo_exchange(fields[0], topology, BoundaryCondition.zero_flux())


class TestScatterGather:
    def test_gather_inverts_scatter(self, rng):
        grid = GridSpec(11, 7, 2)
        values = rng.standard_normal(grid.shape)
        topology = decompose(grid, 3, 2)
        np.testing.assert_array_equal(gather(scatter(values, topology), topology), values)

    def test_scatter_shape_mismatch(self):
        with pytest.raises(GridError):
            scatter(np.zeros((3, 3, 1)), decompose(GridSpec(4, 3, 1), 1, 1))


class TestReductions:
    def test_single_contribution(self):
        np.testing.assert_array_equal(global_reduce_sum([[3.0]]), [3.0])

    def test_four_workers(self):
        np.testing.assert_array_equal(global_reduce_sum([[1.0, 2.0]] * 4), [4.0, 8.0])

    def test_ascending_worker_order(self):
        # summing 1e16 + 1 loses the 1, so only the worker order 0, 1, 2 yields exactly zero
        assert global_reduce_sum([[1e16], [1.0], [-1e16]])[0] == 0.0

    def test_partial_dot_products_match_sequential_sum(self, rng):
        x = rng.standard_normal(30)
        parts = [[float(np.dot(x[k:k + 10], x[k:k + 10]))] for k in (0, 10, 20)]
        expected = (parts[0][0] + parts[1][0]) + parts[2][0]
        assert global_reduce_sum(parts)[0] == expected

    def test_length_mismatch(self):
        with pytest.raises(CommunicatorError):
            global_reduce_sum([[1.0, 2.0], [1.0]])


class TestTileWorkers:
    def test_threaded_reduction(self):
        topology = decompose(GridSpec(8, 6, 1), 2, 2)

        def work(comm, tile):
            return comm.global_reduce_sum(tile.tile_id, [tile.tile_id + 1.0, 1.0])

        results = run_tile_workers(topology, work)
        for total in results:
            np.testing.assert_array_equal(total, [10.0, 4.0])

    def test_threaded_halo_exchange_matches_serial(self, rng):
        grid = GridSpec(9, 8, 2)
        values = rng.standard_normal(grid.shape)
        bc = BoundaryCondition.zero_flux()
        topology = decompose(grid, 3, 2)
        reference = _global_halo_reference(values, bc)
        fields = scatter(values, topology)

        def work(comm, tile):
            return comm.halo_exchange(fields[tile.tile_id], bc)

        for field, tile in zip(run_tile_workers(topology, work), topology.tiles):
            _assert_halo_matches(field, tile, reference)

    def test_mismatched_reduction_raises(self):
        topology = decompose(GridSpec(8, 6, 1), 2, 1)

        def work(comm, tile):
            return comm.global_reduce_sum(tile.tile_id, [1.0] * (tile.tile_id + 1))

        with pytest.raises(CommunicatorError):
            run_tile_workers(topology, work)

    def test_worker_cap(self):
        topology = decompose(GridSpec(8, 6, 1), 2, 2)
        with pytest.raises(GridError):
            run_tile_workers(topology, lambda comm, tile: None, max_workers=3)

    def test_worker_cap_from_environment(self, monkeypatch):
        monkeypatch.setenv(MAX_WORKERS_ENV, "3")
        assert max_worker_count() == 3
        monkeypatch.setenv(MAX_WORKERS_ENV, "zero")
        with pytest.raises(GridError):
            max_worker_count()
