#!/usr/bin/env python3
# -*- coding: utf-8 -*-

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from grid import BoundaryCondition, Field, GridSpec, decompose, halo_exchange
from verify import random_operator

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_operator(rng):
    """Factory for random diffusion operators on small grids"""

    def _make(nx1=6, nx2=5, nspecies=2, bc=None, dt=0.3):
        return random_operator(rng, nx1, nx2, nspecies, bc or BoundaryCondition.zero_flux(), dt)

    return _make


@pytest.fixture
def loaded_field(rng):
    """Random field matching an operator, halos filled"""

    def _load(op, values=None):
        values = rng.standard_normal(op.shape) if values is None else values
        field = Field.from_interior(values)
        halo_exchange(field, decompose(op.grid, 1, 1), op.bc)
        return field

    return _load


@pytest.fixture
def small_grid():
    return GridSpec(20, 12, 2, 1.0, 1.0)
