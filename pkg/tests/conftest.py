import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from cem_forward import CemModel, CurrentFrame, MeasurementPattern
from increments import IncrementOperator
from mesh import ElectrodeLayout, build_mesh, generate_disk_mesh


@pytest.fixture(scope='session')
def small_layout():
    # 8 electrodes, equal arcs and gaps
    return ElectrodeLayout.equispaced(8, 22.5)


@pytest.fixture(scope='session')
def small_mesh(small_layout):
    return generate_disk_mesh(1.0, 0.25, small_layout)


@pytest.fixture(scope='session')
def medium_mesh(small_layout):
    return generate_disk_mesh(1.0, 0.12, small_layout)


@pytest.fixture(scope='session')
def star_mesh():
    """One interior node joined to three boundary nodes."""
    points = np.array([[0.0, 0.0], [1.0, 0.0], [-0.5, np.sqrt(3) / 2], [-0.5, -np.sqrt(3) / 2]])
    is_boundary = np.array([False, True, True, True])
    triangles = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 1]])
    return build_mesh(points, is_boundary, triangles)


@pytest.fixture
def adjacent_patterns():
    """Adjacent injections with adjacent measurements on 8 electrodes."""
    L = 8
    currents = CurrentFrame.from_pairs([(k, (k + 1) % L) for k in range(L)], L)
    return currents, MeasurementPattern.adjacent(L, L)


@pytest.fixture(scope='session')
def small_model(small_mesh):
    return CemModel(small_mesh, 1e-2)


@pytest.fixture(scope='session')
def small_op(small_mesh):
    return IncrementOperator.build(small_mesh)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
