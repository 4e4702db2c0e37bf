"""Shared fixtures and random-state factories for the test suite."""

import numpy as np
import pytest

from nmdyn.geometry import PolarizationBasis, build_kgrid
from nmdyn.state import FieldState, ParticleState, PhaseSpacePoint


def random_field(rng, grid, scale=1.0, decay=True):
    """Random complex field; decay=True applies a gaussian envelope in |k|."""
    shape = (grid.d - 1, grid.node_count)
    vals = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
    if decay:
        vals = vals * np.exp(-(grid.absk**2))[None, :]
    return FieldState(grid, scale * vals)


def random_point(rng, grid, n=2, scale=1.0, decay=True):
    d = grid.d
    return PhaseSpacePoint(
        ParticleState(scale * rng.standard_normal((n, d)),
                      scale * rng.standard_normal((n, d))),
        random_field(rng, grid, scale=scale, decay=decay),
    )


def rotate_frame(rng, grid, basis, alpha):
    """Random per-node O(d-1) change of polarization frame.

    Returns the rotated basis and the field components expressed in it; all
    physical outputs must be unchanged.
    """
    dm = grid.d - 1
    q_mat = np.linalg.qr(rng.normal(size=(grid.node_count, dm, dm)))[0]
    vectors = np.einsum("jlv,jlm->jmv", basis.vectors, q_mat)
    rotated = np.einsum("jlm,lj->mj", q_mat, alpha)
    return PolarizationBasis(grid, vectors), rotated, q_mat


@pytest.fixture(scope="session")
def tiny_grid():
    return build_kgrid(3, 1.0, 2)


@pytest.fixture(scope="session")
def small_grid():
    return build_kgrid(3, 2.0, 6)


@pytest.fixture
def rng():
    return np.random.default_rng(20260814)
