"""Shared fixtures: small 1D setups reused across the suite.

Grids stay small (N = 12..32) so the dense oracles remain affordable;
frozen tolerances in the individual files were measured on exactly these
configurations.
"""

import numpy as np
import pytest

from bihum import (
    CoefficientSet,
    DomainSpec,
    SpatialGrid,
    TimeGrid,
    box_mask,
    build_eta,
)

CONTROL_BOX = ((0.3, 0.7),)
INNER_BOX = ((0.35, 0.65),)


@pytest.fixture(scope="session")
def spec1d():
    return DomainSpec((1.0,), CONTROL_BOX, INNER_BOX)


@pytest.fixture(scope="session")
def grid16():
    return SpatialGrid((1.0,), (16,))


@pytest.fixture(scope="session")
def grid32():
    return SpatialGrid((1.0,), (32,))


@pytest.fixture(scope="session")
def eta16(spec1d, grid16):
    return build_eta(spec1d, grid16)


@pytest.fixture(scope="session")
def eta32(spec1d, grid32):
    return build_eta(spec1d, grid32)


@pytest.fixture
def rng():
    return np.random.default_rng(20260825)


def lowmode_field(grid, rng, kmax=4, scale=1.0):
    """Random field with 1/k^2 modal falloff, zero outside the first kmax modes."""
    modes = np.zeros(grid.shape)
    idx = np.indices(tuple(min(kmax, n) for n in grid.shape))
    falloff = 1.0
    for ax in range(grid.dim):
        falloff = falloff / (idx[ax] + 1.0) ** 2
    draw = rng.standard_normal(idx[0].shape) * falloff * scale
    modes[tuple(slice(0, s) for s in idx[0].shape)] = draw
    return grid.from_modes(modes)


def coeffs_with(grid, tgrid, *, a0=None, b0=None, d=None, a1=None, g=None,
                control=CONTROL_BOX):
    """CoefficientSet with scalar lower-order data broadcast to fields."""
    def full(c):
        return None if c is None else np.full(grid.shape, float(c))

    b0v = None if b0 is None else tuple(full(c) for c in b0)
    dv = None
    if d is not None:
        dv = tuple(tuple(full(d[i][j]) for j in range(grid.dim))
                   for i in range(grid.dim))
    return CoefficientSet.build(
        grid, tgrid,
        a0=full(a0), b0=b0v, d=dv, a1=full(a1), g=g,
        control_mask=box_mask(grid, control))


@pytest.fixture
def tgrid100():
    return TimeGrid(1.0, 100)
