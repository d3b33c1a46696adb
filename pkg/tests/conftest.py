import numpy as np
import pytest

from dirichlet_p.grid import (
    CoefficientField,
    GridDomain,
    GridFunction,
    unit_structure,
)


def random_elliptic_field(domain: GridDomain, rng: np.random.Generator,
                          alpha: float = 0.5, beta: float = 2.0) -> CoefficientField:
    """Per-cell random symmetric matrices with eigenvalues in [alpha, beta]."""
    n = domain.dim
    raw = rng.standard_normal(domain.cells_shape + (n, n))
    q, _ = np.linalg.qr(raw)
    eigs = rng.uniform(alpha, beta, domain.cells_shape + (n,))
    mats = np.einsum("...ij,...j,...kj->...ik", q, eigs, q)
    mats = 0.5 * (mats + np.swapaxes(mats, -1, -2))
    return CoefficientField(mats, alpha, beta)


def random_function(domain: GridDomain, rng: np.random.Generator,
                    smooth: bool = False) -> GridFunction:
    vals = rng.standard_normal(domain.node_shape)
    if smooth:
        for _ in range(3):
            for axis in range(domain.dim):
                vals = 0.5 * vals + 0.25 * (np.roll(vals, 1, axis) + np.roll(vals, -1, axis))
    return GridFunction(vals)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


@pytest.fixture
def line():
    """Unit interval with 17 nodes (h = 1/16, aligned with quarters)."""
    return GridDomain(((0.0, 1.0),), (17,))


@pytest.fixture
def square():
    return GridDomain(((0.0, 1.0), (0.0, 1.0)), (9, 9))


@pytest.fixture
def line_structure(line):
    return unit_structure(line)


@pytest.fixture
def square_structure(square):
    return unit_structure(square)
