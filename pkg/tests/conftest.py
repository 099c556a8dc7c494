import numpy as np
import pytest

from pnp_upscale.cellcorrect import (
    solve_density_corrector_shape,
    solve_potential_corrector,
)
from pnp_upscale.unitcell import (
    PermittivityParams,
    UnitCell,
    build_unit_cell,
    permittivity_field,
)

CONTRAST = PermittivityParams(lam=1.0, alpha=4.0)


def checkerboard_mask(m):
    """2x2-block pattern: fluid on two opposite quadrant-parity classes."""
    lower = (np.arange(m) + 0.5) / m < 0.5
    X, Y = np.meshgrid(lower, lower, indexing="ij")
    return np.logical_xor(X, Y)


def checkerboard_cell(m):
    return UnitCell(
        dim=2,
        resolution=m,
        fluid_mask=checkerboard_mask(m),
        geometry_spec={"kind": "mask", "dim": 2},
    )


def rel_l2(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


@pytest.fixture(scope="session")
def disc_correctors():
    """Disc-inclusion correctors at several resolutions, shared across tests.

    Returns {m: (cell, kappa, xi3, eta)} for m in (64, 128, 256).
    """
    out = {}
    for m in (64, 128, 256):
        cell = build_unit_cell({"kind": "disc", "radius": 0.25, "dim": 2}, m)
        kappa = permittivity_field(cell, CONTRAST)
        xi3, _ = solve_potential_corrector(cell, kappa, tol=1e-10)
        eta, _ = solve_density_corrector_shape(cell, xi3, tol=1e-10)
        out[m] = (cell, kappa, xi3, eta)
    return out
