from dataclasses import replace

import pytest

from modules.Basis import coupling_matrix, extract_wss_ladder, fix_phase, solve_eigenproblem
from modules.Lattice import GridSpec, LatticeParams


@pytest.fixture(scope="session")
def params():
    return LatticeParams(V0=2.5, F=0.5)


@pytest.fixture(scope="session")
def grid():
    return GridSpec()


@pytest.fixture(scope="session")
def spectrum(grid, params):
    return solve_eigenproblem(grid, params)


@pytest.fixture(scope="session")
def basis(spectrum, grid, params):
    ladder = fix_phase(extract_wss_ladder(spectrum, grid, params))
    return replace(ladder, X=coupling_matrix(ladder, p_max=3))
