import numpy as np
import pytest

from polythm.forms import BASE_PARAMS, ModelParams
from polythm.mesh import build_mesh, generate_voronoi


@pytest.fixture(scope="session")
def square():
    return build_mesh(np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]), [[0, 1, 2, 3]], domain=(0, 1, 0, 1))


@pytest.fixture(scope="session")
def two_squares():
    v = np.array([[0, 0], [1, 0], [2, 0], [2, 1], [1, 1], [0, 1]], dtype=float)
    return build_mesh(v, [[0, 1, 4, 5], [1, 2, 3, 4]], domain=(0, 2, 0, 1))


@pytest.fixture(scope="session")
def mesh20():
    return generate_voronoi(20, rng_seed=3, lloyd_iterations=30)


@pytest.fixture(scope="session")
def mesh100():
    return generate_voronoi(100)


def base_params(mesh, **kw):
    return ModelParams.uniform(mesh.n_cells, **{**BASE_PARAMS, **kw})


def heterogeneous(mesh, seed=0):
    """Random SPD K and PSD Theta per cell, other coefficients from the convergence test."""
    rng = np.random.default_rng(seed)
    n = mesh.n_cells

    def spd(shift):
        A = rng.standard_normal((n, 2, 2))
        return A @ A.transpose(0, 2, 1) + shift * np.eye(2)

    return ModelParams.uniform(n, mu=rng.uniform(0.5, 2, n), K=spd(0.1), Theta=spd(0.0))


# acceptance verdicts, filled by test_acceptance.py and printed at session end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
N_CRITERIA = 11


def record(k: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[k] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in range(1, N_CRITERIA + 1):
        ok, detail = ACCEPTANCE.get(k, (False, "not run"))
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")
