import numpy as np
import pytest
from hypothesis import HealthCheck, settings

import meshgrad as mg

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def rect_grid(nx: int, ny: int, spacing: float = 1.0) -> mg.Mesh:
    """nx * ny vertex grid (same diagonal convention as generate_grid)."""
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    positions = np.stack([ii.ravel() * spacing, jj.ravel() * spacing, np.zeros(nx * ny)], axis=1)
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            v00 = j * nx + i
            v10 = j * nx + i + 1
            v11 = (j + 1) * nx + i + 1
            v01 = (j + 1) * nx + i
            faces.append((v00, v10, v11))
            faces.append((v00, v11, v01))
    return mg.Mesh(positions, np.array(faces))


def bumpy_grid(n: int, amplitude: float = 0.15) -> mg.Mesh:
    """Height-field disk mesh: a grid with a smooth sinusoidal bump."""
    flat = mg.generate_grid(n, 1.0 / (n - 1))
    pos = flat.positions.copy()
    pos[:, 2] = amplitude * np.sin(2 * np.pi * pos[:, 0]) * np.cos(2 * np.pi * pos[:, 1])
    return mg.Mesh(pos, flat.faces)


def single_spring_mesh(length: float = 2.0) -> mg.Mesh:
    return mg.Mesh(np.array([[0.0, 0.0, 0.0], [length, 0.0, 0.0]]), np.zeros((0, 3)), edges=[[0, 1]])


@pytest.fixture
def grid3() -> mg.Mesh:
    return mg.generate_grid(3)


@pytest.fixture
def ico0() -> mg.Mesh:
    return mg.generate_icosphere(0)
