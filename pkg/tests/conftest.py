import numpy as np
import pytest
from scipy import ndimage

from srd_chance.problems import BilinearProblem, LinearProblem


@pytest.fixture(scope="session")
def linear_small():
    """Coarse linear problem shared by the cheaper tests."""
    return LinearProblem(n=24, K=12)


@pytest.fixture(scope="session")
def linear_mid():
    return LinearProblem(n=32, K=20)


@pytest.fixture(scope="session")
def bilinear_small():
    return BilinearProblem(n=9)


@pytest.fixture(scope="session")
def bilinear_fd():
    return BilinearProblem(n=17)


def smooth_perturbation(grid, rng, amplitude, modes=3):
    """Random low-frequency full-grid field."""
    out = np.zeros(grid.num_nodes)
    for k1 in range(1, modes + 1):
        for k2 in range(1, modes + 1):
            c = rng.standard_normal() / (k1 * k2)
            out += c * np.sin(k1 * np.pi * grid.x1) * np.sin(k2 * np.pi * grid.x2)
    return amplitude * out / np.abs(out).max()


def l2_unit(v, weights):
    return v / np.sqrt(np.dot(weights * v, v))


def local_maxima(grid, values, count=2):
    """Positions and values of the largest positive local maxima of a full grid field."""
    field = values.reshape(grid.n, grid.n)
    peak = (field == ndimage.maximum_filter(field, size=3, mode="nearest")) & (field > 1e-8)
    j, i = np.nonzero(peak)
    order = np.argsort(-field[j, i], kind="stable")[:count]
    return [(grid.h * i[k], grid.h * j[k], field[j[k], i[k]]) for k in order]


def peaks_on_diagonal(grid, values, radius=0.1):
    """True when the two largest maxima sit near (1/4, 1/4) and (3/4, 3/4), one each."""
    tops = local_maxima(grid, values)
    if len(tops) != 2:
        return False
    near = [min(range(2), key=lambda c: np.hypot(x - (0.25, 0.75)[c], y - (0.25, 0.75)[c])) for x, y, _ in tops]
    dist = [np.hypot(x - (0.25, 0.75)[c], y - (0.25, 0.75)[c]) for (x, y, _), c in zip(tops, near)]
    return sorted(near) == [0, 1] and max(dist) <= radius
