import numpy as np
import pytest

from perfcap.geometry import Mesh, Skeleton
from perfcap.synthetic import tube_mesh, tube_template


def central_difference(f, x, step=1e-5):
    """Gradient of scalar ``f`` at ``x`` by central differences."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    flat = g.reshape(-1)
    for k in range(x.size):
        e = np.zeros(x.size)
        e[k] = step
        e = e.reshape(x.shape)
        flat[k] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def grid_mesh(nx=4, ny=3, size=1.0):
    xs, ys = np.meshgrid(np.linspace(0, size, nx), np.linspace(0, size, ny))
    V = np.stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)], axis=1)
    F = []
    for r in range(ny - 1):
        for c in range(nx - 1):
            a = r * nx + c
            F += [[a, a + 1, a + nx], [a + 1, a + nx + 1, a + nx]]
    return Mesh(V, np.array(F))


def chain(n_joints=5, rng=None):
    """Straight chain along +y with 3-axis joints and one landmark per joint."""
    rng = np.random.default_rng(0) if rng is None else rng
    offsets = np.zeros((n_joints, 3))
    offsets[1:, 1] = 0.3
    offsets[1:] += rng.normal(scale=0.05, size=(n_joints - 1, 3))
    axes = [np.zeros((0, 3))] + [np.eye(3)] * (n_joints - 1)
    parents = np.arange(-1, n_joints - 1)
    return Skeleton(parents, offsets, tuple(axes), landmark_joints=np.arange(n_joints),
                    landmark_offsets=rng.normal(scale=0.05, size=(n_joints, 3)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tube():
    return tube_template()


@pytest.fixture(scope="session")
def tube_mesh_small():
    V, F = tube_mesh()
    return Mesh(V, F)


# -- acceptance reporting ------------------------------------------------------------------

ACCEPTANCE = {}


class Criterion:
    """Context manager recording PASS/FAIL for one acceptance criterion."""

    def __init__(self, number, title):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, kind, exc, tb):
        ACCEPTANCE[self.number] = ("FAIL" if kind else "PASS", self.title, self.detail)
        return False


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {status}: {title}" + (f" ({detail})" if detail else ""))
