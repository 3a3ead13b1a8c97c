import numpy as np
import pytest
import torch

from facefit.mesh import TriMesh, UVMap
from facefit.model import TemplateFaceModel, compute_attention_masks, texel_centers
from facefit.shading import Camera
from facefit.toy import make_toy_head


def grid_mesh(nx, ny, spacing=10.0, seed=None, jitter=0.0):
    """Planar grid in z=0 with UVs spread over [0.05, 0.95]^2."""
    xs, ys = np.meshgrid(np.arange(nx), np.arange(ny))
    verts = np.stack([xs.ravel() * spacing, ys.ravel() * spacing, np.zeros(nx * ny)], axis=1)
    if jitter:
        verts += np.random.default_rng(seed).normal(0, jitter, verts.shape)
    tris = []
    for r in range(ny - 1):
        for c in range(nx - 1):
            i = r * nx + c
            tris += [(i, i + 1, i + nx), (i + 1, i + nx + 1, i + nx)]
    uv = np.stack([0.05 + 0.9 * xs.ravel() / (nx - 1), 0.05 + 0.9 * ys.ravel() / (ny - 1)], 1)
    return TriMesh(verts, np.array(tris), uv)


def tiny_rig(seed=0, n_blendshapes=4, resolution=8):
    """20-vertex rig with random absolute blendshapes."""
    rng = np.random.default_rng(seed)
    mesh = grid_mesh(5, 4, jitter=0.5, seed=seed)
    mesh.vertices[:, 2] = rng.normal(0, 2.0, len(mesh.vertices))
    mesh = TriMesh(mesh.vertices, mesh.triangles, mesh.uv, np.arange(6))
    shapes = mesh.vertices[None] + rng.normal(0, 1.5, (n_blendshapes, 20, 3))
    r0 = rng.uniform(0.2, 0.8, (resolution, resolution, 3))
    labels = (texel_centers(resolution)[:, 0] > 0.5).astype(int).reshape(resolution, resolution)
    return TemplateFaceModel(mesh, shapes, UVMap(r0), labels,
                             UVMap(np.ones((resolution, resolution))), 2,
                             {"resolution": resolution, "blur_sigma": 1.0, "threshold": 1e-3})


@pytest.fixture(scope="session")
def toy():
    return make_toy_head()


@pytest.fixture(scope="session")
def toy_masks(toy):
    return compute_attention_masks(toy)


@pytest.fixture(scope="session")
def cam():
    return Camera()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


def directional_fd(f, x, rng, n_dirs=6, h=1e-6):
    """Autograd vs central-difference directional derivatives of scalar ``f`` at ``x``.

    Returns (analytic, numeric) arrays of length ``n_dirs``.
    """
    x = torch.as_tensor(np.asarray(x, dtype=np.float64)).clone().requires_grad_(True)
    (g,) = torch.autograd.grad(f(x), x)
    ana, num = [], []
    with torch.no_grad():
        for _ in range(n_dirs):
            d = torch.as_tensor(rng.normal(size=tuple(x.shape)))
            ana.append(float((g * d).sum()))
            num.append((float(f(x + h * d)) - float(f(x - h * d))) / (2 * h))
    return np.array(ana), np.array(num)


def rel_error(a, b):
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
