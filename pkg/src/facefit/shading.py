"""Second-order spherical-harmonics lighting and the pinhole camera."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .mesh import as_tensor

N_BANDS = 9
N_SH = 27

# standard real SH normalization constants
SH_C0 = 0.5 / math.sqrt(math.pi)
SH_C1 = math.sqrt(3.0 / (4.0 * math.pi))
SH_C2 = math.sqrt(15.0 / (4.0 * math.pi))
SH_C3 = math.sqrt(5.0 / (16.0 * math.pi))
SH_C4 = math.sqrt(15.0 / (16.0 * math.pi))


class ProjectionError(ValueError):
    def __init__(self, indices, near):
        idx = list(map(int, indices))
        shown = ", ".join(map(str, idx[:20])) + (" ..." if len(idx) > 20 else "")
        super().__init__(f"{len(idx)} point(s) at or behind the near plane z={near}: [{shown}]")
        self.indices = idx


def _sh_basis(n):
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return torch.stack([
        torch.full_like(x, SH_C0),
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ], dim=-1)


def sh_basis(normal, tol=1e-6):
    """Real SH basis Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22 at unit normals.

    Accepts a single 3-vector or an (..., 3) array.
    """
    n = as_tensor(normal)
    norms = torch.linalg.norm(n, dim=-1)
    if torch.any((norms - 1.0).abs() > tol):
        raise ValueError("sh_basis expects unit normals")
    return _sh_basis(n)


def gamma_matrix(gamma):
    """27 SH coefficients -> (3 channels, 9 bands)."""
    g = as_tensor(gamma)
    if g.shape[-1] == N_SH:
        g = g.reshape(*g.shape[:-1], 3, N_BANDS)
    if g.shape[-2:] != (3, N_BANDS):
        raise ValueError(f"expected 27 SH coefficients, got shape {tuple(g.shape)}")
    return g


def irradiance(normal, gamma):
    """Per-channel sum_b gamma[c, b] Y_b(n); normals are assumed unit length."""
    return _sh_basis(as_tensor(normal)) @ gamma_matrix(gamma).transpose(-1, -2)


def shade(albedo, normal, gamma):
    """Lambertian SH shading, radiance_c = albedo_c * sum_b gamma[c,b] Y_b(n)."""
    return as_tensor(albedo) * irradiance(normal, gamma)


def constant_light(level=1.0):
    """Band-0 only lighting that reproduces ``level * albedo`` on every normal."""
    g = np.zeros((3, N_BANDS))
    g[:, 0] = level / SH_C0
    return g.reshape(-1)


@dataclass(frozen=True)
class Camera:
    focal: float = 470.4
    cx: float = 112.0
    cy: float = 112.0
    width: int = 224
    height: int = 224
    near: float = 10.0
    far: float = 10000.0

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("camera focal length must be positive")
        if not self.near < self.far:
            raise ValueError("camera near plane must be in front of far plane")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")

    @property
    def size(self):
        return (self.height, self.width)

    def to_dict(self):
        return asdict(self)

    def resized(self, height, width):
        """Same field of view at a different resolution."""
        s = width / self.width
        return Camera(self.focal * s, self.cx * s, self.cy * height / self.height,
                      int(width), int(height), self.near, self.far)


def project(points, cam: Camera):
    """Pinhole projection of camera-frame points (+z forward, +y down).

    Returns ``(uv, depth)`` with uv in pixels.
    """
    p = as_tensor(points)
    z = p[..., 2]
    bad = torch.nonzero((z <= cam.near) | ~torch.isfinite(z)).flatten()
    if len(bad):
        raise ProjectionError(bad.tolist(), cam.near)
    u = cam.focal * p[..., 0] / z + cam.cx
    v = cam.focal * p[..., 1] / z + cam.cy
    return torch.stack([u, v], dim=-1), z


def project_landmarks(vertices, indices, cam: Camera):
    v = as_tensor(vertices)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= v.shape[0]):
        raise IndexError(f"landmark index out of range for {v.shape[0]} vertices")
    uv, _ = project(v[torch.as_tensor(idx)], cam)
    return uv
