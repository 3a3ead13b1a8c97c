"""Deterministic software renderer with an autograd adjoint.

Visibility (which triangle covers which pixel) comes from the z-buffer kernel
and is treated as constant. Barycentrics are then recomputed in torch from the
projected vertices, so gradients flow into geometry through pixel interiors
only; silhouette motion contributes nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ._raster_kernel import rasterize_kernel
from .mesh import as_tensor, uv_sample, vertex_normals
from .shading import Camera, gamma_matrix, irradiance, project


@dataclass
class RenderOutput:
    tri_id: np.ndarray               # (H, W) int, -1 = background
    bary: np.ndarray                 # (H, W, 3) attribute weights
    depth: np.ndarray                # (H, W), inf on background
    coverage: np.ndarray             # (H, W) in {0, 1}
    color: torch.Tensor | None = None    # (H, W, 3)
    mask: torch.Tensor | None = None     # (H, W) coverage * validity
    inputs: dict = field(default_factory=dict, repr=False)

    @property
    def size(self):
        return self.tri_id.shape

    def image(self):
        """Color as a detached numpy array."""
        return self.color.detach().numpy()


@dataclass
class Fragments:
    """Covered pixels of one rasterization, with differentiable barycentrics."""

    height: int
    width: int
    pixels: torch.Tensor     # (P,) flat pixel index
    corners: torch.Tensor    # (P, 3) vertex indices
    bary: torch.Tensor       # (P, 3) perspective-correct weights
    screen_bary: torch.Tensor
    tri_id: np.ndarray
    depth: np.ndarray

    def interpolate(self, attr):
        """Barycentric interpolation of a per-vertex attribute (V, C) -> (P, C)."""
        a = as_tensor(attr)
        return (a[self.corners] * self.bary[..., None]).sum(dim=1)

    def scatter(self, values, background=0.0):
        """Place per-fragment values (P, C) into an (H, W, C) image."""
        v = as_tensor(values)
        img = torch.full((self.height * self.width, v.shape[-1]), float(background),
                         dtype=v.dtype)
        img = img.index_copy(0, self.pixels, v)
        return img.reshape(self.height, self.width, -1)

    def coverage(self):
        return (self.tri_id >= 0).astype(np.float64)


def rasterize(verts2d, depth, triangles, imgsize, inclusive=False):
    """Z-buffered visibility at pixel centers.

    ``verts2d`` are pixel coordinates, ``depth`` positive camera depth per
    vertex (or None for flat splatting). Returns a RenderOutput without color.
    """
    xy = np.ascontiguousarray(np.asarray(as_tensor(verts2d).detach(), dtype=np.float64))
    tris = np.ascontiguousarray(np.asarray(triangles, dtype=np.int64).reshape(-1, 3))
    h, w = imgsize
    if depth is None:
        inv_z = np.ones(len(xy))
    else:
        inv_z = 1.0 / np.asarray(as_tensor(depth).detach(), dtype=np.float64)
    tri_id, zbuf, screen = rasterize_kernel(xy, inv_z, tris, int(h), int(w), bool(inclusive))
    covered = tri_id >= 0
    bary = np.zeros_like(screen)
    depth_img = np.full((h, w), np.inf)
    if covered.any():
        corners = tris[tri_id[covered]]
        pb = screen[covered] * inv_z[corners]
        denom = pb.sum(axis=1, keepdims=True)
        bary[covered] = pb / denom
        depth_img[covered] = 1.0 / zbuf[covered]
    return RenderOutput(tri_id, bary, depth_img, covered.astype(np.float64))


def fragments_from_projection(uv2d, depth, triangles, height, width):
    """Rasterize projected vertices and rebuild barycentrics inside autograd."""
    tris = np.asarray(triangles, dtype=np.int64)
    sk = rasterize(uv2d, depth, tris, (height, width))
    flat = sk.tri_id.reshape(-1)
    pix = np.nonzero(flat >= 0)[0]
    pixels = torch.as_tensor(pix, dtype=torch.long)
    corners = torch.as_tensor(tris[flat[pix]], dtype=torch.long)

    px = torch.as_tensor(pix % width, dtype=uv2d.dtype) + 0.5
    py = torch.as_tensor(pix // width, dtype=uv2d.dtype) + 0.5
    a, b, c = uv2d[corners[:, 0]], uv2d[corners[:, 1]], uv2d[corners[:, 2]]
    w0 = (c[:, 0] - b[:, 0]) * (py - b[:, 1]) - (c[:, 1] - b[:, 1]) * (px - b[:, 0])
    w1 = (a[:, 0] - c[:, 0]) * (py - c[:, 1]) - (a[:, 1] - c[:, 1]) * (px - c[:, 0])
    w2 = (b[:, 0] - a[:, 0]) * (py - a[:, 1]) - (b[:, 1] - a[:, 1]) * (px - a[:, 0])
    screen = torch.stack([w0, w1, w2], dim=1) / (w0 + w1 + w2)[:, None]
    persp = screen / depth[corners]
    bary = persp / persp.sum(dim=1, keepdim=True)
    return Fragments(height, width, pixels, corners, bary, screen, sk.tri_id, sk.depth)


def rasterize_shape(shape, cam: Camera, triangles):
    """Project camera-frame vertices and rasterize them."""
    uv2d, z = project(shape, cam)
    return fragments_from_projection(uv2d, z, triangles, cam.height, cam.width)


def _leaf(x):
    if isinstance(x, torch.Tensor):
        return x
    return as_tensor(x).clone().requires_grad_(True)


def shade_fragments(fragments, normals, albedo, gamma, template):
    """Per-fragment radiance (P, 3), validity (P,) and UV (P, 2)."""
    pix_uv = fragments.interpolate(as_tensor(template.uv))
    n = fragments.interpolate(normals)
    n = n / torch.linalg.norm(n, dim=1, keepdim=True).clamp_min(1e-12)
    rho = uv_sample(albedo, pix_uv).clamp(0.0, 1.0)
    radiance = rho * irradiance(n, gamma)
    validity = uv_sample(template.validity.data, pix_uv.detach())[:, 0]
    return radiance, validity, pix_uv


def render_face(shape, normals, albedo, gamma, cam: Camera, template, fragments=None):
    """Shade the posed mesh with SH lighting.

    ``shape`` holds camera-frame vertex positions. When ``normals`` is None
    they are derived from ``shape`` so vertex gradients include the normal
    path. Numpy inputs become leaf tensors so :func:`backward` can report
    gradients for them.
    """
    shape = _leaf(shape)
    albedo = _leaf(albedo)
    gamma = _leaf(gamma)
    gamma_matrix(gamma)  # validates length
    if normals is None:
        normals = vertex_normals(shape, template.triangles)
    else:
        normals = as_tensor(normals)
    if fragments is None:
        fragments = rasterize_shape(shape, cam, template.triangles)
    radiance, validity, _ = shade_fragments(fragments, normals, albedo, gamma, template)
    return RenderOutput(
        tri_id=fragments.tri_id,
        bary=_bary_image(fragments),
        depth=fragments.depth,
        coverage=fragments.coverage(),
        color=fragments.scatter(radiance),
        mask=fragments.scatter(validity[:, None])[..., 0],
        inputs={"vertices": shape, "albedo": albedo, "gamma": gamma},
    )


def _bary_image(fragments):
    img = np.zeros((fragments.height * fragments.width, 3))
    img[fragments.pixels.numpy()] = fragments.bary.detach().numpy()
    return img.reshape(fragments.height, fragments.width, 3)


def parse_fragments(fragments, template, pix_uv=None):
    """Soft one-hot parse labels (P, n_classes) of the covered pixels."""
    if getattr(template, "parse_labels", None) is None:
        raise ValueError("template has no UV parse map")
    if pix_uv is None:
        pix_uv = fragments.interpolate(as_tensor(template.uv))
    return uv_sample(template.parse_onehot, pix_uv)


def render_parse(shape, cam: Camera, template, fragments=None):
    """Soft one-hot parse image (H, W, n_classes); background is class 0."""
    if getattr(template, "parse_labels", None) is None:
        raise ValueError("template has no UV parse map")
    if fragments is None:
        fragments = rasterize_shape(as_tensor(shape), cam, template.triangles)
    probs = parse_fragments(fragments, template)
    bg = torch.zeros(template.n_classes, dtype=probs.dtype)
    bg[0] = 1.0
    img = bg.repeat(fragments.height * fragments.width, 1)
    img = img.index_copy(0, fragments.pixels, probs)
    return img.reshape(fragments.height, fragments.width, template.n_classes)


def backward(render: RenderOutput, upstream):
    """Vector-Jacobian product of the rendered color with ``upstream``.

    Returns gradients (numpy) for the vertices, albedo texels and SH
    coefficients that produced ``render``.
    """
    up = as_tensor(upstream)
    if render.color is None:
        raise ValueError("render has no color output")
    if tuple(up.shape) != tuple(render.color.shape):
        raise ValueError(f"upstream shape {tuple(up.shape)} does not match image "
                         f"{tuple(render.color.shape)}")
    names = [k for k, v in render.inputs.items() if v.requires_grad]
    grads = {k: np.zeros(tuple(v.shape)) for k, v in render.inputs.items()}
    if not names or not render.color.requires_grad:
        return grads
    out = torch.autograd.grad(render.color, [render.inputs[k] for k in names], up,
                              retain_graph=True, allow_unused=True)
    for k, g in zip(names, out):
        if g is not None:
            grads[k] = g.detach().numpy()
    return grads
