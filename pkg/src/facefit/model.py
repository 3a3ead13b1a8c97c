"""Personalized face model: blendshape rig plus UV-space corrections.

Shape of a frame with expression weights w (w0 = 1 - sum w):

    S = w0 S0 + F(dS0) + sum_i w_i (S_i + F(A_i * dS_i))

Albedo:

    R = R0_trainable + dR0 + sum_i w_i A_i * dR_i

where F samples a UV map at the vertex UVs and A_i are fixed attention masks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from ._raster_kernel import rasterize_kernel
from .mesh import DTYPE, MeshError, TriMesh, UVMap, as_tensor, uv_sample

N_BLENDSHAPES = 56


@dataclass
class TemplateFaceModel:
    """Neutral mesh, absolute blendshapes (K, V, 3) and fixed UV maps.

    ``parse_labels`` is an integer (H, W) label image; label 0 is reserved for
    background in rendered parse maps. ``validity`` is 1 on skin and 0 on
    excluded regions (eyes, mouth interior).
    """

    s0: TriMesh
    blendshapes: np.ndarray
    r0: UVMap
    parse_labels: np.ndarray
    validity: UVMap
    n_classes: int
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.blendshapes = np.asarray(self.blendshapes, dtype=np.float64)
        if self.blendshapes.ndim != 3 or self.blendshapes.shape[1:] != self.s0.vertices.shape:
            raise MeshError("blendshapes must be (K, V, 3) with the topology of s0")
        if self.s0.uv is None:
            raise MeshError("template mesh needs per-vertex UVs")
        if self.s0.landmark_indices is None:
            raise MeshError("template mesh needs landmark indices")
        if self.r0.channels != 3:
            raise MeshError("mean albedo must have 3 channels")
        if self.r0.data.min() < 0 or self.r0.data.max() > 1:
            raise MeshError("mean albedo values must lie in [0, 1]")
        self.parse_labels = np.asarray(self.parse_labels, dtype=np.int64)
        if self.parse_labels.min() < 0 or self.parse_labels.max() >= self.n_classes:
            raise MeshError("parse labels outside [0, n_classes)")
        self._parse_onehot = None

    @property
    def n_blendshapes(self):
        return self.blendshapes.shape[0]

    @property
    def n_vertices(self):
        return self.s0.n_vertices

    @property
    def triangles(self):
        return self.s0.triangles

    @property
    def uv(self):
        return self.s0.uv

    @property
    def landmark_indices(self):
        return self.s0.landmark_indices

    @property
    def resolution(self):
        return int(self.manifest.get("resolution", self.r0.width))

    @property
    def threshold(self):
        return float(self.manifest.get("threshold", 1e-3))

    @property
    def blur_sigma(self):
        return float(self.manifest.get("blur_sigma", 1.0))

    @property
    def parse_onehot(self):
        """(H, W, n_classes) one-hot version of the UV parse map."""
        if self._parse_onehot is None:
            self._parse_onehot = np.eye(self.n_classes)[self.parse_labels]
        return self._parse_onehot

    def r0_at(self, resolution):
        """Mean albedo resampled to ``resolution`` x ``resolution`` texels."""
        if self.r0.height == resolution and self.r0.width == resolution:
            return self.r0.data.copy()
        return resample_map(self.r0.data, resolution)


def texel_centers(resolution):
    c = (np.arange(resolution) + 0.5) / resolution
    u, v = np.meshgrid(c, c)
    return np.stack([u.ravel(), v.ravel()], axis=1)


def resample_map(data, resolution):
    out = uv_sample(data, texel_centers(resolution))
    return out.numpy().reshape(resolution, resolution, -1)


# ---------------------------------------------------------------------------
# attention masks

@dataclass(frozen=True)
class AttentionMaskSet:
    masks: np.ndarray       # (K, R, R), blurred, in [0, 1]
    pre_blur: np.ndarray    # (K, R, R)
    vertex_weights: np.ndarray  # (K, V) thresholded, max-normalized distances
    blur_sigma: float
    threshold: float

    @property
    def resolution(self):
        return self.masks.shape[-1]

    def __len__(self):
        return self.masks.shape[0]


def splat_vertex_values(values, uv, triangles, resolution):
    """Rasterize the mesh in UV space, interpolating per-vertex values.

    Texels not covered by any UV triangle get 0.
    """
    values = np.asarray(values, dtype=np.float64)
    xy = np.asarray(uv, dtype=np.float64) * resolution
    tri_id, _, bary = rasterize_kernel(xy, np.ones(len(xy)), np.asarray(triangles, np.int64),
                                       resolution, resolution, True)
    covered = tri_id >= 0
    out = np.zeros(values.shape[:-1] + (resolution, resolution))
    corners = np.asarray(triangles)[tri_id[covered]]  # (P, 3)
    b = bary[covered]
    out[..., covered] = np.einsum("...pj,pj->...p", values[..., corners], b)
    return out


def compute_attention_masks(template: TemplateFaceModel, resolution=None, blur_sigma=None,
                            threshold=None):
    """Per-blendshape UV attention masks.

    Vertex displacement magnitudes ||S_i - S0|| below ``threshold`` are zeroed,
    the rest divided by their maximum, splatted to UV and Gaussian blurred.
    """
    resolution = int(resolution or template.resolution)
    if resolution < 8:
        raise ValueError("mask resolution must be at least 8")
    blur_sigma = template.blur_sigma if blur_sigma is None else float(blur_sigma)
    threshold = template.threshold if threshold is None else float(threshold)

    dist = np.linalg.norm(template.blendshapes - template.s0.vertices[None], axis=-1)
    dist[dist < threshold] = 0.0
    peak = dist.max(axis=1, keepdims=True)
    weights = np.divide(dist, peak, out=np.zeros_like(dist), where=peak > 0)
    pre = splat_vertex_values(weights, template.uv, template.triangles, resolution)
    if blur_sigma > 0:
        blurred = np.stack([ndimage.gaussian_filter(m, blur_sigma, mode="nearest") for m in pre])
    else:
        blurred = pre.copy()
    return AttentionMaskSet(np.clip(blurred, 0.0, 1.0), pre, weights, blur_sigma, threshold)


# ---------------------------------------------------------------------------
# corrections and coefficients

@dataclass
class ModelCorrections:
    """Learnable UV-space corrections (torch tensors, float64).

    d_shape_0, d_albedo_0, r0_trainable: (R, R, 3); d_shape, d_albedo: (K, R, R, 3).
    """

    d_shape_0: torch.Tensor
    d_shape: torch.Tensor
    d_albedo_0: torch.Tensor
    d_albedo: torch.Tensor
    r0_trainable: torch.Tensor

    FIELDS = ("d_shape_0", "d_shape", "d_albedo_0", "d_albedo", "r0_trainable")

    def __post_init__(self):
        for name in self.FIELDS:
            setattr(self, name, as_tensor(getattr(self, name)))
        r = self.d_shape_0.shape[0]
        k = self.d_shape.shape[0]
        expected = {"d_shape_0": (r, r, 3), "d_shape": (k, r, r, 3), "d_albedo_0": (r, r, 3),
                    "d_albedo": (k, r, r, 3), "r0_trainable": (r, r, 3)}
        for name, shape in expected.items():
            if tuple(getattr(self, name).shape) != shape:
                raise MeshError(f"{name} has shape {tuple(getattr(self, name).shape)}, "
                                f"expected {shape}")

    @classmethod
    def zeros(cls, template: TemplateFaceModel, resolution=None):
        r = int(resolution or template.resolution)
        k = template.n_blendshapes
        z3 = torch.zeros(r, r, 3, dtype=DTYPE)
        zk = torch.zeros(k, r, r, 3, dtype=DTYPE)
        return cls(z3, zk, z3.clone(), zk.clone(), as_tensor(template.r0_at(r)))

    @property
    def resolution(self):
        return self.d_shape_0.shape[0]

    @property
    def n_blendshapes(self):
        return self.d_shape.shape[0]

    def tensors(self):
        return [getattr(self, n) for n in self.FIELDS]

    def as_dict(self):
        return {n: getattr(self, n) for n in self.FIELDS}

    def clone(self):
        return ModelCorrections(*[t.detach().clone() for t in self.tensors()])


@dataclass
class ExpressionCoeffs:
    logits: torch.Tensor
    w: torch.Tensor
    w0: torch.Tensor


def coeffs_from_logits(logits):
    """w = sigmoid(logits); w0 = 1 - sum(w), left unclamped."""
    logits = as_tensor(logits)
    w = torch.sigmoid(logits)
    return ExpressionCoeffs(logits, w, 1.0 - w.sum(dim=-1))


def _check_compatible(template, corrections, masks):
    k = template.n_blendshapes
    if corrections.n_blendshapes != k or len(masks) != k:
        raise MeshError(f"blendshape count mismatch: template {k}, corrections "
                        f"{corrections.n_blendshapes}, masks {len(masks)}")
    if masks.resolution != corrections.resolution:
        raise MeshError(f"mask resolution {masks.resolution} != correction resolution "
                        f"{corrections.resolution}")


def masked_shape_corrections(corrections: ModelCorrections, masks: AttentionMaskSet):
    return as_tensor(masks.masks)[..., None] * corrections.d_shape


def corrected_blendshapes(template, corrections, masks):
    """S_i + F(A_i * dS_i) for every i, shape (K, V, 3)."""
    _check_compatible(template, corrections, masks)
    offsets = uv_sample(masked_shape_corrections(corrections, masks), template.uv)
    return as_tensor(template.blendshapes) + offsets


def identity_offset(template, corrections):
    """F(dS0), shape (V, 3)."""
    return uv_sample(corrections.d_shape_0, template.uv)


def assemble_shape(template, corrections, masks, coeffs, *, corrected=None, offset=None):
    """Vertex positions of the corrected rig for one or more coefficient sets.

    ``coeffs`` may be an ExpressionCoeffs or a weight vector ``w`` (length K);
    batched weights (B, K) give (B, V, 3). ``corrected``/``offset`` accept
    precomputed :func:`corrected_blendshapes` / :func:`identity_offset`.
    """
    w = coeffs.w if isinstance(coeffs, ExpressionCoeffs) else as_tensor(coeffs)
    if w.shape[-1] != template.n_blendshapes:
        raise MeshError(f"{w.shape[-1]} coefficients for {template.n_blendshapes} blendshapes")
    if corrected is None:
        corrected = corrected_blendshapes(template, corrections, masks)
    if offset is None:
        offset = identity_offset(template, corrections)
    w0 = 1.0 - w.sum(dim=-1)
    s0 = as_tensor(template.s0.vertices)
    blend = torch.einsum("...k,kvc->...vc", w, corrected)
    return w0[..., None, None] * s0 + offset + blend


def assemble_albedo(template, corrections, masks, coeffs):
    """Unclamped (R, R, 3) albedo map for the given expression weights."""
    _check_compatible(template, corrections, masks)
    w = coeffs.w if isinstance(coeffs, ExpressionCoeffs) else as_tensor(coeffs)
    a = as_tensor(masks.masks)
    dyn = torch.einsum("...k,khw,khwc->...hwc", w, a, corrections.d_albedo)
    return corrections.r0_trainable + corrections.d_albedo_0 + dyn


# ---------------------------------------------------------------------------
# pose

def euler_to_matrix(euler):
    """R = Rz(rz) @ Ry(ry) @ Rx(rx) for euler = (rx, ry, rz) in radians."""
    e = as_tensor(euler)
    rx, ry, rz = e[..., 0], e[..., 1], e[..., 2]
    one, zero = torch.ones_like(rx), torch.zeros_like(rx)
    cx, sx = torch.cos(rx), torch.sin(rx)
    cy, sy = torch.cos(ry), torch.sin(ry)
    cz, sz = torch.cos(rz), torch.sin(rz)
    mx = torch.stack([one, zero, zero, zero, cx, -sx, zero, sx, cx], -1).reshape(*e.shape[:-1], 3, 3)
    my = torch.stack([cy, zero, sy, zero, one, zero, -sy, zero, cy], -1).reshape(*e.shape[:-1], 3, 3)
    mz = torch.stack([cz, -sz, zero, sz, cz, zero, zero, zero, one], -1).reshape(*e.shape[:-1], 3, 3)
    return mz @ my @ mx


def apply_pose(vertices, euler, translation):
    """Rigid transform R @ v + t applied to every vertex."""
    v = as_tensor(vertices)
    rot = euler_to_matrix(euler)
    return v @ rot.transpose(-1, -2) + as_tensor(translation)[..., None, :]


def matrix_to_euler(rot):
    """Inverse of :func:`euler_to_matrix` (away from gimbal lock)."""
    r = np.asarray(rot, dtype=np.float64)
    ry = np.arcsin(np.clip(-r[2, 0], -1.0, 1.0))
    rx = np.arctan2(r[2, 1], r[2, 2])
    rz = np.arctan2(r[1, 0], r[0, 0])
    return np.array([rx, ry, rz])


def rotation_angle_between(euler_a, euler_b):
    """Geodesic angle (radians) between two Euler-angle rotations."""
    ra = euler_to_matrix(euler_a).numpy()
    rb = euler_to_matrix(euler_b).numpy()
    c = (np.trace(ra.T @ rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))
