"""Procedural toy head rig and synthetic scenes with known ground truth."""

from __future__ import annotations

import numpy as np
import torch

from .fitter import FrameObservation, TrackingParams, reconstruct
from .mesh import TriMesh, UVMap
from .model import ModelCorrections, TemplateFaceModel, texel_centers
from .shading import SH_C0, Camera

CLASS_NAMES = ["background", "skin", "brows", "eyes", "nose", "lips"]

# landmark layout in normalized face coordinates (x right, y down, [-1, 1])
_JAW = [(-0.85 + 1.7 * i / 16, 0.25 + 0.55 * (1 - ((i - 8) / 8) ** 2)) for i in range(17)]
_BROWS = [(-0.62 + 0.09 * i, -0.42 - 0.04 * np.sin(np.pi * i / 4)) for i in range(5)] + \
         [(0.26 + 0.09 * i, -0.42 - 0.04 * np.sin(np.pi * i / 4)) for i in range(5)]
_NOSE = [(0.0, -0.3 + 0.1 * i) for i in range(4)] + [(-0.14 + 0.07 * i, 0.14) for i in range(5)]
_EYES = [(cx + 0.12 * np.cos(a), -0.22 + 0.05 * np.sin(a))
         for cx in (-0.4, 0.4) for a in np.linspace(np.pi, 3 * np.pi, 6, endpoint=False)]
_MOUTH = [(0.3 * np.cos(a), 0.42 + 0.1 * np.sin(a)) for a in np.linspace(np.pi, 3 * np.pi, 12, endpoint=False)] + \
         [(0.16 * np.cos(a), 0.42 + 0.04 * np.sin(a)) for a in np.linspace(np.pi, 3 * np.pi, 8, endpoint=False)]
LANDMARK_LAYOUT = np.array(_JAW + _BROWS + _NOSE + _EYES + _MOUTH)
assert len(LANDMARK_LAYOUT) == 68


def _ellipse(su, sv, cx, cy, rx, ry):
    return ((su - cx) / rx) ** 2 + ((sv - cy) / ry) ** 2 <= 1.0


def _regions(su, sv):
    """Parse labels and validity on normalized coordinates."""
    labels = np.ones(su.shape, dtype=np.int64)
    valid = np.ones(su.shape)
    for cx in (-0.4, 0.4):
        labels[_ellipse(su, sv, cx, -0.42, 0.24, 0.07)] = 2
        eye = _ellipse(su, sv, cx, -0.22, 0.15, 0.08)
        labels[eye] = 3
        valid[eye] = 0.0
    labels[_ellipse(su, sv, 0.0, -0.05, 0.12, 0.25)] = 4
    labels[_ellipse(su, sv, 0.0, 0.42, 0.32, 0.12)] = 5
    valid[_ellipse(su, sv, 0.0, 0.42, 0.16, 0.03)] = 0.0
    return labels, valid


def _albedo(su, sv):
    base = np.array([0.72, 0.52, 0.42])
    pattern = (0.07 * np.sin(3.1 * np.pi * su + 0.4) * np.cos(2.3 * np.pi * sv)
               + 0.05 * np.sin(5.3 * np.pi * sv + 1.3 * su)
               + 0.04 * np.cos(7.1 * np.pi * (su + 0.3 * sv)))
    img = base[None, None] * (1.0 + pattern[..., None])
    labels, _ = _regions(su, sv)
    img[labels == 2] *= 0.45
    img[labels == 3] = [0.85, 0.85, 0.82]
    img[labels == 5] = img[labels == 5] * [1.1, 0.6, 0.6]
    return np.clip(img, 0.02, 0.98)


def make_toy_head(n_grid=22, resolution=64, n_blendshapes=12, seed=0, blur_sigma=1.0):
    """A front-facing ellipsoidal face patch with local bump blendshapes.

    Vertex UVs sit on texel centers whenever (resolution - 1) is a multiple
    of (n_grid - 1). The face looks toward -z, so it faces a camera at the
    origin when translated along +z.
    """
    rng = np.random.default_rng(seed)
    step = (resolution - 1) / (n_grid - 1)
    coords = (0.5 + step * np.arange(n_grid)) / resolution
    uu, vv = np.meshgrid(coords, coords)
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    su = (uv[:, 0] - 0.5) * 2.0
    sv = (uv[:, 1] - 0.5) * 2.0

    a, b, c = 80.0, 100.0, 80.0
    theta = su * np.deg2rad(70)
    phi = sv * np.deg2rad(60)
    x = a * np.sin(theta) * np.cos(phi)
    y = b * np.sin(phi)
    z = -c * np.cos(theta) * np.cos(phi)
    z = z - 22.0 * np.exp(-(su ** 2 + (sv + 0.02) ** 2) / 0.03)
    verts = np.stack([x, y, z], axis=1)

    tris = []
    for r in range(n_grid - 1):
        for col in range(n_grid - 1):
            i = r * n_grid + col
            tris.append((i, i + 1, i + n_grid))
            tris.append((i + 1, i + n_grid + 1, i + n_grid))
    tris = np.array(tris, dtype=np.int64)
    fn = np.cross(verts[tris[:, 1]] - verts[tris[:, 0]], verts[tris[:, 2]] - verts[tris[:, 0]])
    if fn[:, 2].mean() > 0:  # outward normals should face the camera (-z)
        tris = tris[:, [0, 2, 1]]

    used, landmarks = set(), []
    for p in LANDMARK_LAYOUT:
        order = np.argsort((su - p[0]) ** 2 + (sv - p[1]) ** 2, kind="stable")
        pick = next(int(i) for i in order if int(i) not in used)
        used.add(pick)
        landmarks.append(pick)

    shapes = []
    for _ in range(n_blendshapes):
        centre = rng.uniform(-0.6, 0.6, size=2)
        radius = rng.uniform(0.2, 0.35)
        direction = rng.normal(size=3)
        direction[2] = -abs(direction[2]) * 0.5
        direction *= rng.uniform(8.0, 14.0) / np.linalg.norm(direction)
        d2 = ((su - centre[0]) ** 2 + (sv - centre[1]) ** 2) / radius ** 2
        falloff = np.where(d2 < 6.25, np.exp(-0.5 * d2), 0.0)
        shapes.append(verts + falloff[:, None] * direction[None])
    shapes = np.array(shapes)

    tex = texel_centers(resolution)
    tu = ((tex[:, 0] - 0.5) * 2.0).reshape(resolution, resolution)
    tv = ((tex[:, 1] - 0.5) * 2.0).reshape(resolution, resolution)
    labels, valid = _regions(tu, tv)
    mesh = TriMesh(verts, tris, uv, np.array(landmarks))
    manifest = {"units": "mm", "resolution": resolution, "blur_sigma": blur_sigma,
                "threshold": 1e-3, "n_blendshapes": n_blendshapes,
                "n_classes": len(CLASS_NAMES), "class_names": CLASS_NAMES}
    return TemplateFaceModel(mesh, shapes, UVMap(_albedo(tu, tv)), labels, UVMap(valid),
                             len(CLASS_NAMES), manifest)


def sample_params(rng, n_blendshapes, active, max_angle_deg=20.0, base_depth=600.0):
    """Random tracking parameters: chosen blendshapes active, others off."""
    logits = np.full(n_blendshapes, -8.0)
    w = rng.uniform(0.25, 0.85, size=len(active))
    logits[list(active)] = np.log(w / (1 - w))
    euler = np.deg2rad(rng.uniform(-max_angle_deg, max_angle_deg, size=3))
    euler[2] *= 0.5
    translation = np.array([rng.normal(0, 8.0), rng.normal(0, 8.0),
                            base_depth + rng.normal(0, 15.0)])
    gamma = np.zeros((3, 9))
    level = rng.uniform(0.9, 1.1)
    shared = rng.normal(0.0, 0.25, size=9)
    shared[0] = 0.0
    gamma[:] = shared
    gamma[:, 0] = level / SH_C0
    gamma += rng.normal(0.0, 0.02, size=(3, 9))
    return TrackingParams(logits, euler, translation, gamma.reshape(-1))


def synthesize_frames(template, masks, params, cam: Camera, corrections=None, quantize=True):
    """Render frames (black background), landmarks and parse labels from known parameters."""
    frames = []
    for p in params:
        r = reconstruct(template, corrections, masks, p, cam, with_parse=True)
        img = np.clip(r["image"], 0.0, 1.0)
        if quantize:
            img = np.round(img * 255.0) / 255.0
        lm = r["landmarks"]
        inside = ((lm[:, 0] >= 0) & (lm[:, 0] < cam.width)
                  & (lm[:, 1] >= 0) & (lm[:, 1] < cam.height)).astype(np.float64)
        frames.append(FrameObservation(img, np.concatenate([lm, inside[:, None]], axis=1),
                                       r["parse"].argmax(axis=-1)))
    return frames


def synth_scene(template, masks, seed=0, n_frames=4, n_active=3, cam: Camera = None,
                corrections=None, quantize=True, max_angle_deg=20.0):
    """Frames plus ground-truth parameters for a seeded random scene."""
    cam = cam or Camera()
    rng = np.random.default_rng(seed)
    active = sorted(rng.choice(template.n_blendshapes, size=n_active, replace=False).tolist())
    params = [sample_params(rng, template.n_blendshapes, active, max_angle_deg)
              for _ in range(n_frames)]
    frames = synthesize_frames(template, masks, params, cam, corrections, quantize)
    return frames, params


def random_corrections(template, masks, seed=0, shape_scale=3.0, albedo_scale=0.03):
    """Smooth, nonzero ground-truth corrections for testing model refinement.

    Each blendshape gets a low-frequency UV displacement field (mm) and a
    small dynamic albedo change; the identity terms stay zero.
    """
    rng = np.random.default_rng(seed)
    res = masks.resolution
    tex = texel_centers(res)
    tu = ((tex[:, 0] - 0.5) * 2.0).reshape(res, res)
    tv = ((tex[:, 1] - 0.5) * 2.0).reshape(res, res)
    corr = ModelCorrections.zeros(template, res)
    d_shape = np.zeros((template.n_blendshapes, res, res, 3))
    d_albedo = np.zeros_like(d_shape)
    for i in range(template.n_blendshapes):
        fx, fy = rng.uniform(0.5, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        direction = rng.normal(size=3)
        field = np.cos(np.pi * fx * tu + phase[0]) * np.cos(np.pi * fy * tv + phase[1])
        d_shape[i] = shape_scale * field[..., None] * direction / np.linalg.norm(direction)
        d_albedo[i] = albedo_scale * np.sin(np.pi * (tu + tv) + phase[2])[..., None] \
            * rng.uniform(-1, 1, size=3)
    corr.d_shape = torch.as_tensor(d_shape)
    corr.d_albedo = torch.as_tensor(d_albedo)
    return corr
