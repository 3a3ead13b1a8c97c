"""Triangle mesh basics: OBJ I/O, normals, UV sampling, adjacency and
per-triangle deformation gradients.

Numeric routines are written against torch (float64) so they can sit inside
an autograd graph; they accept numpy arrays as well.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch

DTYPE = torch.float64


class MeshError(ValueError):
    pass


class ObjParseError(MeshError):
    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


def as_tensor(x, dtype=DTYPE):
    if isinstance(x, torch.Tensor):
        return x if x.dtype == dtype else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


@dataclass
class TriMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    uv: np.ndarray | None = None
    landmark_indices: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.uv is not None:
            self.uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
            if len(self.uv) != len(self.vertices):
                raise MeshError(
                    f"uv has {len(self.uv)} entries for {len(self.vertices)} vertices")
        if self.landmark_indices is not None:
            self.landmark_indices = np.asarray(self.landmark_indices, dtype=np.int64)
        n = len(self.vertices)
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise MeshError(f"triangle index out of range for {n} vertices")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def with_vertices(self, vertices):
        """Copy of this mesh with new vertex positions (same topology/UV)."""
        return TriMesh(np.asarray(vertices, dtype=np.float64), self.triangles,
                       self.uv, self.landmark_indices)

    def triangle_areas(self):
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


@dataclass
class UVMap:
    """Row-major texel grid of shape (height, width, channels)."""

    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise MeshError(f"UV map must be (H, W, C), got shape {data.shape}")
        self.data = data

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


# ---------------------------------------------------------------------------
# OBJ

def load_obj(path, require_uv=False):
    """Read an ASCII OBJ with ``v``/``vt``/``f`` records.

    Faces may be written ``f a b c`` or ``f a/ta b/tb c/tc`` (normals after a
    second slash are ignored). UVs are resolved per vertex; a vertex referenced
    with two different UVs is rejected since seams are not supported.
    """
    verts, texcoords, faces, face_uv = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(parts) < 4:
                        raise ValueError("vertex needs 3 coordinates")
                elif tag == "vt":
                    texcoords.append([float(x) for x in parts[1:3]])
                    if len(parts) < 3:
                        raise ValueError("texture coordinate needs 2 values")
                elif tag == "f":
                    if len(parts) != 4:
                        raise ValueError("only triangles are supported")
                    vi, ti = [], []
                    for tok in parts[1:]:
                        fields = tok.split("/")
                        vi.append(int(fields[0]))
                        ti.append(int(fields[1]) if len(fields) > 1 and fields[1] else None)
                    faces.append((vi, lineno))
                    face_uv.append(ti)
            except ValueError as exc:
                raise ObjParseError(path, lineno, str(exc)) from None

    n = len(verts)
    tris = np.zeros((len(faces), 3), dtype=np.int64)
    uv = np.full((n, 2), np.nan)
    for k, ((vi, lineno), ti) in enumerate(zip(faces, face_uv)):
        for j, (a, t) in enumerate(zip(vi, ti)):
            if a == 0 or abs(a) > n:
                raise ObjParseError(path, lineno, f"vertex index {a} out of range (1..{n})")
            a = a - 1 if a > 0 else n + a
            tris[k, j] = a
            if t is None:
                continue
            if t == 0 or abs(t) > len(texcoords):
                raise ObjParseError(path, lineno, f"texture index {t} out of range")
            t = t - 1 if t > 0 else len(texcoords) + t
            tc = texcoords[t]
            if np.isnan(uv[a, 0]):
                uv[a] = tc
            elif not np.allclose(uv[a], tc):
                raise ObjParseError(path, lineno, f"vertex {a + 1} has more than one UV")

    missing = np.isnan(uv[:, 0])
    if missing.any() and len(texcoords) == n:
        # vertices no face gives a UV (or "f a b c" files) pair vt k with v k
        uv[missing] = np.asarray(texcoords, dtype=np.float64)[missing]
        missing[:] = False
    have_uv = n > 0 and not missing.any()
    if not have_uv and require_uv:
        raise MeshError(f"{path}: missing UV for one or more vertices")
    return TriMesh(np.asarray(verts, dtype=np.float64).reshape(-1, 3), tris,
                   uv if have_uv else None)


def save_obj(path, mesh: TriMesh):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    lines = ["# facefit mesh"]
    lines += ["v %.9g %.9g %.9g" % tuple(p) for p in mesh.vertices]
    if mesh.uv is not None:
        lines += ["vt %.9g %.9g" % tuple(t) for t in mesh.uv]
        lines += ["f %d/%d %d/%d %d/%d" % (a + 1, a + 1, b + 1, b + 1, c + 1, c + 1)
                  for a, b, c in mesh.triangles]
    else:
        lines += ["f %d %d %d" % (a + 1, b + 1, c + 1) for a, b, c in mesh.triangles]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# geometry

def face_normals(vertices, triangles):
    """Unnormalized face normals; their length is twice the triangle area."""
    v = as_tensor(vertices)
    t = torch.as_tensor(np.asarray(triangles), dtype=torch.long)
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    return torch.linalg.cross(b - a, c - a, dim=-1)


def vertex_normals(vertices, triangles=None, eps=1e-12):
    """Area-weighted vertex normals of a TriMesh or of (vertices, triangles).

    Summing the raw cross products weights each face by its area. Vertices
    touched only by degenerate faces (or by none) get the zero vector.
    """
    if isinstance(vertices, TriMesh):
        vertices, triangles = vertices.vertices, vertices.triangles
    v = as_tensor(vertices)
    t = torch.as_tensor(np.asarray(triangles), dtype=torch.long)
    fn = face_normals(v, t)
    acc = torch.zeros_like(v)
    for j in range(3):
        acc = acc.index_add(0, t[:, j], fn)
    norm = torch.linalg.norm(acc, dim=-1, keepdim=True)
    safe = torch.where(norm > eps, norm, torch.ones_like(norm))
    return torch.where(norm > eps, acc / safe, torch.zeros_like(acc))


def _bilinear_taps(uv, height, width):
    uv = as_tensor(uv)
    x = uv[:, 0] * width - 0.5
    y = uv[:, 1] * height - 0.5
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    x0 = x0.long()
    y0 = y0.long()
    xs = (x0.clamp(0, width - 1), (x0 + 1).clamp(0, width - 1))
    ys = (y0.clamp(0, height - 1), (y0 + 1).clamp(0, height - 1))
    weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    index = (ys[0] * width + xs[0], ys[0] * width + xs[1],
             ys[1] * width + xs[0], ys[1] * width + xs[1])
    return index, weights


def uv_sample(uvmap, uv):
    """Bilinear lookup of a UV map at per-vertex (or per-pixel) UVs.

    ``uvmap`` is (H, W, C) or a stack (..., H, W, C); the result is (N, C) or
    (..., N, C). Texel (r, c) has its center at ((c + .5)/W, (r + .5)/H);
    lookups beyond the outer texel centers clamp to the edge.
    """
    if isinstance(uvmap, UVMap):
        uvmap = uvmap.data
    m = as_tensor(uvmap)
    if uv is None:
        raise MeshError("mesh has no UV coordinates")
    h, w, ch = m.shape[-3:]
    flat = m.reshape(*m.shape[:-3], h * w, ch)
    index, weights = _bilinear_taps(uv, h, w)
    out = 0
    for idx, wt in zip(index, weights):
        out = out + flat[..., idx, :] * wt
    return out


def uv_splat(values, uv, height, width):
    """Transpose of :func:`uv_sample`: scatter per-point values onto texels."""
    vals = as_tensor(values)
    ch = vals.shape[-1]
    index, weights = _bilinear_taps(uv, height, width)
    out = torch.zeros(height * width, ch, dtype=vals.dtype)
    for idx, wt in zip(index, weights):
        out = out.index_add(0, idx, vals * wt)
    return out.reshape(height, width, ch)


def laplacian_adjacency(mesh_or_triangles, n_vertices=None):
    """Neighbor sets from triangle edges (symmetric, no self loops)."""
    if isinstance(mesh_or_triangles, TriMesh):
        tris = mesh_or_triangles.triangles
        n_vertices = mesh_or_triangles.n_vertices
    else:
        tris = np.asarray(mesh_or_triangles, dtype=np.int64).reshape(-1, 3)
        if n_vertices is None:
            n_vertices = int(tris.max()) + 1 if tris.size else 0
    nbrs = [set() for _ in range(n_vertices)]
    for a, b, c in tris:
        for p, q in ((a, b), (b, c), (c, a)):
            if p != q:
                nbrs[p].add(int(q))
                nbrs[q].add(int(p))
    return [sorted(s) for s in nbrs]


def adjacency_edges(adjacency):
    """Directed edge list (v, u) for every u in N(v), as two index arrays."""
    src = [v for v, nb in enumerate(adjacency) for _ in nb]
    dst = [u for nb in adjacency for u in nb]
    return np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64)


def triangle_frames(vertices, triangles):
    """Per-triangle 3x3 frames [e1 e2 e3] (as columns).

    e1, e2 are edges from the first corner; e3 is the face normal scaled by
    1/sqrt(|e1 x e2|), i.e. the classic fourth-vertex construction. That
    scaling makes the frame of a uniformly scaled triangle scale uniformly.
    """
    v = as_tensor(vertices)
    t = torch.as_tensor(np.asarray(triangles), dtype=torch.long)
    a, b, c = v[..., t[:, 0], :], v[..., t[:, 1], :], v[..., t[:, 2], :]
    e1 = b - a
    e2 = c - a
    n = torch.linalg.cross(e1, e2, dim=-1)
    length = torch.linalg.norm(n, dim=-1, keepdim=True)
    e3 = n / torch.sqrt(length.clamp_min(1e-300))
    return torch.stack([e1, e2, e3], dim=-1)


def reference_frame_inverses(reference, triangles, tol=1e-12):
    frames = triangle_frames(reference, triangles)
    det = torch.linalg.det(frames)
    bad = torch.nonzero(det.abs() <= tol).flatten()
    if len(bad):
        raise MeshError(f"degenerate reference triangle {int(bad[0])} "
                        f"({len(bad)} degenerate in total)")
    return torch.linalg.inv(frames)


def deformation_gradients(reference, deformed, triangles=None, ref_inverse=None):
    """Per-triangle linear maps G with G @ frame(reference) = frame(deformed).

    Accepts two TriMesh objects or two vertex arrays plus ``triangles``.
    ``ref_inverse`` may pass precomputed inverse reference frames.
    """
    if isinstance(reference, TriMesh):
        triangles = reference.triangles if triangles is None else triangles
        reference = reference.vertices
    if isinstance(deformed, TriMesh):
        if triangles is not None and not np.array_equal(deformed.triangles, triangles):
            raise MeshError("reference and deformed meshes differ in topology")
        deformed = deformed.vertices
    if ref_inverse is None:
        ref_inverse = reference_frame_inverses(reference, triangles)
    return triangle_frames(deformed, triangles) @ ref_inverse
