"""On-disk formats: PNG images, float grids, template and corrections
containers, scene bundles, tracking parameters, loss traces and configs."""

from __future__ import annotations

import configparser
import csv
import json
import os
import struct
from dataclasses import dataclass, fields

import cv2
import numpy as np
import torch
from PIL import Image

from .fitter import FitConfig, FrameObservation, TrackingParams
from .losses import LossWeights
from .mesh import TriMesh, UVMap, load_obj, save_obj
from .model import DTYPE, AttentionMaskSet, ModelCorrections, TemplateFaceModel
from .shading import Camera

GRID_MAGIC = b"FFG1"
_GRID_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """A file exists but does not follow its expected schema."""


def _require(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing file: {path}")
    return path


# ---------------------------------------------------------------------------
# images


def write_png(path, image, bits=8):
    """Write a float image in [0, 1] ((H, W) or (H, W, 3)) as 8- or 16-bit PNG."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    img = np.asarray(image, dtype=np.float64)
    top = 255 if bits == 8 else 65535
    q = np.round(np.clip(img, 0.0, 1.0) * top).astype(np.uint8 if bits == 8 else np.uint16)
    if q.ndim == 3:
        q = cv2.cvtColor(q, cv2.COLOR_RGB2BGR)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if not cv2.imwrite(str(path), q):
        raise OSError(f"could not write {path}")


def read_png(path):
    """Read an 8/16-bit gray or RGB PNG as float64 in [0, 1]."""
    raw = cv2.imread(str(_require(path)), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"{path}: not a readable image")
    top = 65535.0 if raw.dtype == np.uint16 else 255.0
    if raw.ndim == 3:
        if raw.shape[2] == 4:
            raw = raw[..., :3]
        raw = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    return raw.astype(np.float64) / top


def default_palette(n):
    rng = np.random.default_rng(12345)
    pal = rng.integers(40, 256, size=(max(n, 1), 3))
    pal[0] = 0
    return pal.astype(np.uint8)


def write_indexed_png(path, labels, palette=None):
    """Label image as a paletted PNG (values are the label indices)."""
    lab = np.asarray(labels)
    if lab.min() < 0 or lab.max() > 255:
        raise ValueError("indexed PNG labels must be in [0, 255]")
    pal = default_palette(int(lab.max()) + 1) if palette is None else np.asarray(palette)
    img = Image.fromarray(lab.astype(np.uint8), mode="P")
    img.putpalette(pal.astype(np.uint8).reshape(-1).tolist())
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    img.save(path)


def read_indexed_png(path):
    img = Image.open(_require(path))
    if img.mode not in ("P", "L"):
        raise FormatError(f"{path}: expected an indexed (palette) PNG, got mode {img.mode}")
    return np.array(img).astype(np.int64)


# ---------------------------------------------------------------------------
# float grids


def write_grid(path, data):
    """(H, W) or (H, W, C) array as a little-endian float32 grid."""
    a = np.asarray(data.detach() if isinstance(data, torch.Tensor) else data)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3:
        raise ValueError(f"grid must be 2D or 3D, got shape {a.shape}")
    h, w, c = a.shape
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_GRID_HEADER.pack(GRID_MAGIC, w, h, c))
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_grid(path):
    """Returns a float64 (H, W, C) array."""
    with open(_require(path), "rb") as fh:
        head = fh.read(_GRID_HEADER.size)
        if len(head) < _GRID_HEADER.size:
            raise FormatError(f"{path}: truncated grid header")
        magic, w, h, c = _GRID_HEADER.unpack(head)
        if magic != GRID_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {GRID_MAGIC!r}")
        body = fh.read()
    if len(body) != 4 * w * h * c:
        raise FormatError(f"{path}: expected {w}x{h}x{c} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w, c).astype(np.float64)


# ---------------------------------------------------------------------------
# template container


def _bs_name(i):
    return f"SS_{i + 1:02d}.obj"


def save_template(directory, template: TemplateFaceModel):
    os.makedirs(os.path.join(directory, "bs"), exist_ok=True)
    manifest = dict(template.manifest)
    manifest.update({"resolution": template.resolution, "blur_sigma": template.blur_sigma,
                     "threshold": template.threshold, "n_blendshapes": template.n_blendshapes,
                     "n_classes": template.n_classes})
    manifest.setdefault("units", "mm")
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    save_obj(os.path.join(directory, "s0.obj"), template.s0)
    for i, bs in enumerate(template.blendshapes):
        save_obj(os.path.join(directory, "bs", _bs_name(i)),
                 TriMesh(bs, template.triangles, template.uv))
    write_png(os.path.join(directory, "r0.png"), template.r0.data, bits=16)
    write_indexed_png(os.path.join(directory, "parse_T.png"), template.parse_labels,
                      default_palette(template.n_classes))
    write_png(os.path.join(directory, "validity.png"), template.validity.data[..., 0])
    with open(os.path.join(directory, "landmarks.json"), "w") as fh:
        json.dump([int(i) for i in template.landmark_indices], fh)


def load_template(directory) -> TemplateFaceModel:
    """Read a template container directory."""
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"template directory not found: {directory}")
    with open(_require(os.path.join(directory, "manifest.json"))) as fh:
        manifest = json.load(fh)
    for key in ("resolution", "blur_sigma", "threshold"):
        if key not in manifest:
            raise FormatError(f"{directory}/manifest.json lacks '{key}'")
    with open(_require(os.path.join(directory, "landmarks.json"))) as fh:
        landmarks = json.load(fh)
    if not (isinstance(landmarks, list) and all(isinstance(i, int) for i in landmarks)):
        raise FormatError(f"{directory}/landmarks.json must be a JSON array of integers")
    s0 = load_obj(os.path.join(directory, "s0.obj"), require_uv=True)
    if max(landmarks, default=0) >= s0.n_vertices or min(landmarks, default=0) < 0:
        raise FormatError(f"{directory}/landmarks.json has indices outside the mesh")
    bs_dir = os.path.join(directory, "bs")
    names = sorted(n for n in os.listdir(_require(bs_dir)) if n.endswith(".obj"))
    expected = [_bs_name(i) for i in range(len(names))]
    if names != expected:
        raise FormatError(f"{bs_dir}: blendshapes must be named SS_01.obj..; found {names[:5]}")
    if "n_blendshapes" in manifest and manifest["n_blendshapes"] != len(names):
        raise FormatError(f"{directory}: manifest lists {manifest['n_blendshapes']} "
                          f"blendshapes, bs/ holds {len(names)}")
    shapes = []
    for n in names:
        m = load_obj(os.path.join(bs_dir, n))
        if m.vertices.shape != s0.vertices.shape or not np.array_equal(m.triangles, s0.triangles):
            raise FormatError(f"{bs_dir}/{n}: topology differs from s0.obj")
        shapes.append(m.vertices)
    r0 = read_png(os.path.join(directory, "r0.png"))
    if r0.ndim != 3:
        raise FormatError(f"{directory}/r0.png must be RGB")
    labels = read_indexed_png(os.path.join(directory, "parse_T.png"))
    validity = read_png(os.path.join(directory, "validity.png"))
    if validity.ndim == 3:
        validity = validity[..., 0]
    n_classes = int(manifest.get("n_classes", labels.max() + 1))
    mesh = TriMesh(s0.vertices, s0.triangles, s0.uv, np.asarray(landmarks, dtype=np.int64))
    return TemplateFaceModel(mesh, np.array(shapes).reshape(len(shapes), -1, 3), UVMap(r0),
                             labels, UVMap(validity[..., None]), n_classes, manifest)


# ---------------------------------------------------------------------------
# corrections and masks


def save_corrections(directory, corrections: ModelCorrections):
    for name in ModelCorrections.FIELDS:
        t = getattr(corrections, name).detach()
        if t.ndim == 3:
            write_grid(os.path.join(directory, f"{name}.f32"), t.numpy())
        else:
            for i, grid in enumerate(t.numpy()):
                write_grid(os.path.join(directory, name, f"{i + 1:02d}.f32"), grid)


def load_corrections(directory) -> ModelCorrections:
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"corrections directory not found: {directory}")
    out = {}
    for name in ModelCorrections.FIELDS:
        single = os.path.join(directory, f"{name}.f32")
        if os.path.exists(single):
            out[name] = read_grid(single)
        else:
            sub = os.path.join(directory, name)
            files = sorted(f for f in os.listdir(_require(sub)) if f.endswith(".f32"))
            out[name] = np.stack([read_grid(os.path.join(sub, f)) for f in files])
    return ModelCorrections(**{k: torch.as_tensor(v, dtype=DTYPE) for k, v in out.items()})


def round_corrections(corrections: ModelCorrections) -> ModelCorrections:
    """The corrections as they read back after a save (float32 precision)."""
    return ModelCorrections(**{n: getattr(corrections, n).detach().float().double()
                               for n in ModelCorrections.FIELDS})


def save_model(directory, template, corrections):
    """Model container: the template files plus a corrections/ subdirectory."""
    save_template(directory, template)
    save_corrections(os.path.join(directory, "corrections"), corrections)


def load_model(directory):
    """Returns ``(template, corrections or None)``."""
    template = load_template(directory)
    sub = os.path.join(directory, "corrections")
    return template, (load_corrections(sub) if os.path.isdir(sub) else None)


def save_masks(directory, masks: AttentionMaskSet):
    os.makedirs(directory, exist_ok=True)
    for i, m in enumerate(masks.masks):
        write_png(os.path.join(directory, f"mask_{i + 1:02d}.png"), m, bits=16)
        write_grid(os.path.join(directory, f"mask_{i + 1:02d}.f32"), m)
    with open(os.path.join(directory, "masks.json"), "w") as fh:
        json.dump({"count": len(masks), "resolution": masks.resolution,
                   "blur_sigma": masks.blur_sigma, "threshold": masks.threshold}, fh, indent=2)


# ---------------------------------------------------------------------------
# parameters, traces, config


def save_params(path, params):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        for p in params:
            fh.write(p.to_json() + "\n")


def load_params(path):
    out = []
    with open(_require(path)) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(TrackingParams.from_json(line))
            except (ValueError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return out


def save_trace(path, trace):
    """Loss trace as CSV, one row per optimizer step."""
    rows = [b.to_dict() for b in trace]
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + keys)
        for i, r in enumerate(rows):
            w.writerow([i] + [repr(r[k]) if k in r else "" for k in keys])


def load_trace(path):
    with open(_require(path), newline="") as fh:
        return [{k: float(v) for k, v in row.items() if v != ""} for row in csv.DictReader(fh)]


_FIT_KEYS = ("stage1_steps", "stage2_steps", "warmup_steps", "track_steps", "n_frames", "seed")
_FIT_FLOATS = ("lr1", "lr2", "beta1", "beta2", "eps", "init_logit", "lr_decay")


def load_config(path):
    """INI config with optional [camera], [weights] and [fit] sections.

    Returns ``(camera, fit_config)``; missing keys keep their defaults.
    """
    cp = configparser.ConfigParser()
    try:
        read = cp.read(_require(path))
    except configparser.Error as exc:
        raise FormatError(f"{path}: {exc}") from None
    if not read:
        raise FormatError(f"{path}: could not parse")
    unknown = set(cp.sections()) - {"camera", "weights", "fit", "lr_scale"}
    if unknown:
        raise FormatError(f"{path}: unknown sections {sorted(unknown)}")

    def section(name, allowed, cast):
        if not cp.has_section(name):
            return {}
        out = {}
        for k, v in cp.items(name):
            if k not in allowed:
                raise FormatError(f"{path}: [{name}] has unknown key '{k}' "
                                  f"(allowed: {', '.join(sorted(allowed))})")
            try:
                out[k] = cast(k, v)
            except ValueError:
                raise FormatError(f"{path}: [{name}] {k} = {v!r} is not a number") from None
        return out

    cam_fields = {f.name: f.type for f in fields(Camera)}
    cam = section("camera", set(cam_fields),
                  lambda k, v: int(v) if k in ("width", "height") else float(v))
    weights = section("weights", {f.name for f in fields(LossWeights)}, lambda k, v: float(v))
    fit = section("fit", set(_FIT_KEYS + _FIT_FLOATS), lambda k, v: int(v) if k in _FIT_KEYS else float(v))
    scale = section("lr_scale", set(FitConfig().lr_scale), lambda k, v: float(v))
    try:
        camera = Camera(**cam)
        config = FitConfig(weights=LossWeights(**weights), lr_scale=scale, **fit)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    return camera, config


def write_config(path, camera: Camera, config: FitConfig):
    cp = configparser.ConfigParser()
    cp["camera"] = {k: repr(v) for k, v in camera.to_dict().items()}
    cp["weights"] = {f.name: repr(getattr(config.weights, f.name)) for f in fields(LossWeights)}
    cp["fit"] = {k: repr(getattr(config, k)) for k in _FIT_KEYS + _FIT_FLOATS}
    cp["lr_scale"] = {k: repr(v) for k, v in config.lr_scale.items()}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        cp.write(fh)


def write_camera(path, camera: Camera):
    cp = configparser.ConfigParser()
    cp["camera"] = {k: repr(v) for k, v in camera.to_dict().items()}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        cp.write(fh)


def load_camera(path):
    return load_config(path)[0]


# ---------------------------------------------------------------------------
# scene bundles


@dataclass
class SceneBundle:
    frames: list
    camera: Camera
    gt_params: list | None = None
    gt_corrections: ModelCorrections | None = None
    class_names: list | None = None

    def __len__(self):
        return len(self.frames)


def save_scene(directory, scene: SceneBundle):
    write_camera(os.path.join(directory, "camera.cfg"), scene.camera)
    n_classes = max(int(f.parse.max()) for f in scene.frames) + 1
    if scene.class_names:
        n_classes = max(n_classes, len(scene.class_names))
    palette = default_palette(n_classes)
    for i, f in enumerate(scene.frames):
        write_png(os.path.join(directory, "frames", f"{i:04d}.png"), f.image)
        with open(_mkparent(os.path.join(directory, "landmarks", f"{i:04d}.json")), "w") as fh:
            json.dump([[float(u), float(v), int(ok > 0.5)] for u, v, ok in f.landmarks], fh)
        write_indexed_png(os.path.join(directory, "parse", f"{i:04d}.png"), f.parse, palette)
    with open(os.path.join(directory, "parse_palette.json"), "w") as fh:
        json.dump({"classes": scene.class_names or [str(i) for i in range(n_classes)],
                   "palette": palette.tolist()}, fh, indent=2)
    if scene.gt_params is not None:
        save_params(os.path.join(directory, "gt_params.jsonl"), scene.gt_params)
    if scene.gt_corrections is not None:
        save_corrections(os.path.join(directory, "gt_corrections"), scene.gt_corrections)


def _mkparent(path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return path


def _listing(directory, ext):
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"missing directory: {directory}")
    return sorted(f for f in os.listdir(directory) if f.endswith(ext))


def load_scene(directory) -> SceneBundle:
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"scene directory not found: {directory}")
    camera = load_camera(os.path.join(directory, "camera.cfg"))
    imgs = _listing(os.path.join(directory, "frames"), ".png")
    lms = _listing(os.path.join(directory, "landmarks"), ".json")
    parses = _listing(os.path.join(directory, "parse"), ".png")
    stems = [os.path.splitext(n)[0] for n in imgs]
    if ([os.path.splitext(n)[0] for n in lms] != stems
            or [os.path.splitext(n)[0] for n in parses] != stems):
        raise FormatError(f"{directory}: frames/, landmarks/ and parse/ must hold the same "
                          f"frame names ({len(imgs)}, {len(lms)}, {len(parses)} files)")
    if not imgs:
        raise FormatError(f"{directory}: no frames")
    frames = []
    for stem in stems:
        img = read_png(os.path.join(directory, "frames", stem + ".png"))
        if img.ndim != 3:
            raise FormatError(f"{directory}/frames/{stem}.png must be RGB")
        if img.shape[:2] != camera.size:
            raise FormatError(f"{directory}/frames/{stem}.png is {img.shape[1]}x{img.shape[0]}, "
                              f"camera.cfg says {camera.width}x{camera.height}")
        with open(os.path.join(directory, "landmarks", stem + ".json")) as fh:
            lm = np.asarray(json.load(fh), dtype=np.float64)
        if lm.ndim != 2 or lm.shape[1] not in (2, 3):
            raise FormatError(f"{directory}/landmarks/{stem}.json must be a list of [u, v, valid]")
        if lm.shape[1] == 2:
            lm = np.concatenate([lm, np.ones((len(lm), 1))], axis=1)
        parse = read_indexed_png(os.path.join(directory, "parse", stem + ".png"))
        if parse.shape != camera.size:
            raise FormatError(f"{directory}/parse/{stem}.png size differs from the frame")
        frames.append(FrameObservation(img, lm, parse))
    gt_path = os.path.join(directory, "gt_params.jsonl")
    gt = load_params(gt_path) if os.path.exists(gt_path) else None
    if gt is not None and len(gt) != len(frames):
        raise FormatError(f"{gt_path}: {len(gt)} records for {len(frames)} frames")
    corr_dir = os.path.join(directory, "gt_corrections")
    corr = load_corrections(corr_dir) if os.path.isdir(corr_dir) else None
    names = None
    pal = os.path.join(directory, "parse_palette.json")
    if os.path.exists(pal):
        with open(pal) as fh:
            names = json.load(fh).get("classes")
    return SceneBundle(frames, camera, gt, corr, names)
