"""Analysis-by-synthesis fitting of corrections and per-frame tracking.

Stage 1 optimizes the shared model corrections together with each frame's
expression logits, pose and lighting. Stage 2 freezes tracking and refines
the corrections without the tracking regularizer. ``track`` optimizes only
per-frame parameters against a fixed model, and ``retarget`` drives another
rig with tracked expression weights.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .losses import (BlendshapeGradientPrior, LossBreakdown, LossError, LossWeights,
                     fragment_neighbors, image_gradient_fragments, landmark_loss,
                     parsing_fragments, photometric_fragments, shape_smoothness, total_loss,
                     tracking_reg)
from .mesh import adjacency_edges, as_tensor, laplacian_adjacency, vertex_normals
from .model import (AttentionMaskSet, ModelCorrections, TemplateFaceModel, apply_pose,
                    assemble_albedo, assemble_shape, coeffs_from_logits,
                    corrected_blendshapes, identity_offset)
from .optim import Adam
from .raster import (parse_fragments, rasterize_shape, render_face, render_parse,
                     shade_fragments)
from .shading import N_SH, Camera, ProjectionError, constant_light, project, project_landmarks

log = logging.getLogger(__name__)

TRACK_GROUPS = ("logits", "euler", "translation", "gamma")
MODEL_GROUPS = ModelCorrections.FIELDS

# Per-group multipliers on the base learning rate. The base rates are sized
# for network weights; these bring each raw parameter to a sensible step
# (0.02 logit, ~0.1 degree, 0.2 mm, ...). Corrections move an order of
# magnitude slower than tracking so they do not absorb pose or expression.
DEFAULT_LR_SCALE = {
    "logits": 200.0,
    "euler": 20.0,
    "translation": 2000.0,
    "gamma": 50.0,
    "d_shape_0": 20.0,
    "d_shape": 20.0,
    "d_albedo_0": 2.0,
    "d_albedo": 2.0,
    "r0_trainable": 2.0,
}


class FitError(RuntimeError):
    pass


@dataclass
class FrameObservation:
    """One input frame: RGB image in [0, 1], landmarks (68, 3) as [u, v, valid],
    and an integer parse label image."""

    image: np.ndarray
    landmarks: np.ndarray
    parse: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        lm = np.asarray(self.landmarks, dtype=np.float64)
        if lm.ndim == 2 and lm.shape[1] == 2:
            lm = np.concatenate([lm, np.ones((len(lm), 1))], axis=1)
        self.landmarks = lm
        self.parse = np.asarray(self.parse, dtype=np.int64)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be (H, W, 3), got {self.image.shape}")
        if lm.ndim != 2 or lm.shape[1] != 3:
            raise ValueError(f"landmarks must be (K, 2) or (K, 3), got {lm.shape}")
        if self.parse.shape != self.image.shape[:2]:
            raise ValueError(f"parse map {self.parse.shape} does not match image "
                             f"{self.image.shape[:2]}")

    @property
    def size(self):
        return self.image.shape[:2]


@dataclass
class TrackingParams:
    logits: np.ndarray
    euler: np.ndarray
    translation: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64).reshape(-1)
        self.euler = np.asarray(self.euler, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.gamma = np.asarray(self.gamma, dtype=np.float64).reshape(N_SH)

    @property
    def w(self):
        return 1.0 / (1.0 + np.exp(-self.logits))

    def copy(self):
        return TrackingParams(self.logits.copy(), self.euler.copy(),
                              self.translation.copy(), self.gamma.copy())

    def to_vector(self):
        return np.concatenate([self.logits, self.euler, self.translation, self.gamma])

    @classmethod
    def from_vector(cls, vec, n_blendshapes):
        k = n_blendshapes
        return cls(vec[:k], vec[k:k + 3], vec[k + 3:k + 6], vec[k + 6:k + 6 + N_SH])

    def to_json(self):
        return json.dumps({k: getattr(self, k).tolist() for k in TRACK_GROUPS})

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        missing = [k for k in TRACK_GROUPS if k not in d]
        if missing:
            raise ValueError(f"tracking record lacks {missing}")
        return cls(**{k: d[k] for k in TRACK_GROUPS})


@dataclass
class FitConfig:
    stage1_steps: int = 2000
    stage2_steps: int = 500
    lr1: float = 1e-4
    lr2: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    n_frames: int = 4
    warmup_steps: int = 200
    track_steps: int = 500
    init_logit: float = -4.0
    lr_decay: float = 0.01  # learning-rate multiplier reached at the last step
    lr_scale: dict = field(default_factory=lambda: dict(DEFAULT_LR_SCALE))

    def __post_init__(self):
        for name in ("stage1_steps", "stage2_steps", "warmup_steps", "track_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (self.lr1 > 0 and self.lr2 > 0):
            raise ValueError("learning rates must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        scale = dict(DEFAULT_LR_SCALE)
        scale.update(self.lr_scale)
        self.lr_scale = scale

    def lrs(self, base, names):
        return {n: base * self.lr_scale[n] for n in names}


@dataclass
class FitResult:
    corrections: ModelCorrections
    params: list
    trace: list = field(default_factory=list)

    @property
    def final(self) -> LossBreakdown | None:
        return self.trace[-1] if self.trace else None


# ---------------------------------------------------------------------------
# shared evaluation


class Problem:
    """Frames plus the template quantities the objective reuses every step."""

    def __init__(self, frames, template: TemplateFaceModel, masks: AttentionMaskSet,
                 cam: Camera, weights: LossWeights):
        if not frames:
            raise FitError("no frames to fit")
        self.frames = list(frames)
        self.template = template
        self.masks = masks
        self.cam = cam
        self.weights = weights
        for i, f in enumerate(self.frames):
            if f.size != cam.size:
                raise FitError(f"frame {i} is {f.size}, camera expects {cam.size}")
            if f.landmarks.shape != (len(template.landmark_indices), 3):
                raise FitError(f"frame {i}: landmarks must be "
                               f"({len(template.landmark_indices)}, 3)")
            if f.parse.shape != cam.size:
                raise FitError(f"frame {i}: parse map is {f.parse.shape}, expected {cam.size}")
            if f.parse.max() >= template.n_classes:
                raise FitError(f"frame {i}: parse label {f.parse.max()} >= "
                               f"{template.n_classes} classes")
        self.images = as_tensor(np.stack([f.image for f in self.frames]))
        self.landmarks = as_tensor(np.stack([f.landmarks for f in self.frames]))
        self.parse_labels = np.stack([f.parse.reshape(-1) for f in self.frames])
        self.parse_flat = as_tensor(np.eye(template.n_classes)[self.parse_labels])
        self.edges = adjacency_edges(laplacian_adjacency(template.s0))
        self.prior = BlendshapeGradientPrior(template)

    def frame_fragments(self, n, shape, albedo, params):
        """Pose, rasterize and shade frame ``n`` on its covered pixels."""
        posed = apply_pose(shape, params["euler"], params["translation"])
        try:
            frags = rasterize_shape(posed, self.cam, self.template.triangles)
        except ProjectionError as exc:
            raise FitError(f"frame {n}: {exc}") from None
        normals = vertex_normals(posed, self.template.triangles)
        radiance, validity, pix_uv = shade_fragments(frags, normals, albedo, params["gamma"],
                                                     self.template)
        parse = parse_fragments(frags, self.template, pix_uv)
        lms = project_landmarks(posed, self.template.landmark_indices, self.cam)
        return frags, radiance, validity, parse, lms, posed

    def objective(self, corrections, params, *, stage2=False, model_terms=True):
        """Evaluate the weighted objective over all frames.

        ``params`` is a list of dicts of tensors (logits, euler, translation,
        gamma). Returns a LossBreakdown whose entries are tensors.
        """
        t = self.template
        h, w = self.cam.size
        corrected = corrected_blendshapes(t, corrections, self.masks)
        offset = identity_offset(t, corrections)
        photo = grad = pa = 0.0
        lms = []
        for n, p in enumerate(params):
            coeffs = coeffs_from_logits(p["logits"])
            shape = assemble_shape(t, corrections, self.masks, coeffs,
                                   corrected=corrected, offset=offset)
            albedo = assemble_albedo(t, corrections, self.masks, coeffs)
            frags, rad, valid, parse, lm, posed = self.frame_fragments(n, shape, albedo, p)
            if not float(valid.sum()) > 0:
                uv, _ = project(posed.detach(), self.cam)
                lo, hi = uv.min(0).values.numpy(), uv.max(0).values.numpy()
                raise FitError(f"frame {n}: rendered face does not overlap the image mask "
                               f"(projected bbox {lo.round(1).tolist()}..{hi.round(1).tolist()}, "
                               f"image {w}x{h})")
            target = self.images[n].reshape(-1, 3)[frags.pixels]
            right, down = fragment_neighbors(frags.pixels.numpy(), h, w)
            photo = photo + photometric_fragments(target, rad, valid)
            grad = grad + image_gradient_fragments(target, rad, valid, right, down)
            gt_parse = self.parse_flat[n][frags.pixels]
            covered = np.zeros(h * w, dtype=bool)
            covered[frags.pixels.numpy()] = True
            uncovered_sq = 2.0 * float(np.count_nonzero(self.parse_labels[n][~covered]))
            pa = pa + parsing_fragments(gt_parse, parse, uncovered_sq)
            lms.append(lm)
        terms = {
            "ph": photo + grad,
            "lm": landmark_loss(torch.stack(lms), self.landmarks),
            "pa": pa,
        }
        if model_terms:
            terms["sd"] = shape_smoothness(offset, None, edges=self.edges)
            terms["bg"] = self.prior(corrected)
        if not stage2:
            wts = torch.stack([torch.sigmoid(p["logits"]) for p in params])
            g = torch.stack([p["gamma"] for p in params])
            terms["reg"] = tracking_reg(wts, g, self.weights.lambda_gamma)
        try:
            return total_loss(terms, self.weights, stage2=stage2,
                              extra={"photometric": photo, "image_gradient": grad})
        except LossError as exc:
            raise FitError(str(exc)) from None


def _param_tensors(params: TrackingParams, requires_grad):
    return {k: as_tensor(getattr(params, k)).clone().requires_grad_(requires_grad)
            for k in TRACK_GROUPS}


def _to_params(d):
    return TrackingParams(*[d[k].detach().numpy().copy() for k in TRACK_GROUPS])


def _detach_breakdown(b: LossBreakdown):
    f = lambda v: float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
    return LossBreakdown({k: f(v) for k, v in b.terms.items()},
                         {k: f(v) for k, v in b.weighted.items()}, f(b.total),
                         {k: f(v) for k, v in (b.extra or {}).items()})


def _seed(config):
    torch.manual_seed(config.seed)
    return np.random.default_rng(config.seed)


# ---------------------------------------------------------------------------
# initialization


def initial_params(frame: FrameObservation, template: TemplateFaceModel, cam: Camera,
                   init_logit=-4.0):
    """Coarse per-frame start: neutral expression, frontal pose placed from the
    landmark centroid and spread, monochromatic light from image brightness."""
    lm = frame.landmarks
    valid = lm[:, 2] > 0.5
    model = template.s0.vertices[template.landmark_indices][valid]
    gt = lm[valid, :2]
    model_c = model - model.mean(0)
    spread_model = np.sqrt((model_c[:, :2] ** 2).sum(1).mean())
    spread_img = np.sqrt(((gt - gt.mean(0)) ** 2).sum(1).mean())
    z = cam.focal * spread_model / max(spread_img, 1e-6) - model.mean(0)[2]
    depth = z + model.mean(0)[2]
    cx, cy = gt.mean(0)
    tx = (cx - cam.cx) * depth / cam.focal - model.mean(0)[0]
    ty = (cy - cam.cy) * depth / cam.focal - model.mean(0)[1]

    lo = np.floor(gt.min(0)).astype(int).clip(0)
    hi = np.ceil(gt.max(0)).astype(int)
    patch = frame.image[lo[1]:hi[1] + 1, lo[0]:hi[0] + 1]
    level = patch.mean() / max(template.r0.data.mean(), 1e-3) if patch.size else 1.0
    return TrackingParams(np.full(template.n_blendshapes, init_logit), np.zeros(3),
                          np.array([tx, ty, z]), constant_light(level))


def landmark_warmup(frame, template, cam, params: TrackingParams, steps, config: FitConfig):
    """Fit pose and expression logits to the landmarks with L-BFGS.

    The landmark residual is a small smooth least-squares problem, so a
    quasi-Newton solve reaches its minimum where first-order steps at the
    photometric learning rates would still be wandering in depth.
    ``steps`` bounds the L-BFGS iterations.
    """
    if steps <= 0:
        return params
    p = _param_tensors(params, True)
    keys = ("euler", "translation", "logits")
    opt = torch.optim.LBFGS([p[k] for k in keys], lr=1.0, max_iter=steps,
                            tolerance_grad=1e-10, tolerance_change=1e-12,
                            line_search_fn="strong_wolfe")
    corrected = as_tensor(template.blendshapes)
    offset = torch.zeros(template.n_vertices, 3, dtype=torch.float64)
    gt = as_tensor(frame.landmarks)

    def closure():
        opt.zero_grad()
        shape = assemble_shape(template, None, None, coeffs_from_logits(p["logits"]),
                               corrected=corrected, offset=offset)
        posed = apply_pose(shape, p["euler"], p["translation"])
        loss = landmark_loss(project_landmarks(posed, template.landmark_indices, cam), gt)
        loss.backward()
        return loss

    before = {k: p[k].detach().clone() for k in keys}
    loss = opt.step(closure)
    if not torch.isfinite(loss) or not all(torch.isfinite(p[k]).all() for k in keys):
        log.warning("landmark warmup diverged; keeping the starting pose")
        for k in keys:
            p[k].data.copy_(before[k])
    return _to_params(p)


# ---------------------------------------------------------------------------
# stages


def _run(problem: Problem, corrections, params, steps, opt, trainable, *, stage2,
         model_terms, trace, decay=1.0):
    names = sorted(trainable)
    for step in range(steps):
        opt.scale = decay ** (step / max(steps - 1, 1))
        b = problem.objective(corrections, params, stage2=stage2, model_terms=model_terms)
        grads = torch.autograd.grad(b.total, [trainable[k] for k in names], allow_unused=True)
        opt.step({k: (g if g is not None else torch.zeros_like(trainable[k]))
                  for k, g in zip(names, grads)})
        trace.append(_detach_breakdown(b))
        if step % 100 == 0:
            log.info("step %d total %.6g", step, trace[-1].total)


def fit_joint(frames, template, masks, config: FitConfig = None, cam: Camera = None,
              init=None, corrections=None):
    """Stage 1: jointly optimize shared corrections and per-frame tracking.

    ``init`` optionally gives starting TrackingParams per frame; otherwise
    each frame starts from :func:`initial_params`. Either way pose and logits are
    then warmed up on the landmarks for ``config.warmup_steps`` steps.
    """
    config = config or FitConfig()
    cam = cam or Camera()
    _seed(config)
    if not frames:
        raise FitError("no frames to fit")
    problem = Problem(frames, template, masks, cam, config.weights)
    if init is None:
        init = [initial_params(f, template, cam, config.init_logit) for f in frames]
    elif len(init) != len(frames):
        raise FitError(f"{len(init)} initial parameter sets for {len(frames)} frames")
    init = [landmark_warmup(f, template, cam, p, config.warmup_steps, config)
            for f, p in zip(frames, init)]
    corr = (corrections or ModelCorrections.zeros(template, masks.resolution)).clone()
    for t in corr.tensors():
        t.requires_grad_(True)
    params = [_param_tensors(p, True) for p in init]

    trainable, lrs = {}, {}
    for name in MODEL_GROUPS:
        trainable[name] = getattr(corr, name)
        lrs[name] = config.lr1 * config.lr_scale[name]
    for n, p in enumerate(params):
        for k in TRACK_GROUPS:
            trainable[f"{k}/{n}"] = p[k]
            lrs[f"{k}/{n}"] = config.lr1 * config.lr_scale[k]
    opt = Adam(trainable, lrs, (config.beta1, config.beta2), config.eps)
    trace = []
    _run(problem, corr, params, config.stage1_steps, opt, trainable, stage2=False,
         model_terms=True, trace=trace, decay=config.lr_decay)
    return FitResult(corr.clone(), [_to_params(p) for p in params], trace)


def finetune_model(frames, template, masks, fit: FitResult, config: FitConfig = None,
                   cam: Camera = None):
    """Stage 2: tracking frozen, corrections refined at ``lr2`` without L_reg."""
    config = config or FitConfig()
    cam = cam or Camera()
    _seed(config)
    if config.stage2_steps == 0:
        return FitResult(fit.corrections.clone(), [p.copy() for p in fit.params], list(fit.trace))
    problem = Problem(frames, template, masks, cam, config.weights)
    corr = fit.corrections.clone()
    for t in corr.tensors():
        t.requires_grad_(True)
    params = [_param_tensors(p, False) for p in fit.params]
    trainable = {name: getattr(corr, name) for name in MODEL_GROUPS}
    opt = Adam(trainable, config.lrs(config.lr2, MODEL_GROUPS), (config.beta1, config.beta2),
               config.eps)
    trace = list(fit.trace)
    _run(problem, corr, params, config.stage2_steps, opt, trainable, stage2=True,
         model_terms=True, trace=trace, decay=config.lr_decay)
    return FitResult(corr.clone(), [p.copy() for p in fit.params], trace)


def fit(frames, template, masks, config: FitConfig = None, cam: Camera = None, init=None,
        stage2=True):
    """fit_joint followed (optionally) by finetune_model."""
    config = config or FitConfig()
    if len(frames) < 2 and (config.stage1_steps or (stage2 and config.stage2_steps)):
        raise FitError("fitting model corrections needs at least 2 frames; use track()")
    res = fit_joint(frames, template, masks, config, cam, init=init)
    if stage2:
        res = finetune_model(frames, template, masks, res, config, cam)
    return res


def track(frames, template, masks, corrections=None, config: FitConfig = None,
          cam: Camera = None, init=None):
    """Optimize per-frame tracking against a fixed model; frames are independent.

    Starting points and the landmark warmup follow :func:`fit_joint`.

    Returns ``(params, traces)`` with one trace list per frame.
    """
    config = config or FitConfig()
    cam = cam or Camera()
    _seed(config)
    if not frames:
        raise FitError("no frames to track")
    if init is not None and len(init) != len(frames):
        raise FitError(f"{len(init)} initial parameter sets for {len(frames)} frames")
    corr = (corrections or ModelCorrections.zeros(template, masks.resolution)).clone()
    out, traces = [], []
    for n, frame in enumerate(frames):
        problem = Problem([frame], template, masks, cam, config.weights)
        start = init[n] if init is not None else initial_params(frame, template, cam,
                                                                 config.init_logit)
        start = landmark_warmup(frame, template, cam, start, config.warmup_steps, config)
        p = _param_tensors(start, True)
        opt = Adam(dict(p), config.lrs(config.lr1, TRACK_GROUPS), (config.beta1, config.beta2),
                   config.eps)
        trace = []
        _run(problem, corr, [p], config.track_steps, opt, p, stage2=False, model_terms=False,
             trace=trace, decay=config.lr_decay)
        out.append(_to_params(p))
        traces.append(trace)
    return out, traces


# ---------------------------------------------------------------------------
# synthesis and retargeting


def reconstruct(template, corrections, masks, params: TrackingParams, cam: Camera,
                with_parse=False):
    """Assemble, pose and render one frame. Returns a dict of numpy outputs."""
    corrections = corrections or ModelCorrections.zeros(template, masks.resolution)
    with torch.no_grad():
        coeffs = coeffs_from_logits(params.logits)
        shape = assemble_shape(template, corrections, masks, coeffs)
        albedo = assemble_albedo(template, corrections, masks, coeffs)
        posed = apply_pose(shape, params.euler, params.translation)
        frags = rasterize_shape(posed, cam, template.triangles)
        render = render_face(posed, vertex_normals(posed, template.triangles), albedo,
                             as_tensor(params.gamma), cam, template, fragments=frags)
        out = {
            "shape": shape.numpy(),
            "posed": posed.numpy(),
            "image": render.color.numpy(),
            "mask": render.mask.numpy(),
            "landmarks": project_landmarks(posed, template.landmark_indices, cam).numpy(),
            "render": render,
        }
        if with_parse:
            out["parse"] = render_parse(posed, cam, template, fragments=frags).numpy()
    return out


def retarget(source_params, target_template, target_corrections, target_masks, cam: Camera,
             transfer_pose=False, transfer_lighting=False, pose=None, gamma=None):
    """Drive the target rig with the source's expression weights.

    Pose and lighting come from the source only when the transfer flags are
    set; otherwise from ``pose`` (euler, translation) and ``gamma``, which
    default to a frontal head 600 mm in front of the camera under flat light.
    Returns ``(shapes, images)``: unposed target vertices and renders per frame.
    """
    k = target_template.n_blendshapes
    target_corrections = target_corrections or ModelCorrections.zeros(
        target_template, target_masks.resolution)
    if target_corrections.n_blendshapes != k or len(target_masks) != k:
        raise FitError("target model blendshape counts disagree")
    euler0, trans0 = pose if pose is not None else (np.zeros(3), np.array([0.0, 0.0, 600.0]))
    gamma0 = constant_light(1.0) if gamma is None else gamma
    shapes, images = [], []
    for n, p in enumerate(source_params):
        if len(p.logits) != k:
            raise FitError(f"frame {n}: source has {len(p.logits)} blendshape coefficients, "
                           f"target rig has {k}")
        q = TrackingParams(p.logits,
                           p.euler if transfer_pose else euler0,
                           p.translation if transfer_pose else trans0,
                           p.gamma if transfer_lighting else gamma0)
        r = reconstruct(target_template, target_corrections, target_masks, q, cam)
        shapes.append(r["shape"])
        images.append(r["image"])
    return shapes, images


def with_weights(config: FitConfig, **kw):
    return replace(config, weights=replace(config.weights, **kw))
