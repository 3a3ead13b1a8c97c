"""Training objective terms and their weighted sum.

Every term is a torch expression, so its adjoint is available through
autograd. Multi-frame terms take stacked (N, ...) tensors or sequences.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .mesh import adjacency_edges, as_tensor, deformation_gradients, reference_frame_inverses
from .model import corrected_blendshapes
from .shading import gamma_matrix

TERMS = ("ph", "lm", "pa", "sd", "bg", "reg")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_ph: float = 200.0
    lambda_lm: float = 0.1
    lambda_pa: float = 50.0
    lambda_sd: float = 2.5
    lambda_bg: float = 1.5
    lambda_reg: float = 1e-3
    lambda_gamma: float = 0.02

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v >= 0:
                raise ValueError(f"loss weight {k} must be nonnegative, got {v}")

    def of(self, term):
        return getattr(self, f"lambda_{term}")


@dataclass
class LossBreakdown:
    terms: dict
    weighted: dict
    total: object
    extra: dict | None = None

    def to_dict(self):
        out = {k: float(v) for k, v in self.terms.items()}
        out.update({f"weighted_{k}": float(v) for k, v in self.weighted.items()})
        for k, v in (self.extra or {}).items():
            out[k] = float(v)
        out["total"] = float(self.total)
        return out


def _stack(xs):
    if isinstance(xs, (list, tuple)):
        return torch.stack([as_tensor(x) for x in xs])
    return as_tensor(xs)


def safe_norm(x, dim=None):
    """Euclidean norm with a zero (sub)gradient at the origin."""
    return _safe_sqrt((x * x).sum() if dim is None else (x * x).sum(dim=dim))


def _safe_sqrt(sq):
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))),
                       torch.zeros_like(sq))


def photometric_l21(images, rendered, masks):
    """Sum over frames of mask-normalized l2,1 image distance.

    For frame n: sum_q ||M(q) (I(q) - I_hat(q))||_2 / sum_q M(q), with the
    l2 norm taken over channels.
    """
    img = _stack(images)
    ren = _stack(rendered)
    m = _stack(masks)
    if img.shape != ren.shape or img.shape[:-1] != m.shape:
        raise LossError(f"shape mismatch: images {tuple(img.shape)}, rendered "
                        f"{tuple(ren.shape)}, masks {tuple(m.shape)}")
    total = img.new_zeros(())
    for n in range(img.shape[0]):
        denom = m[n].sum()
        if not denom > 0:
            raise LossError(f"frame {n}: photometric mask is empty")
        total = total + safe_norm(m[n][..., None] * (img[n] - ren[n]), dim=-1).sum() / denom
    return total


def forward_differences(images):
    """(N, H, W, C) -> (N, H, W, 2C); last column/row differences are 0."""
    x = _stack(images)
    dx = torch.zeros_like(x)
    dy = torch.zeros_like(x)
    dx[:, :, :-1] = x[:, :, 1:] - x[:, :, :-1]
    dy[:, :-1, :] = x[:, 1:, :] - x[:, :-1, :]
    return torch.cat([dx, dy], dim=-1)


def erode_mask(masks):
    """Keep a pixel only if it and its right and lower neighbors are in the mask."""
    m = _stack(masks)
    out = torch.zeros_like(m)
    out[:, :-1, :-1] = m[:, :-1, :-1] * m[:, :-1, 1:] * m[:, 1:, :-1]
    return out


def image_gradient_loss(images, rendered, masks):
    """Photometric l2,1 loss on forward-difference gradient images."""
    return photometric_l21(forward_differences(images), forward_differences(rendered),
                           erode_mask(masks))


def landmark_loss(pred, gt, valid=None):
    """Mean squared pixel distance over valid landmarks (summed over frames).

    ``gt`` may carry a third column of validity flags.
    """
    p = as_tensor(pred)
    g = as_tensor(gt)
    if g.shape[-1] == 3 and valid is None:
        valid = g[..., 2] > 0.5
        g = g[..., :2]
    if p.shape != g.shape:
        raise LossError(f"landmark shapes differ: {tuple(p.shape)} vs {tuple(g.shape)}")
    if valid is None:
        valid = torch.ones(p.shape[:-1], dtype=torch.bool)
    valid = torch.as_tensor(np.asarray(valid), dtype=torch.bool)
    if p.ndim == 2:
        p, g, valid = p[None], g[None], valid[None]
    total = p.new_zeros(())
    for n in range(p.shape[0]):
        k = int(valid[n].sum())
        if k == 0:
            raise LossError(f"frame {n}: no valid landmarks")
        d = ((p[n] - g[n]) ** 2).sum(dim=-1)
        total = total + d[valid[n]].sum() / k
    return total


def parsing_loss(gt_parse, pred_parse):
    """Sum over frames of the Frobenius norm of the parse-map difference."""
    g = _stack(gt_parse)
    p = _stack(pred_parse)
    if g.shape[-1] != p.shape[-1]:
        raise LossError(f"class count mismatch: {g.shape[-1]} vs {p.shape[-1]}")
    if g.shape != p.shape:
        raise LossError(f"parse map shapes differ: {tuple(g.shape)} vs {tuple(p.shape)}")
    if g.ndim == 3:
        g, p = g[None], p[None]
    return sum((safe_norm(g[n] - p[n]) for n in range(g.shape[0])), p.new_zeros(()))


def shape_smoothness(delta, adjacency, edges=None):
    """sum_v sum_{u in N(v)} ||delta(v) - delta(u)||^2 (each edge counted both ways)."""
    d = as_tensor(delta)
    src, dst = edges if edges is not None else adjacency_edges(adjacency)
    src = torch.as_tensor(src)
    dst = torch.as_tensor(dst)
    return ((d[src] - d[dst]) ** 2).sum()


class BlendshapeGradientPrior:
    """Caches template quantities for the blendshape gradient loss."""

    def __init__(self, template):
        self.template = template
        self.ref_inverse = reference_frame_inverses(template.s0.vertices, template.triangles)
        self.target = deformation_gradients(template.s0.vertices, template.blendshapes,
                                            template.triangles, ref_inverse=self.ref_inverse)

    def __call__(self, corrected):
        g = deformation_gradients(None, corrected, self.template.triangles,
                                  ref_inverse=self.ref_inverse)
        return ((g - self.target) ** 2).sum()


def blendshape_gradient_loss(template, corrections, masks, prior=None):
    """Squared Frobenius distance between deformation gradients (from S0) of the
    corrected blendshapes S_i + F(A_i dS_i) and of the template blendshapes."""
    prior = prior or BlendshapeGradientPrior(template)
    return prior(corrected_blendshapes(template, corrections, masks))


def tracking_reg(w, gamma, lambda_gamma=0.02):
    """sum|w| + ||gamma - gamma_mean||_2 + lambda_gamma ||gamma||_2.

    gamma_mean repeats, for every SH band, the mean over the three color
    channels. Leading batch dimensions (frames) are summed.
    """
    w = as_tensor(w)
    g = gamma_matrix(gamma)
    if g.ndim == 2:
        g = g[None]
        w = w.reshape(1, -1)
    mean = g.mean(dim=-2, keepdim=True).expand_as(g)
    total = w.abs().sum()
    for n in range(g.shape[0]):
        total = total + safe_norm(g[n] - mean[n]) + lambda_gamma * safe_norm(g[n])
    return total


def total_loss(terms, weights: LossWeights = LossWeights(), stage2=False, extra=None):
    """Weighted sum of the objective terms in a fixed order.

    ``terms`` maps any subset of ph, lm, pa, sd, bg, reg to scalars (floats or
    tensors); missing terms count as zero. In stage-2 mode the regularizer is
    dropped.
    """
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise LossError(f"unknown loss terms: {sorted(unknown)}")
    vals, weighted = {}, {}
    total = 0.0
    for name in TERMS:
        if name not in terms:
            continue
        v = terms[name]
        fv = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if math.isnan(fv) or math.isinf(fv):
            raise LossError(f"loss term {name} is not finite ({fv})")
        lam = 0.0 if (stage2 and name == "reg") else weights.of(name)
        vals[name] = v
        weighted[name] = lam * v
        total = total + weighted[name]
    return LossBreakdown(vals, weighted, total, extra)


# ---------------------------------------------------------------------------
# covered-pixel evaluation
#
# The masks vanish off the rendered face, so the photometric and gradient
# terms only need covered pixels. These give the same values as the dense
# functions above at a fraction of the cost.

def fragment_neighbors(pixels, height, width):
    """Fragment indices of each fragment's right and lower neighbor (-1 if none)."""
    pix = np.asarray(pixels)
    lookup = np.full(height * width + 1, -1, dtype=np.int64)  # last slot = off-image
    lookup[pix] = np.arange(len(pix))
    col = pix % width
    row = pix // width
    right = np.where(col < width - 1, pix + 1, height * width)
    down = np.where(row < height - 1, pix + width, height * width)
    return lookup[right], lookup[down]


def photometric_fragments(target, pred, weight):
    """One frame of :func:`photometric_l21` from covered pixels only."""
    denom = weight.sum()
    if not denom > 0:
        raise LossError("photometric mask is empty")
    return (weight * safe_norm(target - pred, dim=-1)).sum() / denom


def image_gradient_fragments(target, pred, weight, right, down):
    """One frame of :func:`image_gradient_loss` from covered pixels only."""
    keep = torch.as_tensor(np.nonzero((right >= 0) & (down >= 0))[0])
    r = torch.as_tensor(right)[keep]
    d = torch.as_tensor(down)[keep]
    diff = target - pred
    g = torch.cat([diff[r] - diff[keep], diff[d] - diff[keep]], dim=-1)
    e = weight[keep] * weight[r] * weight[d]
    return photometric_fragments(g, torch.zeros_like(g), e)


def parsing_fragments(gt_onehot, pred, uncovered_sq):
    """One frame of :func:`parsing_loss`; ``uncovered_sq`` is the (constant)
    squared difference contributed by pixels the render leaves as background."""
    return _safe_sqrt(((gt_onehot - pred) ** 2).sum() + uncovered_sq)
