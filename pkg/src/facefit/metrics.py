"""Evaluation metrics and per-scene reports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .fitter import Problem, _param_tensors, reconstruct
from .losses import LossWeights
from .model import ModelCorrections
from .shading import Camera


def compute_nme(pred, gt, bbox, valid=None):
    """Mean landmark distance over valid points divided by sqrt(w * h)."""
    p = np.asarray(pred, dtype=np.float64)[..., :2]
    g = np.asarray(gt, dtype=np.float64)
    if valid is None and g.shape[-1] == 3:
        valid = g[:, 2] > 0.5
    g = g[..., :2]
    if p.shape != g.shape:
        raise ValueError(f"landmark shapes differ: {p.shape} vs {g.shape}")
    w, h = bbox
    if not (w > 0 and h > 0):
        raise ValueError(f"bounding box dimensions must be positive, got {bbox}")
    valid = np.ones(len(p), dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("no valid landmarks")
    d = np.linalg.norm(p[valid] - g[valid], axis=1)
    return float(d.mean() / np.sqrt(w * h))


def landmark_bbox(gt):
    """Width and height of the valid ground-truth landmarks' bounding box."""
    g = np.asarray(gt, dtype=np.float64)
    pts = g[g[:, 2] > 0.5, :2] if g.shape[1] == 3 else g
    if not len(pts):
        raise ValueError("no valid landmarks")
    span = pts.max(0) - pts.min(0)
    return float(span[0]), float(span[1])


def coefficient_mae(pred_w, gt_w):
    """Mean absolute difference over frames and coefficients."""
    p = np.asarray(pred_w, dtype=np.float64)
    g = np.asarray(gt_w, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"coefficient arrays differ in shape: {p.shape} vs {g.shape}")
    return float(np.abs(p - g).mean())


def masked_photometric_error(image, rendered, mask):
    """Mask-weighted mean of the per-pixel RGB distance."""
    m = np.asarray(mask, dtype=np.float64)
    if not m.sum() > 0:
        raise ValueError("photometric mask is empty")
    d = np.linalg.norm(np.asarray(image) - np.asarray(rendered), axis=-1)
    return float((m * d).sum() / m.sum())


@dataclass
class EvalReport:
    losses: list                    # per-frame LossBreakdown.to_dict()
    photometric: list
    nme: list
    coefficient_mae: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def total(self):
        return float(sum(b["total"] for b in self.losses))

    def to_dict(self):
        out = {
            "frames": [dict(b, photometric_error=ph, nme=n)
                       for b, ph, n in zip(self.losses, self.photometric, self.nme)],
            "total": self.total,
            "photometric_error": float(np.mean(self.photometric)),
            "nme": float(np.mean(self.nme)),
        }
        for term in self.losses[0]:
            out.setdefault(term, float(sum(b[term] for b in self.losses)))
        out["total"] = self.total
        if self.coefficient_mae is not None:
            out["coefficient_mae"] = self.coefficient_mae
        out.update(self.extra)
        return out


def evaluate(frames, template, masks, corrections, params, cam: Camera = None,
             weights: LossWeights = None, gt_params=None):
    """Per-frame losses, photometric error and NME (plus coefficient MAE when
    ground truth is given)."""
    cam = cam or Camera()
    weights = weights or LossWeights()
    if len(params) != len(frames):
        raise ValueError(f"{len(params)} parameter records for {len(frames)} frames")
    corrections = corrections or ModelCorrections.zeros(template, masks.resolution)
    losses, photo, nme = [], [], []
    for frame, p in zip(frames, params):
        problem = Problem([frame], template, masks, cam, weights)
        with torch.no_grad():
            b = problem.objective(corrections, [_param_tensors(p, False)])
        losses.append(b.to_dict())
        r = reconstruct(template, corrections, masks, p, cam)
        photo.append(masked_photometric_error(frame.image, r["image"], r["mask"]))
        nme.append(compute_nme(r["landmarks"], frame.landmarks, landmark_bbox(frame.landmarks)))
    mae = None
    if gt_params is not None:
        if len(gt_params) != len(params):
            raise ValueError(f"{len(gt_params)} ground-truth records for {len(params)} frames")
        mae = coefficient_mae([p.w for p in params], [g.w for g in gt_params])
    return EvalReport(losses, photo, nme, mae)
