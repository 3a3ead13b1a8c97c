"""scikit-learn style wrapper around the fitting pipeline.

``fit`` learns model corrections (and tracking) from a set of frames,
``transform`` tracks new frames against the learned model, ``predict``
renders them back, and ``score`` is the negative mean photometric error.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from .fitter import FitConfig, FrameObservation, fit, reconstruct, track
from .losses import LossWeights
from .metrics import masked_photometric_error
from .model import TemplateFaceModel, compute_attention_masks
from .shading import Camera


def check_frames(frames, camera: Camera = None, n_landmarks=None, min_frames=1):
    """Validate a sequence of FrameObservation (or (image, landmarks, parse) tuples).

    Returns a list of FrameObservation. Raises ValueError with the offending
    frame index on any inconsistency.
    """
    if isinstance(frames, FrameObservation):
        frames = [frames]
    try:
        frames = list(frames)
    except TypeError:
        raise ValueError("frames must be a sequence of FrameObservation") from None
    if len(frames) < min_frames:
        raise ValueError(f"need at least {min_frames} frame(s), got {len(frames)}")
    out = []
    for i, f in enumerate(frames):
        if not isinstance(f, FrameObservation):
            try:
                f = FrameObservation(*f)
            except TypeError:
                raise ValueError(f"frame {i}: expected FrameObservation or "
                                 f"(image, landmarks, parse)") from None
        if f.image.ndim != 3 or f.image.shape[2] != 3:
            raise ValueError(f"frame {i}: image must be (H, W, 3), got {f.image.shape}")
        if not np.isfinite(f.image).all():
            raise ValueError(f"frame {i}: image contains NaN or inf")
        if f.image.min() < 0 or f.image.max() > 1:
            raise ValueError(f"frame {i}: image values must lie in [0, 1]")
        if camera is not None and f.size != camera.size:
            raise ValueError(f"frame {i}: image is {f.size}, camera expects {camera.size}")
        if n_landmarks is not None and f.landmarks.shape != (n_landmarks, 3):
            raise ValueError(f"frame {i}: landmarks must be ({n_landmarks}, 2 or 3), "
                             f"got {f.landmarks.shape}")
        if f.parse.shape != f.size:
            raise ValueError(f"frame {i}: parse map {f.parse.shape} differs from image {f.size}")
        out.append(f)
    return out


def check_template(template):
    if not isinstance(template, TemplateFaceModel):
        raise ValueError(f"template must be a TemplateFaceModel, got {type(template).__name__}")
    return template


class PersonalizedFaceFitter(BaseEstimator, TransformerMixin):
    """Personalize a template face rig to a set of frames.

    Parameters mirror :class:`FitConfig`; ``camera`` defaults to the
    standard 224x224 pinhole.
    """

    def __init__(self, template=None, camera=None, uv_resolution=None, stage1_steps=2000,
                 stage2_steps=500, track_steps=500, warmup_steps=200, lr1=1e-4, lr2=1e-5,
                 lr_decay=0.01, weights=None, seed=0):
        self.template = template
        self.camera = camera
        self.uv_resolution = uv_resolution
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.track_steps = track_steps
        self.warmup_steps = warmup_steps
        self.lr1 = lr1
        self.lr2 = lr2
        self.lr_decay = lr_decay
        self.weights = weights
        self.seed = seed

    def _config(self):
        return FitConfig(stage1_steps=self.stage1_steps, stage2_steps=self.stage2_steps,
                         track_steps=self.track_steps, warmup_steps=self.warmup_steps,
                         lr1=self.lr1, lr2=self.lr2, lr_decay=self.lr_decay,
                         weights=self.weights or LossWeights(), seed=self.seed)

    def _camera(self):
        return self.camera or Camera()

    def fit(self, X, y=None):
        """Learn model corrections from frames ``X``. ``y`` is ignored."""
        template = check_template(self.template)
        cam = self._camera()
        frames = check_frames(X, cam, len(template.landmark_indices), min_frames=2)
        self.masks_ = compute_attention_masks(template, resolution=self.uv_resolution)
        res = fit(frames, template, self.masks_, self._config(), cam,
                  stage2=self.stage2_steps > 0)
        self.corrections_ = res.corrections
        self.train_params_ = res.params
        self.trace_ = res.trace
        self.n_frames_ = len(frames)
        return self

    def transform(self, X):
        """Per-frame tracking parameters of ``X`` under the learned model."""
        check_is_fitted(self, "corrections_")
        cam = self._camera()
        frames = check_frames(X, cam, len(self.template.landmark_indices))
        params, _ = track(frames, self.template, self.masks_, self.corrections_,
                          self._config(), cam)
        return params

    def fit_transform(self, X, y=None, **fit_params):
        """Fit, then return the stage-1 tracking of the training frames."""
        return self.fit(X, y, **fit_params).train_params_

    def predict(self, X):
        """Renders (H, W, 3) of ``X`` reconstructed by the personalized model."""
        return [r["image"] for r in self._reconstruct(self.transform(X))]

    def _reconstruct(self, params):
        return [reconstruct(self.template, self.corrections_, self.masks_, p, self._camera())
                for p in params]

    def score(self, X, y=None):
        """Negative mean masked photometric error (higher is better)."""
        frames = check_frames(X, self._camera())
        recs = self._reconstruct(self.transform(frames))
        errs = [masked_photometric_error(f.image, r["image"], r["mask"])
                for f, r in zip(frames, recs)]
        return -float(np.mean(errs))

    def __sklearn_is_fitted__(self):
        return hasattr(self, "corrections_")


__all__ = ["PersonalizedFaceFitter", "check_frames", "check_template", "NotFittedError"]
