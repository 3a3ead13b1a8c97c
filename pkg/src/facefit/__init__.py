"""Personalized face rigs by analysis-by-synthesis.

A template blendshape rig is refined with UV-space identity and
per-expression corrections (geometry and albedo) by rendering it with a
differentiable rasterizer and matching images, landmarks and parse maps.
"""

from .estimator import PersonalizedFaceFitter, check_frames
from .fitter import (FitConfig, FitError, FitResult, FrameObservation, TrackingParams,
                     finetune_model, fit, fit_joint, reconstruct, retarget, track)
from .losses import LossBreakdown, LossWeights, total_loss
from .mesh import TriMesh, UVMap, load_obj, save_obj
from .metrics import EvalReport, coefficient_mae, compute_nme, evaluate
from .model import (AttentionMaskSet, ModelCorrections, TemplateFaceModel, assemble_albedo,
                    assemble_shape, compute_attention_masks)
from .raster import backward, rasterize, render_face, render_parse
from .shading import Camera, project, shade, sh_basis

__version__ = "0.1.0"

__all__ = [
    "AttentionMaskSet", "Camera", "EvalReport", "FitConfig", "FitError", "FitResult",
    "FrameObservation", "LossBreakdown", "LossWeights", "ModelCorrections",
    "PersonalizedFaceFitter", "TemplateFaceModel", "TrackingParams", "TriMesh", "UVMap",
    "assemble_albedo", "assemble_shape", "backward", "check_frames", "coefficient_mae",
    "compute_attention_masks", "compute_nme", "evaluate", "finetune_model", "fit", "fit_joint",
    "load_obj", "rasterize", "reconstruct", "render_face", "render_parse", "retarget",
    "save_obj", "shade", "sh_basis", "total_loss", "track",
]
