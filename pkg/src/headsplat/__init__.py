"""Animatable 3D Gaussian head avatars.

Gaussian splats anchored to a parametric head template, posed by blended-bone
linear blend skinning, rendered with a differentiable CPU splatter, and fitted
to images by gradient descent (per-frame driving parameters and per-subject
attribute residuals).
"""

from .animation import PosedGaussians, TemplateMismatchError, pose_avatar, pose_jacobian
from .avatar import (
    AnchorSet,
    AvatarResiduals,
    CanonicalAvatar,
    apply_residuals,
    init_avatar,
    upsample_anchors,
)
from .losses import LossWeights, few_to_many_split, l1_loss, psnr, ssim, total_loss
from .optim import (
    AdamState,
    DivergedError,
    FitReport,
    adam_step,
    estimate_sequence,
    fit_flame,
    personalize,
)
from .rasterizer import (
    Camera,
    RenderConfig,
    RenderedFrame,
    RenderGradients,
    brute_force_render,
    head_camera,
    project_gaussians,
    render,
    render_backward,
)
from .template import (
    FlameParams,
    HeadTemplate,
    bone_transforms,
    generate_synthetic_template,
    lbs_deform,
    shape_vertices,
)

__version__ = "0.1.0"

__all__ = [
    "AnchorSet",
    "AdamState",
    "AvatarResiduals",
    "Camera",
    "CanonicalAvatar",
    "DivergedError",
    "FitReport",
    "FlameParams",
    "HeadTemplate",
    "LossWeights",
    "PosedGaussians",
    "RenderConfig",
    "RenderGradients",
    "RenderedFrame",
    "TemplateMismatchError",
    "adam_step",
    "apply_residuals",
    "bone_transforms",
    "brute_force_render",
    "estimate_sequence",
    "few_to_many_split",
    "fit_flame",
    "generate_synthetic_template",
    "head_camera",
    "init_avatar",
    "l1_loss",
    "lbs_deform",
    "personalize",
    "pose_avatar",
    "pose_jacobian",
    "project_gaussians",
    "psnr",
    "render",
    "render_backward",
    "shape_vertices",
    "ssim",
    "total_loss",
    "upsample_anchors",
]
