"""Posing: blended-bone LBS on Gaussian centers, plus analytic pose jacobians."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .avatar import CanonicalAvatar, interpolate_vertex_attribute
from .rotations import quat_from_axis_angle, quat_multiply, quat_normalize
from .template import (
    FlameParams,
    HeadTemplate,
    bone_transform_derivatives,
    bone_transforms,
    corrective_feature_jacobian,
    corrective_features,
)


class TemplateMismatchError(ValueError):
    """Avatar was not built from the given template (checksum differs)."""


@dataclass(frozen=True)
class PosedGaussians:
    """Avatar deformed to one frame: only centers change, everything else is
    the canonical avatar's arrays (shared, not copied)."""

    centers: np.ndarray  # (M, 3)
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    frame_tag: FlameParams | None = None

    @property
    def count(self) -> int:
        return self.centers.shape[0]


def _check_match(avatar: CanonicalAvatar, template: HeadTemplate) -> None:
    if avatar.template_crc != template.checksum():
        raise TemplateMismatchError(
            "avatar was built from a different template (checksum mismatch)"
        )


def _pre_skinning_positions(
    avatar: CanonicalAvatar, template: HeadTemplate, params: FlameParams
) -> np.ndarray:
    """Anchor + offset + expression and corrective displacements (pre-LBS)."""
    pos = avatar.anchors + avatar.offsets
    if np.any(params.expression):
        basis = interpolate_vertex_attribute(avatar, template.expression_basis, "expr_basis")
        M = pos.shape[0]
        pos = pos + (basis.reshape(M * 3, -1) @ params.expression).reshape(M, 3)
    if template.has_correctives():
        feats = corrective_features(params.articulation)
        if np.any(feats):
            cbasis = interpolate_vertex_attribute(
                avatar, template.articulation_corrective, "corrective_basis"
            )
            M = pos.shape[0]
            pos = pos + (cbasis.reshape(M * 3, -1) @ feats).reshape(M, 3)
    return pos


def _blend(avatar: CanonicalAvatar, transforms: np.ndarray) -> np.ndarray:
    B = transforms.shape[0]
    return (avatar.anchor_weights @ transforms.reshape(B, 12)).reshape(-1, 3, 4)


def pose_with_blend(
    avatar: CanonicalAvatar, template: HeadTemplate, params: FlameParams
) -> tuple[PosedGaussians, np.ndarray]:
    """pose_avatar plus the per-Gaussian blended 3x4 transforms (for chaining
    center gradients back to offsets during optimization)."""
    _check_match(avatar, template)
    transforms = bone_transforms(template, params)
    blended = _blend(avatar, transforms)
    pos = _pre_skinning_positions(avatar, template, params)
    centers = blended[:, :, 3] + blended[:, :, 0] * pos[:, 0, None]
    centers += blended[:, :, 1] * pos[:, 1, None]
    centers += blended[:, :, 2] * pos[:, 2, None]
    posed = PosedGaussians(
        centers=centers,
        log_scales=avatar.log_scales,
        rotations=avatar.rotations,
        opacity_logits=avatar.opacity_logits,
        colors=avatar.colors,
        frame_tag=params,
    )
    return posed, blended


def pose_avatar(
    avatar: CanonicalAvatar,
    template: HeadTemplate,
    params: FlameParams,
    rotate_covariance: bool = False,
) -> PosedGaussians:
    """Deform Gaussian centers by expression blendshapes + blended-bone LBS.

    Covariance, opacity, and color pass through untouched by default.  The
    rotate_covariance flag rotates each covariance by the (orthogonalized)
    blended rotation instead; it is an experimental alternative, off by
    default because the deformation model keeps covariances fixed.
    """
    posed, blended = pose_with_blend(avatar, template, params)
    if rotate_covariance:
        R = blended[:, :, :3]
        U, _, Vt = np.linalg.svd(R)
        nearest = U @ Vt
        det = np.linalg.det(nearest)
        U[det < 0, :, -1] *= -1.0
        nearest = U @ Vt
        tangent = _matrix_log_so3(nearest)
        rotations = quat_normalize(
            quat_multiply(quat_from_axis_angle(tangent), avatar.rotations)
        )
        posed = PosedGaussians(
            centers=posed.centers,
            log_scales=avatar.log_scales,
            rotations=rotations,
            opacity_logits=avatar.opacity_logits,
            colors=avatar.colors,
            frame_tag=params,
        )
    return posed


def _matrix_log_so3(R: np.ndarray) -> np.ndarray:
    """Axis-angle of batched rotation matrices (used only by rotate_covariance)."""
    trace = np.clip((np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(trace)
    vec = np.stack(
        [R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0], R[..., 1, 0] - R[..., 0, 1]],
        axis=-1,
    )
    s = np.where(theta < 1e-8, 0.5, theta / (2.0 * np.sin(np.maximum(theta, 1e-12))))
    return vec * s[..., None]


def parameter_count(template: HeadTemplate) -> int:
    """Length of the flattened (psi, theta, head pose) parameter vector."""
    return template.num_expression + 3 * (template.num_bones - 1) + 6


def pose_jacobian(
    avatar: CanonicalAvatar, template: HeadTemplate, params: FlameParams
) -> np.ndarray:
    """Analytic d centers / d (psi, theta, head rotation, head translation).

    Dense (M, 3, P) with P = K_expr + 3*(B-1) + 6, columns ordered expression,
    articulation (joint-major), head rotation, head translation.
    """
    _check_match(avatar, template)
    M = avatar.count
    B = template.num_bones
    K = template.num_expression
    P = parameter_count(template)

    A, dA_theta, dA_head = bone_transform_derivatives(template, params)
    blended = _blend(avatar, A)
    pos = _pre_skinning_positions(avatar, template, params)
    Rbar = blended[:, :, :3]

    jac = np.empty((M, 3, P))

    expr_basis = interpolate_vertex_attribute(avatar, template.expression_basis, "expr_basis")
    jac[:, :, :K] = np.einsum("mij,mjk->mik", Rbar, expr_basis)

    n_theta = 3 * (B - 1)
    dA_flat = dA_theta.reshape(n_theta, B, 3, 4)
    dblend = np.einsum("mb,pbij->mpij", avatar.anchor_weights, dA_flat)
    theta_cols = np.einsum("mpij,mj->mip", dblend[:, :, :, :3], pos) + dblend[:, :, :, 3].transpose(0, 2, 1)

    # corrective displacements depend on theta through the activation features
    feat_jac = corrective_feature_jacobian(params.articulation)  # (K_art, n_theta)
    if template.num_corrective and np.any(feat_jac):
        cbasis = interpolate_vertex_attribute(
            avatar, template.articulation_corrective, "corrective_basis"
        )
        dpos = np.einsum("mik,kp->mip", cbasis, feat_jac)
        theta_cols = theta_cols + np.einsum("mij,mjp->mip", Rbar, dpos)
    jac[:, :, K : K + n_theta] = theta_cols

    dblend_h = np.einsum("mb,pbij->mpij", avatar.anchor_weights, dA_head)
    jac[:, :, K + n_theta : K + n_theta + 3] = (
        np.einsum("mpij,mj->mip", dblend_h[:, :, :, :3], pos) + dblend_h[:, :, :, 3].transpose(0, 2, 1)
    )

    # translation column: every bone's translation moves 1:1 with t_h
    jac[:, :, K + n_theta + 3 :] = np.broadcast_to(np.eye(3), (M, 3, 3))
    return jac


def flatten_params(params: FlameParams) -> np.ndarray:
    return np.concatenate(
        [
            params.expression,
            params.articulation.reshape(-1),
            params.head_rotation,
            params.head_translation,
        ]
    )


def unflatten_params(template: HeadTemplate, vec: np.ndarray) -> FlameParams:
    K = template.num_expression
    n_theta = 3 * (template.num_bones - 1)
    if vec.shape != (K + n_theta + 6,):
        raise ValueError("parameter vector has the wrong length")
    return FlameParams(
        expression=vec[:K].copy(),
        articulation=vec[K : K + n_theta].reshape(-1, 3).copy(),
        head_rotation=vec[K + n_theta : K + n_theta + 3].copy(),
        head_translation=vec[K + n_theta + 3 :].copy(),
    )
