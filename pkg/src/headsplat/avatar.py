"""Canonical Gaussian avatar: anchored splats, surface upsampling, residuals."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit as sigmoid

from .rotations import quat_from_axis_angle, quat_multiply, quat_normalize, quat_to_matrix
from .template import HeadTemplate


class AnchorSet(NamedTuple):
    """Upsampled surface points plus provenance back to the template.

    Provenance is stored as three source vertex ids with barycentric weights;
    original template vertices use (v, v, v) with weights (1, 0, 0), so every
    per-vertex template quantity interpolates to anchors by one rule.
    """

    anchors: np.ndarray  # (M, 3)
    weights: np.ndarray  # (M, B) row-stochastic
    vertex_ids: np.ndarray  # (M, 3) int32
    barycentrics: np.ndarray  # (M, 3)


@dataclass(frozen=True)
class CanonicalAvatar:
    """Rest-pose Gaussian set anchored to upsampled template surface points."""

    anchors: np.ndarray  # (M, 3) meters
    anchor_weights: np.ndarray  # (M, B)
    offsets: np.ndarray  # (M, 3) meters
    log_scales: np.ndarray  # (M, 3) log std-dev, meters
    rotations: np.ndarray  # (M, 4) unit quaternions wxyz
    opacity_logits: np.ndarray  # (M,)
    colors: np.ndarray  # (M, 3) RGB, stored unclamped
    vertex_ids: np.ndarray  # (M, 3) int32 provenance
    barycentrics: np.ndarray  # (M, 3) provenance
    template_crc: int

    @property
    def count(self) -> int:
        return self.anchors.shape[0]

    def centers(self) -> np.ndarray:
        """Gaussian centers mu = anchor + offset."""
        return self.anchors + self.offsets

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def covariances(self) -> np.ndarray:
        """(M, 3, 3) covariance R diag(exp(2 * log_scales)) R^T, PD by construction."""
        R = quat_to_matrix(self.rotations)
        D = np.exp(2.0 * self.log_scales)
        return np.einsum("mij,mj,mkj->mik", R, D, R)

    def validate(self) -> None:
        M = self.count
        for name in ("offsets", "log_scales", "colors"):
            if getattr(self, name).shape != (M, 3):
                raise ValueError(f"{name} must have shape (M, 3)")
        if self.rotations.shape != (M, 4):
            raise ValueError("rotations must have shape (M, 4)")
        if np.any(np.abs(np.linalg.norm(self.rotations, axis=1) - 1.0) > 1e-6):
            raise ValueError("rotations must be unit quaternions")
        row = self.anchor_weights.sum(axis=1)
        if np.any(np.abs(row - 1.0) > 1e-6) or np.any(self.anchor_weights < -1e-12):
            raise ValueError("anchor weights must be row-stochastic")


@dataclass(frozen=True)
class AvatarResiduals:
    """Additive deltas on every avatar attribute; rotations live in the tangent."""

    offsets: np.ndarray  # (M, 3)
    log_scales: np.ndarray  # (M, 3)
    rotations_tangent: np.ndarray  # (M, 3) axis-angle around current rotation
    opacity_logits: np.ndarray  # (M,)
    colors: np.ndarray  # (M, 3)

    @staticmethod
    def zeros(M: int) -> "AvatarResiduals":
        return AvatarResiduals(
            offsets=np.zeros((M, 3)),
            log_scales=np.zeros((M, 3)),
            rotations_tangent=np.zeros((M, 3)),
            opacity_logits=np.zeros(M),
            colors=np.zeros((M, 3)),
        )

    def negated(self) -> "AvatarResiduals":
        return AvatarResiduals(
            offsets=-self.offsets,
            log_scales=-self.log_scales,
            rotations_tangent=-self.rotations_tangent,
            opacity_logits=-self.opacity_logits,
            colors=-self.colors,
        )

    def max_abs(self) -> float:
        return max(
            float(np.max(np.abs(a))) if a.size else 0.0
            for a in (self.offsets, self.log_scales, self.rotations_tangent, self.opacity_logits, self.colors)
        )


def upsample_anchors(template: HeadTemplate, target_M: int, seed: int) -> AnchorSet:
    """Upsample template vertices to target_M surface points.

    The original V vertices are kept; extra points are sampled uniformly by
    triangle area with recorded barycentrics.  Anchor skinning weights are
    barycentric interpolations of vertex weights, re-normalized.
    """
    V = template.num_vertices
    if target_M < V:
        raise ValueError(f"target_M must be >= V ({V})")
    verts = template.vertices
    ids = np.repeat(np.arange(V, dtype=np.int32)[:, None], 3, axis=1)
    bary = np.zeros((V, 3))
    bary[:, 0] = 1.0

    extra = target_M - V
    if extra > 0:
        tri = verts[template.faces.astype(int)]  # (F, 3, 3)
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        areas = 0.5 * np.linalg.norm(cross, axis=1)
        total = areas.sum()
        if total <= 0:
            raise ValueError("mesh has zero surface area")
        rng = np.random.default_rng(seed)
        face_idx = rng.choice(len(areas), size=extra, p=areas / total)
        u = rng.random((extra, 2))
        r1 = np.sqrt(u[:, 0])
        b = np.stack([1.0 - r1, r1 * (1.0 - u[:, 1]), r1 * u[:, 1]], axis=1)
        corner_ids = template.faces.astype(np.int32)[face_idx]
        ids = np.concatenate([ids, corner_ids], axis=0)
        bary = np.concatenate([bary, b], axis=0)

    anchors = np.einsum("mj,mji->mi", bary, verts[ids.astype(int)])
    weights = np.einsum("mj,mjb->mb", bary, template.skinning_weights[ids.astype(int)])
    weights /= weights.sum(axis=1, keepdims=True)
    return AnchorSet(anchors=anchors, weights=weights, vertex_ids=ids, barycentrics=bary)


def init_avatar(anchor_set: AnchorSet, template: HeadTemplate) -> CanonicalAvatar:
    """Neutral avatar: zero offsets, isotropic scales from local point spacing,
    identity rotations, opacity 0.5, mid-gray color."""
    anchors = anchor_set.anchors
    M = anchors.shape[0]
    if M < 4:
        raise ValueError("need at least 4 anchors")

    tree = cKDTree(anchors)
    k = min(M, 16)
    dists, _ = tree.query(anchors, k=k)
    dists = dists[:, 1:]  # drop self
    positive = np.where(dists > 1e-12, dists, np.nan)
    nearest3 = np.sort(positive, axis=1)[:, :3]
    mean_dist = np.nanmean(nearest3, axis=1)
    fallback = np.nanmean(mean_dist)
    if not np.isfinite(fallback) or fallback <= 0:
        fallback = 1e-3
    mean_dist = np.where(np.isfinite(mean_dist) & (mean_dist > 0), mean_dist, fallback)
    log_scales = np.log(np.repeat((0.5 * mean_dist)[:, None], 3, axis=1))

    rotations = np.zeros((M, 4))
    rotations[:, 0] = 1.0
    avatar = CanonicalAvatar(
        anchors=anchors,
        anchor_weights=anchor_set.weights,
        offsets=np.zeros((M, 3)),
        log_scales=log_scales,
        rotations=rotations,
        opacity_logits=np.zeros(M),
        colors=np.full((M, 3), 0.5),
        vertex_ids=anchor_set.vertex_ids,
        barycentrics=anchor_set.barycentrics,
        template_crc=template.checksum(),
    )
    avatar.validate()
    return avatar


def apply_residuals(avatar: CanonicalAvatar, delta: AvatarResiduals) -> CanonicalAvatar:
    """Attribute-wise addition; rotation deltas compose in the tangent space."""
    M = avatar.count
    if delta.offsets.shape != (M, 3) or delta.opacity_logits.shape != (M,):
        raise ValueError("residual shapes do not match the avatar")
    dq = quat_from_axis_angle(delta.rotations_tangent)
    rotations = quat_normalize(quat_multiply(avatar.rotations, dq))
    out = CanonicalAvatar(
        anchors=avatar.anchors,
        anchor_weights=avatar.anchor_weights,
        offsets=avatar.offsets + delta.offsets,
        log_scales=avatar.log_scales + delta.log_scales,
        rotations=rotations,
        opacity_logits=avatar.opacity_logits + delta.opacity_logits,
        colors=avatar.colors + delta.colors,
        vertex_ids=avatar.vertex_ids,
        barycentrics=avatar.barycentrics,
        template_crc=avatar.template_crc,
    )
    cache = avatar.__dict__.get("_interp_cache")
    if cache is not None:  # provenance is unchanged, so interpolations carry over
        object.__setattr__(out, "_interp_cache", cache)
    return out


def interpolate_vertex_attribute(
    avatar: CanonicalAvatar, attribute: np.ndarray, cache_key: str | None = None
) -> np.ndarray:
    """Pull a per-vertex template array (V, ...) onto anchors via provenance.

    Provenance is immutable, so results may be memoized under cache_key (the
    cache rides along through apply_residuals).
    """
    if cache_key is not None:
        cache = avatar.__dict__.get("_interp_cache")
        if cache is not None and cache_key in cache:
            return cache[cache_key]
    gathered = attribute[avatar.vertex_ids.astype(int)]  # (M, 3, ...)
    bary = avatar.barycentrics.reshape(avatar.count, 3, *([1] * (attribute.ndim - 1)))
    out = (gathered * bary).sum(axis=1)
    if cache_key is not None:
        cache = avatar.__dict__.get("_interp_cache")
        if cache is None:
            cache = {}
            object.__setattr__(avatar, "_interp_cache", cache)
        cache[cache_key] = out
    return out
