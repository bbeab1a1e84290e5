"""Parametric head template: blendshapes, forward kinematics, linear blend skinning.

The template mirrors the structure of FLAME-style head models (identity /
expression blendshape bases, articulated bones, per-vertex skinning weights)
but is generated synthetically so the engine runs without licensed assets.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import ConvexHull

from .rotations import rodrigues, rodrigues_jacobian

DEFAULT_HEAD_RADIUS = 0.1  # meters; synthetic heads are built at this scale

# Named rest positions for the default four-joint rig, in units of head radius.
# Bone 0 is the root and carries the global head pose.
_CANONICAL_BONES = [
    ("neck", (0.0, -0.4, 0.0)),
    ("jaw", (0.0, -0.35, 0.45)),
    ("eye_l", (-0.35, 0.25, 0.65)),
    ("eye_r", (0.35, 0.25, 0.65)),
]


@dataclass(frozen=True)
class HeadTemplate:
    """Canonical head mesh with blendshape bases and a skinned bone tree."""

    vertices: np.ndarray  # (V, 3) meters
    identity_basis: np.ndarray  # (V, 3, K_id)
    expression_basis: np.ndarray  # (V, 3, K_expr)
    articulation_corrective: np.ndarray  # (V, 3, K_art)
    bone_rest: np.ndarray  # (B, 3) rest joint positions, meters
    bone_parents: np.ndarray  # (B,) int32, parent index, root = -1
    skinning_weights: np.ndarray  # (V, B) row-stochastic
    faces: np.ndarray  # (F, 3) uint32 triangle indices

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_bones(self) -> int:
        return self.bone_rest.shape[0]

    @property
    def num_identity(self) -> int:
        return self.identity_basis.shape[2]

    @property
    def num_expression(self) -> int:
        return self.expression_basis.shape[2]

    @property
    def num_corrective(self) -> int:
        return self.articulation_corrective.shape[2]

    def validate(self) -> None:
        V = self.num_vertices
        if self.identity_basis.shape[0] != V or self.expression_basis.shape[0] != V:
            raise ValueError("blendshape bases must share the vertex dimension")
        if self.articulation_corrective.shape[0] != V:
            raise ValueError("articulation correctives must share the vertex dimension")
        if self.skinning_weights.shape != (V, self.num_bones):
            raise ValueError("skinning weights must be V x B")
        row_sums = self.skinning_weights.sum(axis=1)
        if np.any(self.skinning_weights < -1e-12) or np.any(np.abs(row_sums - 1.0) > 1e-6):
            raise ValueError("skinning weight rows must be non-negative and sum to 1")
        parents = self.bone_parents
        if parents[0] != -1:
            raise ValueError("bone 0 must be the root (parent -1)")
        if np.any(parents[1:] < 0) or np.any(parents[1:] >= np.arange(1, self.num_bones)):
            raise ValueError("bone parents must form a tree with parent index < child index")

    def checksum(self) -> int:
        """CRC32 over the binary payload of the on-disk format (cached)."""
        from . import fileio

        cached = self.__dict__.get("_checksum")
        if cached is None:
            cached = fileio.template_checksum(self)
            object.__setattr__(self, "_checksum", cached)
        return cached

    def has_correctives(self) -> bool:
        """True if any pose-corrective amplitude is nonzero (cached)."""
        cached = self.__dict__.get("_has_correctives")
        if cached is None:
            cached = bool(np.any(self.articulation_corrective))
            object.__setattr__(self, "_has_correctives", cached)
        return cached


@dataclass(frozen=True)
class FlameParams:
    """One frame's driving coefficients: expression, articulation, head pose."""

    expression: np.ndarray  # (K_expr,)
    articulation: np.ndarray  # (B-1, 3) axis-angle per non-root joint, radians
    head_rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))  # axis-angle
    head_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))  # meters

    def validate(self) -> None:
        for name in ("expression", "articulation", "head_rotation", "head_translation"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
        norms = np.linalg.norm(np.atleast_2d(self.articulation), axis=-1)
        if self.articulation.size and np.any(norms >= np.pi):
            raise ValueError("articulation axis-angle norms must stay below pi")

    @staticmethod
    def rest(template: HeadTemplate) -> "FlameParams":
        return FlameParams(
            expression=np.zeros(template.num_expression),
            articulation=np.zeros((template.num_bones - 1, 3)),
        )

    @staticmethod
    def viewing(template: HeadTemplate, distance: float = 1.0) -> "FlameParams":
        """Rest coefficients with the head placed at the normalized camera
        distance (the canonical starting point for photometric fitting)."""
        return FlameParams(
            expression=np.zeros(template.num_expression),
            articulation=np.zeros((template.num_bones - 1, 3)),
            head_translation=np.array([0.0, 0.0, -distance]),
        )

    def perturbed(self, **deltas: np.ndarray) -> "FlameParams":
        updates = {name: getattr(self, name) + np.asarray(d, dtype=float) for name, d in deltas.items()}
        return replace(self, **updates)


def _fibonacci_sphere(n: int) -> np.ndarray:
    """n roughly-uniform unit directions (golden-angle spiral)."""
    i = np.arange(n, dtype=float)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    y = 1.0 - 2.0 * (i + 0.5) / n
    rad = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    return np.stack([rad * np.cos(phi), y, rad * np.sin(phi)], axis=1)


def _smooth_field(dirs: np.ndarray, rng: np.random.Generator, n_bumps: int = 6) -> np.ndarray:
    """Low-frequency scalar field over unit directions, roughly in [-1, 1]."""
    centers = rng.normal(size=(n_bumps, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    amps = rng.uniform(-1.0, 1.0, size=n_bumps)
    widths = rng.uniform(0.5, 1.2, size=n_bumps)
    d2 = np.sum((dirs[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    field = (amps * np.exp(-d2 / (2.0 * widths**2))).sum(axis=1)
    peak = np.max(np.abs(field))
    return field / peak if peak > 0 else field


def _smooth_vector_field(dirs: np.ndarray, rng: np.random.Generator, amplitude: float) -> np.ndarray:
    """Smooth bounded displacement field (V, 3) with max norm <= amplitude."""
    disp = np.stack([_smooth_field(dirs, rng) for _ in range(3)], axis=1)
    norms = np.linalg.norm(disp, axis=1)
    peak = norms.max()
    if peak > 0:
        disp *= amplitude / peak
    return disp


def generate_synthetic_template(
    seed: int, V: int = 642, K_id: int = 4, K_expr: int = 8, B: int = 4
) -> HeadTemplate:
    """Deterministic synthetic head: deformed icosphere-like mesh with smooth
    random blendshape fields and inverse-distance skinning weights.

    Blendshape displacement amplitude is bounded by 0.05 m per unit coefficient.
    Articulation correctives are allocated (6 per non-root joint, keyed on
    sin / 1-cos of joint angle components) but default to zero amplitude.
    """
    if V < 4 or B < 2 or K_id < 1 or K_expr < 1:
        raise ValueError("counts must be positive (V >= 4, B >= 2)")
    rng = np.random.default_rng(seed)

    dirs = _fibonacci_sphere(V)
    radius = DEFAULT_HEAD_RADIUS * (1.0 + 0.15 * _smooth_field(dirs, rng))
    vertices = dirs * radius[:, None]

    hull = ConvexHull(dirs)
    faces = hull.simplices.astype(np.uint32)
    # orient all triangles outward (consistent winding)
    tri = dirs[faces]
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    flip = np.einsum("fi,fi->f", normals, tri.mean(axis=1)) < 0
    faces[flip] = faces[flip][:, ::-1]

    identity_basis = np.stack(
        [_smooth_vector_field(dirs, rng, amplitude=0.04) for _ in range(K_id)], axis=2
    )
    expression_basis = np.stack(
        [_smooth_vector_field(dirs, rng, amplitude=0.04) for _ in range(K_expr)], axis=2
    )
    K_art = 6 * (B - 1)
    articulation_corrective = np.zeros((V, 3, K_art))

    bone_rest = np.zeros((B, 3))
    parents = np.full(B, -1, dtype=np.int32)
    for b in range(B):
        if b < len(_CANONICAL_BONES):
            bone_rest[b] = np.asarray(_CANONICAL_BONES[b][1]) * DEFAULT_HEAD_RADIUS
        else:
            bone_rest[b] = rng.uniform(-0.6, 0.6, size=3) * DEFAULT_HEAD_RADIUS
        if b > 0:
            parents[b] = 0 if b < len(_CANONICAL_BONES) else int(rng.integers(0, b))

    d = np.linalg.norm(vertices[:, None, :] - bone_rest[None, :, :], axis=2)
    # sharp falloff keeps joint influence localized (identifiable articulation)
    w = 1.0 / (d + 1e-3) ** 4
    skinning_weights = w / w.sum(axis=1, keepdims=True)

    template = HeadTemplate(
        vertices=vertices,
        identity_basis=identity_basis,
        expression_basis=expression_basis,
        articulation_corrective=articulation_corrective,
        bone_rest=bone_rest,
        bone_parents=parents,
        skinning_weights=skinning_weights,
        faces=faces,
    )
    template.validate()
    return template


def shape_vertices(template: HeadTemplate, beta: np.ndarray, psi: np.ndarray) -> np.ndarray:
    """Linear blendshape evaluation: vertices + identity_basis @ beta + expression_basis @ psi."""
    beta = np.asarray(beta, dtype=float)
    psi = np.asarray(psi, dtype=float)
    if beta.shape != (template.num_identity,):
        raise ValueError(f"beta must have length {template.num_identity}")
    if psi.shape != (template.num_expression,):
        raise ValueError(f"psi must have length {template.num_expression}")
    return (
        template.vertices
        + template.identity_basis @ beta
        + template.expression_basis @ psi
    )


def corrective_features(articulation: np.ndarray) -> np.ndarray:
    """Pose-corrective activation vector: per joint [sin(t), 1-cos(t)] per component.

    Zero articulation maps to the zero vector, so rest-pose neutrality holds.
    """
    t = np.asarray(articulation, dtype=float).reshape(-1)
    return np.concatenate([np.sin(t), 1.0 - np.cos(t)])


def corrective_feature_jacobian(articulation: np.ndarray) -> np.ndarray:
    """d corrective_features / d articulation-component, shape (K_art, 3*(B-1))."""
    t = np.asarray(articulation, dtype=float).reshape(-1)
    n = t.size
    jac = np.zeros((2 * n, n))
    jac[:n, :] = np.diag(np.cos(t))
    jac[n:, :] = np.diag(np.sin(t))
    return jac


def _compose(Ra, ta, Rb, tb):
    """(Ra, ta) o (Rb, tb): x -> Ra (Rb x + tb) + ta."""
    return Ra @ Rb, Ra @ tb + ta


def bone_transforms(template: HeadTemplate, params: FlameParams) -> np.ndarray:
    """Forward kinematics: per-bone rigid transforms (B, 3, 4) relative to rest.

    The root transform is the head pose x -> R_h x + t_h; each non-root joint
    rotates about its rest position and composes onto its parent, so zero
    rotations with an identity head pose give identity transforms everywhere.
    """
    params.validate()
    B = template.num_bones
    if params.articulation.shape != (B - 1, 3):
        raise ValueError(f"articulation must have shape ({B - 1}, 3)")
    if params.expression.shape != (template.num_expression,):
        raise ValueError(f"expression must have length {template.num_expression}")
    out = np.empty((B, 3, 4))
    out[0, :, :3] = rodrigues(params.head_rotation)
    out[0, :, 3] = params.head_translation
    joint_rot = rodrigues(params.articulation)
    for b in range(1, B):
        j = template.bone_rest[b]
        Rl = joint_rot[b - 1]
        tl = j - Rl @ j
        p = template.bone_parents[b]
        out[b, :, :3], out[b, :, 3] = _compose(out[p, :, :3], out[p, :, 3], Rl, tl)
    return out


def bone_transform_derivatives(
    template: HeadTemplate, params: FlameParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """FK values plus per-rotation-parameter derivative transforms.

    Returns (A, dA_theta, dA_head) with A (B, 3, 4),
    dA_theta (B-1, 3, B, 3, 4) for the articulation components, and
    dA_head (3, B, 3, 4) for the head-rotation components.  Derivatives
    w.r.t. head translation are the identity on the translation column for
    every bone and are not materialized.
    """
    B = template.num_bones
    A = bone_transforms(template, params)
    joint_rot = rodrigues(params.articulation)
    dR_head = rodrigues_jacobian(params.head_rotation)  # (3,3,3) -> [..., k]
    dR_joint = rodrigues_jacobian(params.articulation)  # (B-1,3,3,3)

    # locals L_b for re-use when propagating derivatives down the tree
    Rl = np.empty((B, 3, 3))
    tl = np.empty((B, 3))
    for b in range(1, B):
        j = template.bone_rest[b]
        Rl[b] = joint_rot[b - 1]
        tl[b] = j - Rl[b] @ j

    dA_head = np.zeros((3, B, 3, 4))
    for k in range(3):
        dA_head[k, 0, :, :3] = dR_head[:, :, k]
        for b in range(1, B):
            p = template.bone_parents[b]
            dA_head[k, b, :, :3], dA_head[k, b, :, 3] = _compose(
                dA_head[k, p, :, :3], dA_head[k, p, :, 3], Rl[b], tl[b]
            )

    dA_theta = np.zeros((B - 1, 3, B, 3, 4))
    for j_idx in range(1, B):
        jpos = template.bone_rest[j_idx]
        parent = template.bone_parents[j_idx]
        for k in range(3):
            dRl = dR_joint[j_idx - 1, :, :, k]
            dtl = -dRl @ jpos
            dA = dA_theta[j_idx - 1, k]
            # seed: d(A_parent o L_j) with A_parent constant — no parent translation term
            dA[j_idx, :, :3] = A[parent, :, :3] @ dRl
            dA[j_idx, :, 3] = A[parent, :, :3] @ dtl
            for b in range(j_idx + 1, B):
                p = template.bone_parents[b]
                if np.any(dA[p]):
                    dA[b, :, :3], dA[b, :, 3] = _compose(dA[p, :, :3], dA[p, :, 3], Rl[b], tl[b])
    return A, dA_theta, dA_head


def lbs_deform(vertices: np.ndarray, weights: np.ndarray, transforms: np.ndarray) -> np.ndarray:
    """Linear blend skinning: blend the 3x4 transform entries, then apply.

    vertices (N, 3), weights (N, B) row-stochastic, transforms (B, 3, 4).
    """
    vertices = np.asarray(vertices, dtype=float)
    weights = np.asarray(weights, dtype=float)
    transforms = np.asarray(transforms, dtype=float)
    if weights.shape[0] != vertices.shape[0] or weights.shape[1] != transforms.shape[0]:
        raise ValueError("vertex / weight / transform dimensions disagree")
    row_sums = weights.sum(axis=1)
    if np.any(weights < -1e-12) or np.any(np.abs(row_sums - 1.0) > 1e-6):
        raise ValueError("weights must be row-stochastic")
    blended = np.einsum("nb,bij->nij", weights, transforms)
    return np.einsum("nij,nj->ni", blended[:, :, :3], vertices) + blended[:, :, 3]
