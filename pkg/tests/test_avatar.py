import dataclasses

import numpy as np
import pytest

from headsplat import (
    AvatarResiduals,
    apply_residuals,
    generate_synthetic_template,
    init_avatar,
    upsample_anchors,
)
from headsplat.rotations import quat_to_matrix


class TestUpsampleAnchors:
    def test_identity_when_target_equals_v(self, template):
        out = upsample_anchors(template, template.num_vertices, seed=0)
        assert np.array_equal(out.anchors, template.vertices)
        assert np.array_equal(out.vertex_ids[:, 0], np.arange(template.num_vertices))
        assert np.allclose(out.barycentrics, np.tile([1.0, 0.0, 0.0], (template.num_vertices, 1)))

    def test_80k_from_5023_vertex_template(self):
        # the production configuration: 5,023 template vertices upsampled to 80K
        big = generate_synthetic_template(seed=0, V=5023, K_id=4, K_expr=8, B=4)
        out = upsample_anchors(big, 80000, seed=0)
        assert out.anchors.shape == (80000, 3)
        sums = out.weights.sum(axis=1)
        assert np.max(np.abs(sums - 1.0)) <= 1e-6

    def test_barycentrics_inside_source_triangle(self, template):
        out = upsample_anchors(template, 5000, seed=3)
        assert np.all(out.barycentrics >= 0)
        assert np.allclose(out.barycentrics.sum(axis=1), 1.0)
        # sampled anchors actually lie at the barycentric combination
        verts = template.vertices[out.vertex_ids.astype(int)]
        recon = np.einsum("mj,mji->mi", out.barycentrics, verts)
        assert np.allclose(recon, out.anchors)

    def test_too_few_targets_rejected(self, template):
        with pytest.raises(ValueError):
            upsample_anchors(template, template.num_vertices - 1, seed=0)

    def test_degenerate_mesh_rejected(self, template):
        flat = dataclasses.replace(template, vertices=np.zeros_like(template.vertices))
        with pytest.raises(ValueError):
            upsample_anchors(flat, 2 * template.num_vertices, seed=0)

    def test_deterministic(self, template):
        a = upsample_anchors(template, 3000, seed=5)
        b = upsample_anchors(template, 3000, seed=5)
        assert np.array_equal(a.anchors, b.anchors)
        assert np.array_equal(a.vertex_ids, b.vertex_ids)


class TestInitAvatar:
    def test_centers_equal_anchors(self, template):
        out = init_avatar(upsample_anchors(template, 2000, seed=1), template)
        assert np.array_equal(out.centers(), out.anchors)
        assert np.all(out.offsets == 0)

    def test_opacity_is_half(self, template):
        out = init_avatar(upsample_anchors(template, 1000, seed=1), template)
        assert np.allclose(out.opacities(), 0.5)
        assert np.allclose(out.colors, 0.5)

    def test_coincident_anchors_get_finite_scale(self, template):
        anchors = upsample_anchors(template, 1000, seed=1)
        dup = anchors.anchors.copy()
        dup[1] = dup[0]  # exact duplicate pair
        out = init_avatar(anchors._replace(anchors=dup), template)
        assert np.all(np.isfinite(out.log_scales))
        assert np.all(np.exp(out.log_scales) > 0)

    def test_deterministic(self, template):
        anchors = upsample_anchors(template, 1000, seed=2)
        a = init_avatar(anchors, template)
        b = init_avatar(anchors, template)
        assert np.array_equal(a.log_scales, b.log_scales)

    def test_too_few_anchors(self, template):
        anchors = upsample_anchors(template, template.num_vertices, seed=0)
        tiny = anchors._replace(
            anchors=anchors.anchors[:3],
            weights=anchors.weights[:3],
            vertex_ids=anchors.vertex_ids[:3],
            barycentrics=anchors.barycentrics[:3],
        )
        with pytest.raises(ValueError):
            init_avatar(tiny, template)


class TestResiduals:
    def test_zero_residual_is_identity(self, avatar):
        out = apply_residuals(avatar, AvatarResiduals.zeros(avatar.count))
        assert np.allclose(out.offsets, avatar.offsets)
        assert np.allclose(out.rotations, avatar.rotations, atol=1e-12)
        assert np.allclose(out.colors, avatar.colors)

    def test_small_delta_roundtrip(self, avatar):
        rng = np.random.default_rng(3)
        M = avatar.count
        delta = AvatarResiduals(
            offsets=rng.normal(size=(M, 3)) * 1e-3,
            log_scales=rng.normal(size=(M, 3)) * 1e-3,
            rotations_tangent=rng.normal(size=(M, 3)) * 3e-3,  # norm < 1e-2
            opacity_logits=rng.normal(size=M) * 1e-3,
            colors=rng.normal(size=(M, 3)) * 1e-3,
        )
        back = apply_residuals(apply_residuals(avatar, delta), delta.negated())
        assert np.max(np.abs(back.offsets - avatar.offsets)) < 1e-5
        assert np.max(np.abs(back.rotations - avatar.rotations)) < 1e-5
        assert np.max(np.abs(back.opacity_logits - avatar.opacity_logits)) < 1e-5

    def test_offset_delta_shifts_centers_exactly(self, avatar):
        rng = np.random.default_rng(4)
        d = rng.normal(size=(avatar.count, 3)) * 0.01
        delta = AvatarResiduals.zeros(avatar.count)
        out = apply_residuals(avatar, dataclasses.replace(delta, offsets=d))
        assert np.array_equal(out.centers(), avatar.centers() + d)

    def test_shape_mismatch_rejected(self, avatar):
        with pytest.raises(ValueError):
            apply_residuals(avatar, AvatarResiduals.zeros(avatar.count + 1))

    def test_covariances_stay_positive_definite(self, avatar):
        rng = np.random.default_rng(5)
        M = avatar.count
        delta = AvatarResiduals(
            offsets=rng.normal(size=(M, 3)),
            log_scales=rng.normal(size=(M, 3)) * 2.0,
            rotations_tangent=rng.normal(size=(M, 3)) * 2.0,
            opacity_logits=rng.normal(size=M) * 5.0,
            colors=rng.normal(size=(M, 3)),
        )
        out = apply_residuals(avatar, delta)
        cov = out.covariances()
        sample = rng.choice(M, size=64, replace=False)
        eigs = np.linalg.eigvalsh(cov[sample])
        assert np.all(eigs > 0)
        assert np.all((out.opacities() > 0) & (out.opacities() < 1))
        # rotations stay unit
        assert np.max(np.abs(np.linalg.norm(out.rotations, axis=1) - 1.0)) < 1e-9

    def test_rotation_composition_matches_matrix_product(self, avatar):
        rng = np.random.default_rng(6)
        tangent = rng.normal(size=(avatar.count, 3)) * 0.3
        delta = dataclasses.replace(AvatarResiduals.zeros(avatar.count), rotations_tangent=tangent)
        out = apply_residuals(avatar, delta)
        from headsplat.rotations import rodrigues

        expected = quat_to_matrix(avatar.rotations) @ rodrigues(tangent)
        assert np.max(np.abs(quat_to_matrix(out.rotations) - expected)) < 1e-9
