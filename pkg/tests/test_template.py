import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from headsplat import (
    FlameParams,
    bone_transforms,
    generate_synthetic_template,
    lbs_deform,
    shape_vertices,
)
from headsplat.rotations import rodrigues
from headsplat.template import bone_transform_derivatives, corrective_features


def fk_oracle(template, params):
    """Independent forward kinematics: naive 4x4 matrix chains."""

    def mat4(R, t):
        out = np.eye(4)
        out[:3, :3] = R
        out[:3, 3] = t
        return out

    B = template.num_bones
    world = [None] * B
    world[0] = mat4(rodrigues(params.head_rotation), params.head_translation)
    for b in range(1, B):
        j = template.bone_rest[b]
        R = rodrigues(params.articulation[b - 1])
        local = mat4(R, j - R @ j)
        world[b] = world[template.bone_parents[b]] @ local
    return np.stack([w[:3, :] for w in world])


def lbs_oracle(vertices, weights, transforms):
    """Per-vertex double loop: blend 3x4 entries, then apply."""
    out = np.zeros_like(vertices)
    for v in range(len(vertices)):
        blended = np.zeros((3, 4))
        for b in range(weights.shape[1]):
            blended += weights[v, b] * transforms[b]
        out[v] = blended[:, :3] @ vertices[v] + blended[:, 3]
    return out


class TestSyntheticTemplate:
    def test_deterministic_per_seed(self):
        a = generate_synthetic_template(seed=7, V=642, K_id=4, K_expr=8, B=4)
        b = generate_synthetic_template(seed=7, V=642, K_id=4, K_expr=8, B=4)
        assert np.array_equal(a.vertices, b.vertices)
        assert np.array_equal(a.expression_basis, b.expression_basis)
        assert np.array_equal(a.skinning_weights, b.skinning_weights)

    def test_seed_changes_output(self):
        a = generate_synthetic_template(seed=7, V=642, K_id=4, K_expr=8, B=4)
        b = generate_synthetic_template(seed=8, V=642, K_id=4, K_expr=8, B=4)
        assert not np.array_equal(a.vertices, b.vertices)

    def test_weights_row_stochastic(self, template):
        sums = template.skinning_weights.sum(axis=1)
        assert np.all(template.skinning_weights >= 0)
        assert np.max(np.abs(sums - 1.0)) <= 1e-6

    def test_zero_counts_rejected(self):
        with pytest.raises(ValueError):
            generate_synthetic_template(seed=0, V=0, K_id=4, K_expr=8, B=4)
        with pytest.raises(ValueError):
            generate_synthetic_template(seed=0, V=64, K_id=4, K_expr=8, B=1)

    def test_blendshape_amplitude_bounded(self, template):
        for k in range(template.num_expression):
            norms = np.linalg.norm(template.expression_basis[:, :, k], axis=1)
            assert norms.max() <= 0.05 + 1e-12


class TestShapeVertices:
    def test_zero_coefficients_identity(self, template):
        out = shape_vertices(template, np.zeros(4), np.zeros(8))
        assert np.array_equal(out, template.vertices)

    def test_one_hot_expression_is_basis_column(self, template):
        psi = np.zeros(8)
        psi[3] = 1.0
        out = shape_vertices(template, np.zeros(4), psi)
        assert np.allclose(out - template.vertices, template.expression_basis[:, :, 3])

    def test_superposition(self, template):
        rng = np.random.default_rng(0)
        beta = rng.normal(size=4)
        psi1, psi2 = rng.normal(size=8), rng.normal(size=8)
        lhs = shape_vertices(template, beta, psi1 + psi2)
        rhs = shape_vertices(template, beta, psi1) + template.expression_basis @ psi2
        assert np.max(np.abs(lhs - rhs)) < 1e-6

    def test_dimension_mismatch(self, template):
        with pytest.raises(ValueError):
            shape_vertices(template, np.zeros(3), np.zeros(8))
        with pytest.raises(ValueError):
            shape_vertices(template, np.zeros(4), np.zeros(9))


class TestBoneTransforms:
    def test_rest_pose_identity(self, template, rest_params):
        A = bone_transforms(template, rest_params)
        for b in range(template.num_bones):
            assert np.allclose(A[b, :, :3], np.eye(3), atol=1e-12)
            assert np.allclose(A[b, :, 3], 0.0, atol=1e-12)

    def test_pure_translation_propagates(self, template, rest_params):
        t = np.array([0.02, -0.01, 0.3])
        params = rest_params.perturbed(head_translation=t)
        A = bone_transforms(template, params)
        for b in range(template.num_bones):
            assert np.allclose(A[b, :, :3], np.eye(3), atol=1e-12)
            assert np.allclose(A[b, :, 3], t, atol=1e-12)

    def test_jaw_rotation_matches_matrix_chain_oracle(self, template, rest_params):
        artic = np.zeros((3, 3))
        artic[0] = [0.3, 0.0, 0.0]  # jaw is joint index 1 = articulation row 0
        params = rest_params.perturbed(articulation=artic)
        A = bone_transforms(template, params)
        oracle = fk_oracle(template, params)
        assert np.max(np.abs(A - oracle)) < 1e-12
        # rotation about the jaw pivot: the pivot itself stays fixed
        jaw = 1
        pivot = template.bone_rest[jaw]
        assert np.allclose(A[jaw, :, :3] @ pivot + A[jaw, :, 3], pivot, atol=1e-12)

    def test_random_configs_match_oracle(self, template):
        rng = np.random.default_rng(5)
        for _ in range(10):
            params = FlameParams(
                expression=np.zeros(8),
                articulation=rng.normal(size=(3, 3)) * 0.4,
                head_rotation=rng.normal(size=3) * 0.5,
                head_translation=rng.normal(size=3) * 0.2,
            )
            A = bone_transforms(template, params)
            assert np.max(np.abs(A - fk_oracle(template, params))) < 1e-10

    def test_articulation_out_of_range(self, template, rest_params):
        bad = np.zeros((3, 3))
        bad[1] = [np.pi, 0.1, 0.0]
        with pytest.raises(ValueError):
            bone_transforms(template, rest_params.perturbed(articulation=bad))

    def test_derivatives_match_finite_differences(self, template):
        rng = np.random.default_rng(2)
        params = FlameParams(
            expression=np.zeros(8),
            articulation=rng.normal(size=(3, 3)) * 0.3,
            head_rotation=rng.normal(size=3) * 0.3,
            head_translation=rng.normal(size=3) * 0.1,
        )
        A, dA_theta, dA_head = bone_transform_derivatives(template, params)
        h = 1e-6
        for j in range(3):
            for k in range(3):
                d = np.zeros((3, 3))
                d[j, k] = h
                Ap = bone_transforms(template, params.perturbed(articulation=d))
                Am = bone_transforms(template, params.perturbed(articulation=-d))
                assert np.max(np.abs(dA_theta[j, k] - (Ap - Am) / (2 * h))) < 1e-6
        for k in range(3):
            d = np.zeros(3)
            d[k] = h
            Ap = bone_transforms(template, params.perturbed(head_rotation=d))
            Am = bone_transforms(template, params.perturbed(head_rotation=-d))
            assert np.max(np.abs(dA_head[k] - (Ap - Am) / (2 * h))) < 1e-6


class TestLbsDeform:
    def test_identity_transforms(self, template):
        B = template.num_bones
        eye = np.tile(np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1), (B, 1, 1))
        out = lbs_deform(template.vertices, template.skinning_weights, eye)
        assert np.allclose(out, template.vertices, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_rigid_invariance(self, template, seed):
        rng = np.random.default_rng(seed)
        R = rodrigues(rng.normal(size=3))
        t = rng.normal(size=3) * 0.3
        T = np.tile(np.concatenate([R, t[:, None]], axis=1), (template.num_bones, 1, 1))
        out = lbs_deform(template.vertices, template.skinning_weights, T)
        expected = template.vertices @ R.T + t
        assert np.max(np.abs(out - expected)) < 1e-7

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(9)
        verts = rng.normal(size=(10, 3))
        w = rng.random((10, 4))
        w /= w.sum(axis=1, keepdims=True)
        transforms = np.stack(
            [np.concatenate([rodrigues(rng.normal(size=3)), rng.normal(size=(3, 1))], axis=1) for _ in range(4)]
        )
        out = lbs_deform(verts, w, transforms)
        assert np.max(np.abs(out - lbs_oracle(verts, w, transforms))) < 1e-7

    def test_rejects_non_stochastic_weights(self, template):
        B = template.num_bones
        eye = np.tile(np.concatenate([np.eye(3), np.zeros((3, 1))], axis=1), (B, 1, 1))
        bad = template.skinning_weights * 2.0
        with pytest.raises(ValueError):
            lbs_deform(template.vertices, bad, eye)


def test_corrective_features_zero_at_rest():
    assert np.array_equal(corrective_features(np.zeros((3, 3))), np.zeros(18))
    feats = corrective_features(np.full((1, 3), 0.4))
    assert np.allclose(feats[:3], np.sin(0.4))
    assert np.allclose(feats[3:], 1 - np.cos(0.4))
