import dataclasses
import math

import numpy as np
import pytest

from headsplat import (
    AdamState,
    DivergedError,
    FlameParams,
    adam_step,
    apply_residuals,
    estimate_sequence,
    fit_flame,
    head_camera,
    personalize,
    pose_avatar,
    render,
)
from headsplat.optim import first_step_gradient_norm
from headsplat.rasterizer import RenderConfig

FIT_CONFIG = RenderConfig(engine="auto", kernel_cutoff=2 * math.log(1e5))


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        params = {"x": np.array([1.0, -2.0])}
        state = AdamState.init(params, lr=0.1)
        out, state = adam_step(params, {"x": np.zeros(2)}, state)
        assert np.array_equal(out["x"], params["x"])
        assert state.step == 1

    def test_first_step_is_signed_lr(self):
        g = np.array([3.0, -0.5, 1e-3])
        params = {"x": np.zeros(3)}
        state = AdamState.init(params, lr=0.05)
        out, _ = adam_step(params, {"x": g}, state)
        # first bias-corrected step: -lr * g / (|g| + eps) ~ -lr * sign(g)
        assert np.allclose(out["x"], -0.05 * np.sign(g), atol=1e-6)

    def test_quadratic_convergence(self):
        target = np.array([0.3, -1.2, 2.0, 0.0])
        params = {"x": np.zeros(4)}
        state = AdamState.init(params, lr=0.05)
        for _ in range(200):
            grad = {"x": 2.0 * (params["x"] - target)}
            params, state = adam_step(params, grad, state)
        assert np.max(np.abs(params["x"] - target)) < 1e-3

    def test_nan_gradient_names_the_array(self):
        params = {"colors": np.zeros(3), "offsets": np.zeros(3)}
        state = AdamState.init(params, lr=0.1)
        bad = {"colors": np.zeros(3), "offsets": np.array([0.0, np.nan, 0.0])}
        with pytest.raises(DivergedError) as err:
            adam_step(params, bad, state)
        assert err.value.what == "offsets"

    def test_shape_mismatch(self):
        params = {"x": np.zeros(3)}
        state = AdamState.init(params, lr=0.1)
        with pytest.raises(ValueError):
            adam_step(params, {"x": np.zeros(4)}, state)


@pytest.fixture(scope="module")
def subject(template):
    """Small colored subject with rendered ground-truth frames."""
    from headsplat import init_avatar, upsample_anchors

    rng = np.random.default_rng(8)
    base = init_avatar(upsample_anchors(template, 1200, seed=4), template)
    truth = dataclasses.replace(
        base,
        colors=0.2 + 0.6 * rng.random((base.count, 3)),
        opacity_logits=np.full(base.count, 2.5),
    )
    cam = head_camera(64, 64)
    frames = []
    for i in range(3):
        params = FlameParams(
            expression=rng.normal(size=8) * 0.15,
            articulation=rng.normal(size=(3, 3)) * 0.05,
            head_rotation=rng.normal(size=3) * 0.08,
            head_translation=np.array([0.0, 0.0, -1.0]),
        )
        img = render(pose_avatar(truth, template, params), cam, FIT_CONFIG).rgb
        frames.append((img, params, cam))
    return truth, frames, cam


class TestPersonalize:
    def test_fixed_point_is_exactly_stationary(self, subject, template):
        # targets rendered from the avatar itself: gradients are exactly zero
        # (L1 ties -> 0, SSIM cancels bitwise), so Adam never moves
        truth, frames, _ = subject
        delta, report = personalize(truth, template, frames, steps=60, lr=1e-4, config=FIT_CONFIG)
        assert report.losses[-1] <= report.losses[0]
        assert report.losses[-1] == 0.0
        assert delta.max_abs() < 1e-2
        assert delta.max_abs() == 0.0

    def test_loss_decreases_from_gray(self, subject, template):
        truth, frames, _ = subject
        gray = dataclasses.replace(
            truth, colors=np.full((truth.count, 3), 0.5), opacity_logits=np.zeros(truth.count)
        )
        delta, report = personalize(gray, template, frames, steps=120, lr=2e-3, config=FIT_CONFIG)
        assert report.losses[-1] < 0.5 * report.losses[0]
        out = apply_residuals(gray, delta)
        assert not np.allclose(out.colors, 0.5)

    def test_requires_frames(self, subject, template):
        truth, _, _ = subject
        with pytest.raises(ValueError):
            personalize(truth, template, [], steps=1)

    def test_deterministic(self, subject, template):
        truth, frames, _ = subject
        d1, r1 = personalize(truth, template, frames, steps=10, lr=1e-4, config=FIT_CONFIG)
        d2, r2 = personalize(truth, template, frames, steps=10, lr=1e-4, config=FIT_CONFIG)
        assert np.array_equal(d1.colors, d2.colors)
        assert r1.losses == r2.losses

    def test_offset_penalty_pulls_offsets_down(self, subject, template):
        truth, frames, _ = subject
        free, _ = personalize(truth, template, frames, steps=40, lr=1e-3, config=FIT_CONFIG)
        pinned, _ = personalize(
            truth, template, frames, steps=40, lr=1e-3, config=FIT_CONFIG, offset_penalty=10.0
        )
        assert np.linalg.norm(pinned.offsets) <= np.linalg.norm(free.offsets) + 1e-9


class TestFitFlame:
    def test_gradient_vanishes_at_optimum(self, subject, template):
        truth, frames, cam = subject
        img, params, _ = frames[0]
        norm = first_step_gradient_norm(truth, template, img, cam, params, config=FIT_CONFIG)
        assert norm < 1e-6

    def test_translation_only_recovery(self, subject, template):
        truth, frames, cam = subject
        img, params, _ = frames[0]
        init = params.perturbed(head_translation=np.array([0.004, -0.003, 0.005]))
        fitted, report = fit_flame(
            truth, template, img, cam, init, steps=150, lr=0.002, config=FIT_CONFIG, ground_truth=params
        )
        assert report.rmse["head_translation"] < 1e-3

    def test_report_shape(self, subject, template):
        truth, frames, cam = subject
        img, params, _ = frames[0]
        fitted, report = fit_flame(
            truth, template, img, cam, params, steps=5, lr=0.01, config=FIT_CONFIG, ground_truth=params
        )
        assert len(report.losses) == 5
        assert set(report.rmse) == {"expression", "articulation", "head_rotation", "head_translation"}
        d = report.to_dict()
        assert d["rmse"]["expression"] >= 0.0


class TestEstimateSequence:
    def test_static_sequence_fixed_point(self, subject, template):
        truth, frames, cam = subject
        rest = FlameParams.viewing(template)
        img = render(pose_avatar(truth, template, rest), cam, FIT_CONFIG).rgb
        out, fps = estimate_sequence(
            truth, template, [img] * 4, cam, steps_per_frame=10, lr=0.005, config=FIT_CONFIG
        )
        assert fps > 0
        first = out[0]
        for p in out[1:]:
            assert np.max(np.abs(p.expression - first.expression)) < 1e-4
            assert np.max(np.abs(p.head_rotation - first.head_rotation)) < 1e-4

    def test_smooth_rotation_tracking(self, subject, template):
        truth, _, cam = subject
        angles = np.linspace(0.0, 0.12, 5)
        view = FlameParams.viewing(template)
        seq, truths = [], []
        for a in angles:
            p = view.perturbed(head_rotation=np.array([0.0, a, 0.0]))
            truths.append(p)
            seq.append(render(pose_avatar(truth, template, p), cam, FIT_CONFIG).rgb)
        out, _ = estimate_sequence(
            truth, template, seq, cam, steps_per_frame=100, lr=0.008, config=FIT_CONFIG
        )
        errs = [
            np.sqrt(np.mean((o.head_rotation - t.head_rotation) ** 2)) for o, t in zip(out, truths)
        ]
        assert max(errs) < 0.05
