import dataclasses

import numpy as np
import pytest

from headsplat import (
    FlameParams,
    generate_synthetic_template,
    head_camera,
    init_avatar,
    upsample_anchors,
)
from headsplat.animation import PosedGaussians
from headsplat.rasterizer import RenderConfig


@pytest.fixture(scope="session")
def template():
    return generate_synthetic_template(seed=7, V=642, K_id=4, K_expr=8, B=4)


@pytest.fixture(scope="session")
def avatar(template):
    anchors = upsample_anchors(template, 1500, seed=1)
    base = init_avatar(anchors, template)
    rng = np.random.default_rng(42)
    return dataclasses.replace(
        base,
        colors=0.2 + 0.6 * rng.random((base.count, 3)),
        opacity_logits=np.full(base.count, 2.0),
    )


@pytest.fixture(scope="session")
def cam64():
    return head_camera(64, 64)


@pytest.fixture(scope="session")
def rest_params(template):
    return FlameParams.rest(template)


@pytest.fixture(scope="session")
def cpu_config():
    return RenderConfig(engine="numpy")


def random_scene(M: int, seed: int, spread: float = 0.2) -> PosedGaussians:
    """Random splat cloud in front of the camera (depth around 1)."""
    rng = np.random.default_rng(seed)
    centers = np.column_stack(
        [
            rng.uniform(-spread, spread, M),
            rng.uniform(-spread, spread, M),
            rng.uniform(-1.3, -0.7, M),
        ]
    )
    rotations = rng.normal(size=(M, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    return PosedGaussians(
        centers=centers,
        log_scales=rng.uniform(np.log(0.01), np.log(0.05), (M, 3)),
        rotations=rotations,
        opacity_logits=rng.uniform(-1.0, 1.5, M),
        colors=rng.uniform(0.05, 0.95, (M, 3)),
    )


def relative_error(analytic: np.ndarray, fd: np.ndarray, floor: float = 1e-6) -> float:
    """Worst elementwise relative error with an absolute floor on the scale."""
    analytic = np.asarray(analytic, dtype=float)
    fd = np.asarray(fd, dtype=float)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(fd)), floor)
    return float(np.max(np.abs(analytic - fd) / scale))
