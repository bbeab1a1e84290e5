"""Differentiable CPU splatting: tiled forward, brute-force oracle, exact backward.

Camera convention: the camera sits at the origin looking down -z; depth is the
distance along the view direction (d = -z).  A point (x, y, z) with z < 0
projects to pixel coordinates u = cx + fx * x / d, v = cy - fy * y / d, with
pixel (row r, col c) sampled at (c + 0.5, r + 0.5).  Extrinsics are identity:
all rigid motion is carried by the head pose.

Compositing: per pixel, splats are processed front to back in global depth
order (ties broken by Gaussian index ascending).  A splat with per-pixel
alpha a contributes c * a * T while the transmittance T = prod(1 - a_j) of
the splats in front stays >= the transmittance floor; once T drops below the
floor the remaining splats contribute (and back-propagate) exactly nothing.
The Gaussian kernel is truncated where exp(-q/2) < 1e-8 so the tiled pass and
the untiled oracle share one compact support.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit as sigmoid

from .animation import PosedGaussians
from .rotations import quat_to_matrix

_ALPHA_MAX = 1.0 - 1e-12


@dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics; extrinsics are identity by convention."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("need 0 < near < far")


def head_camera(width: int, height: int, head_radius: float = 0.1, distance: float = 1.0) -> Camera:
    """Camera for a head of the given radius placed at t = (0, 0, -distance):
    focal length chosen so the head spans ~0.8 of the smaller image side."""
    focal = 0.4 * min(width, height) * distance / head_radius
    return Camera(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0, width=width, height=height)


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 16
    cov2d_floor: float = 0.3  # px^2 added to the projected covariance diagonal
    transmittance_floor: float = 1e-4
    kernel_cutoff: float = 2.0 * math.log(1e12)  # Mahalanobis^2 where exp(-q/2) = 1e-12
    workers: int = 1
    engine: str = "auto"  # "auto" | "numba" | "numpy"

    def resolved_engine(self) -> str:
        from . import _kernels

        if self.engine == "auto":
            return "numba" if _kernels.HAVE_NUMBA else "numpy"
        if self.engine not in ("numba", "numpy"):
            raise ValueError(f"unknown engine {self.engine!r}")
        return self.engine


DEFAULT_CONFIG = RenderConfig()


@dataclass(frozen=True)
class Splats2D:
    """Projected splats, depth-sorted (ties by original index ascending)."""

    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2)
    depth: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3) clipped to [0, 1]
    opacity: np.ndarray  # (N,)
    indices: np.ndarray  # (N,) original Gaussian index

    @property
    def count(self) -> int:
        return self.mean2d.shape[0]


@dataclass
class _TileBins:
    pair_splat: np.ndarray  # (n_pairs,) sorted-splat position per (tile, splat) pair
    tile_ids: np.ndarray  # (n_tiles_hit,) unique tile ids, ascending
    tile_start: np.ndarray  # (n_tiles_hit + 1,) offsets into pair_splat


@dataclass
class RenderedFrame:
    """RGBA output plus the saved intermediates the backward pass needs."""

    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    alpha: np.ndarray  # (H, W) in [0, 1]
    posed: PosedGaussians | None = None
    camera: Camera | None = None
    config: RenderConfig | None = None
    splats: Splats2D | None = None
    bins: _TileBins | None = field(default=None, repr=False)

    def has_intermediates(self) -> bool:
        return self.posed is not None and self.splats is not None and self.bins is not None


@dataclass(frozen=True)
class RenderGradients:
    """Loss gradients mirroring the avatar attribute arrays (zero for culled splats)."""

    centers: np.ndarray  # (M, 3)
    log_scales: np.ndarray  # (M, 3)
    rotations_tangent: np.ndarray  # (M, 3)
    opacity_logits: np.ndarray  # (M,)
    colors: np.ndarray  # (M, 3)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "centers": self.centers,
            "log_scales": self.log_scales,
            "rotations_tangent": self.rotations_tangent,
            "opacity_logits": self.opacity_logits,
            "colors": self.colors,
        }


def _projection_jacobian(centers: np.ndarray, cam: Camera) -> np.ndarray:
    """d(mean2d)/d(center), shape (N, 2, 3)."""
    x, y = centers[:, 0], centers[:, 1]
    d = -centers[:, 2]
    J = np.zeros((centers.shape[0], 2, 3))
    J[:, 0, 0] = cam.fx / d
    J[:, 0, 2] = cam.fx * x / d**2
    J[:, 1, 1] = -cam.fy / d
    J[:, 1, 2] = -cam.fy * y / d**2
    return J


def project_gaussians(
    posed: PosedGaussians, cam: Camera, config: RenderConfig = DEFAULT_CONFIG
) -> Splats2D:
    """Perspective-project splats; cull outside the near/far range.

    2D covariance is J Sigma J^T at the center with a diagonal floor added
    (anti-aliasing bias).  Output is depth-sorted with index tie-break.
    """
    centers = posed.centers
    depth_all = -centers[:, 2]
    keep = (depth_all > cam.near) & (depth_all < cam.far)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        empty = np.zeros((0,))
        return Splats2D(
            mean2d=np.zeros((0, 2)),
            cov2d=np.zeros((0, 2, 2)),
            depth=empty,
            color=np.zeros((0, 3)),
            opacity=empty,
            indices=idx,
        )
    c = centers[idx]
    d = depth_all[idx]
    mean2d = np.stack([cam.cx + cam.fx * c[:, 0] / d, cam.cy - cam.fy * c[:, 1] / d], axis=1)

    R = quat_to_matrix(posed.rotations[idx])
    D = np.exp(2.0 * posed.log_scales[idx])
    cov3d = np.einsum("nij,nj,nkj->nik", R, D, R)
    J = _projection_jacobian(c, cam)
    cov2d = np.einsum("nai,nij,nbj->nab", J, cov3d, J)
    cov2d[:, 0, 0] += config.cov2d_floor
    cov2d[:, 1, 1] += config.cov2d_floor

    order = np.lexsort((idx, d))
    return Splats2D(
        mean2d=mean2d[order],
        cov2d=cov2d[order],
        depth=d[order],
        color=np.clip(posed.colors[idx][order], 0.0, 1.0),
        opacity=sigmoid(posed.opacity_logits[idx][order]),
        indices=idx[order],
    )


def _invert_cov2d(cov2d: np.ndarray) -> np.ndarray:
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    inv = np.empty_like(cov2d)
    inv[:, 0, 0] = c / det
    inv[:, 0, 1] = -b / det
    inv[:, 1, 0] = -b / det
    inv[:, 1, 1] = a / det
    return inv


def _splat_radius(cov2d: np.ndarray, config: RenderConfig) -> np.ndarray:
    """Pixel radius of the truncated kernel support per splat."""
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    return np.sqrt(config.kernel_cutoff * lam_max)


def _bin_tiles(splats: Splats2D, cam: Camera, config: RenderConfig) -> _TileBins:
    T = config.tile_size
    tiles_x = (cam.width + T - 1) // T
    tiles_y = (cam.height + T - 1) // T
    r = _splat_radius(splats.cov2d, config)
    u, v = splats.mean2d[:, 0], splats.mean2d[:, 1]
    x0 = np.clip(np.floor((u - r) / T).astype(np.int64), 0, tiles_x - 1)
    x1 = np.clip(np.floor((u + r) / T).astype(np.int64), 0, tiles_x - 1)
    y0 = np.clip(np.floor((v - r) / T).astype(np.int64), 0, tiles_y - 1)
    y1 = np.clip(np.floor((v + r) / T).astype(np.int64), 0, tiles_y - 1)
    on_screen = (u + r > 0) & (u - r < cam.width) & (v + r > 0) & (v - r < cam.height)

    nx = np.where(on_screen, x1 - x0 + 1, 0)
    ny = np.where(on_screen, y1 - y0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return _TileBins(
            pair_splat=np.zeros(0, dtype=np.int64),
            tile_ids=np.zeros(0, dtype=np.int64),
            tile_start=np.zeros(1, dtype=np.int64),
        )
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pair_splat = np.repeat(np.arange(splats.count, dtype=np.int64), counts)
    k = np.arange(total, dtype=np.int64) - offsets[pair_splat]
    dx = k % np.maximum(nx[pair_splat], 1)
    dy = k // np.maximum(nx[pair_splat], 1)
    pair_tile = (y0[pair_splat] + dy) * tiles_x + (x0[pair_splat] + dx)

    order = np.lexsort((pair_splat, pair_tile))
    pair_tile = pair_tile[order]
    pair_splat = pair_splat[order]
    boundaries = np.flatnonzero(np.diff(pair_tile)) + 1
    tile_start = np.concatenate([[0], boundaries, [total]])
    tile_ids = pair_tile[tile_start[:-1]]
    return _TileBins(pair_splat=pair_splat, tile_ids=tile_ids, tile_start=tile_start)


def _tile_pixels(tile_id: int, cam: Camera, config: RenderConfig):
    T = config.tile_size
    tiles_x = (cam.width + T - 1) // T
    ty, tx = divmod(int(tile_id), tiles_x)
    r0, r1 = ty * T, min((ty + 1) * T, cam.height)
    c0, c1 = tx * T, min((tx + 1) * T, cam.width)
    rows = np.arange(r0, r1)
    cols = np.arange(c0, c1)
    px = np.repeat(cols[None, :] + 0.5, rows.size, axis=0).ravel()
    py = np.repeat(rows[:, None] + 0.5, cols.size, axis=1).ravel()
    return (r0, r1, c0, c1), px, py


def _alpha_matrix(px, py, mean2d, inv_cov, opacity, cutoff):
    """Per-pixel, per-splat alpha (P, K) plus the raw kernel value and deltas."""
    dx = px[:, None] - mean2d[None, :, 0]
    dy = py[:, None] - mean2d[None, :, 1]
    q = (
        inv_cov[None, :, 0, 0] * dx * dx
        + 2.0 * inv_cov[None, :, 0, 1] * dx * dy
        + inv_cov[None, :, 1, 1] * dy * dy
    )
    g = np.where(q <= cutoff, np.exp(-0.5 * q), 0.0)
    alpha = np.minimum(opacity[None, :] * g, _ALPHA_MAX)
    return alpha, g, dx, dy


def _composite(alpha: np.ndarray, t_floor: float):
    """Front-to-back weights (P, K): w_i = a_i * T_i while T_i >= floor."""
    trans = np.cumprod(1.0 - alpha, axis=1)
    T_before = np.concatenate([np.ones((alpha.shape[0], 1)), trans[:, :-1]], axis=1)
    visible = T_before >= t_floor
    return alpha * T_before * visible, T_before, visible


def _forward_tile(tile_id, sel, splats, inv_cov, cam, config, out_rgb, out_alpha):
    (r0, r1, c0, c1), px, py = _tile_pixels(tile_id, cam, config)
    shape = (r1 - r0, c1 - c0)
    if config.resolved_engine() == "numba":
        from . import _kernels

        rgb = np.zeros((px.size, 3))
        a = np.zeros(px.size)
        packed = np.ascontiguousarray(
            np.stack([inv_cov[sel, 0, 0], inv_cov[sel, 0, 1], inv_cov[sel, 1, 1]], axis=1)
        )
        _kernels.forward_tile(
            px, py,
            np.ascontiguousarray(splats.mean2d[sel]), packed,
            np.ascontiguousarray(splats.opacity[sel]), np.ascontiguousarray(splats.color[sel]),
            config.kernel_cutoff, config.transmittance_floor, rgb, a,
        )
        out_rgb[r0:r1, c0:c1] = rgb.reshape(shape + (3,))
        out_alpha[r0:r1, c0:c1] = a.reshape(shape)
        return
    alpha, _, _, _ = _alpha_matrix(
        px, py, splats.mean2d[sel], inv_cov[sel], splats.opacity[sel], config.kernel_cutoff
    )
    w, _, _ = _composite(alpha, config.transmittance_floor)
    out_rgb[r0:r1, c0:c1] = (w @ splats.color[sel]).reshape(shape + (3,))
    out_alpha[r0:r1, c0:c1] = w.sum(axis=1).reshape(shape)


def render(
    posed: PosedGaussians, cam: Camera, config: RenderConfig = DEFAULT_CONFIG
) -> RenderedFrame:
    """Tiled forward splatting.  Deterministic for any worker count: each tile
    owns its pixels and splats are composited in one global depth order."""
    splats = project_gaussians(posed, cam, config)
    rgb = np.zeros((cam.height, cam.width, 3))
    alpha = np.zeros((cam.height, cam.width))
    bins = _bin_tiles(splats, cam, config)
    frame = RenderedFrame(
        rgb=rgb, alpha=alpha, posed=posed, camera=cam, config=config, splats=splats, bins=bins
    )
    if splats.count == 0 or bins.tile_ids.size == 0:
        return frame
    inv_cov = _invert_cov2d(splats.cov2d)

    def run(i: int):
        sel = bins.pair_splat[bins.tile_start[i] : bins.tile_start[i + 1]]
        _forward_tile(bins.tile_ids[i], sel, splats, inv_cov, cam, config, rgb, alpha)

    n = bins.tile_ids.size
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            list(pool.map(run, range(n)))
    else:
        for i in range(n):
            run(i)
    return frame


def brute_force_render(
    posed: PosedGaussians, cam: Camera, config: RenderConfig = DEFAULT_CONFIG
) -> np.ndarray:
    """Reference renderer: exact per-pixel compositing over every projected
    splat in depth order, no tiling, no early termination.  Returns (H, W, 4)
    RGBA in float64."""
    splats = project_gaussians(posed, cam, config)
    H, W = cam.height, cam.width
    out = np.zeros((H, W, 4))
    if splats.count == 0:
        return out
    inv_cov = _invert_cov2d(splats.cov2d)
    cols = np.arange(W) + 0.5
    rows = np.arange(H) + 0.5
    px = np.broadcast_to(cols[None, :], (H, W))
    py = np.broadcast_to(rows[:, None], (H, W))
    T = np.ones((H, W))
    for i in range(splats.count):
        dx = px - splats.mean2d[i, 0]
        dy = py - splats.mean2d[i, 1]
        q = (
            inv_cov[i, 0, 0] * dx * dx
            + 2.0 * inv_cov[i, 0, 1] * dx * dy
            + inv_cov[i, 1, 1] * dy * dy
        )
        g = np.where(q <= config.kernel_cutoff, np.exp(-0.5 * q), 0.0)
        a = np.minimum(splats.opacity[i] * g, _ALPHA_MAX)
        w = a * T * (T >= config.transmittance_floor)
        out[:, :, :3] += w[:, :, None] * splats.color[i]
        out[:, :, 3] += w
        T = T * (1.0 - a)
    return out


def _backward_tile(tile_id, sel, splats, inv_cov, cam, config, grad_rgb, grad_alpha):
    """Per-tile gradients in 2D splat space for the selected (sorted) splats.

    Returns (sel, d_mean2d, d_invcov_packed[a00, a01, a11], d_opacity_kernel,
    d_color) where d_opacity_kernel is the gradient w.r.t. the logistic
    opacity (pre-logit).
    """
    (r0, r1, c0, c1), px, py = _tile_pixels(tile_id, cam, config)
    colors = splats.color[sel]
    if config.resolved_engine() == "numba":
        from . import _kernels

        K = sel.size
        packed = np.ascontiguousarray(
            np.stack([inv_cov[sel, 0, 0], inv_cov[sel, 0, 1], inv_cov[sel, 1, 1]], axis=1)
        )
        d_mean = np.zeros((K, 2))
        d_invcov = np.zeros((K, 3))
        d_opacity = np.zeros(K)
        d_color = np.zeros((K, 3))
        n_pix = px.size
        _kernels.backward_tile(
            px, py,
            np.ascontiguousarray(splats.mean2d[sel]), packed,
            np.ascontiguousarray(splats.opacity[sel]), np.ascontiguousarray(colors),
            config.kernel_cutoff, config.transmittance_floor,
            np.ascontiguousarray(grad_rgb[r0:r1, c0:c1].reshape(n_pix, 3)),
            np.ascontiguousarray(grad_alpha[r0:r1, c0:c1].reshape(n_pix)),
            d_mean, d_invcov, d_opacity, d_color,
        )
        return sel, d_mean, d_invcov, d_opacity, d_color
    alpha, g, dx, dy = _alpha_matrix(
        px, py, splats.mean2d[sel], inv_cov[sel], splats.opacity[sel], config.kernel_cutoff
    )
    w, T_before, visible = _composite(alpha, config.transmittance_floor)

    n_pix = px.size
    gr = grad_rgb[r0:r1, c0:c1].reshape(n_pix, 3)
    ga = grad_alpha[r0:r1, c0:c1].reshape(n_pix)
    gw = gr @ colors.T + ga[:, None]  # (P, K) dLoss/d w_i

    d_color = w.T @ gr

    s = gw * w
    suffix = s.sum(axis=1, keepdims=True) - np.cumsum(s, axis=1)
    d_alpha = gw * T_before * visible - suffix / (1.0 - alpha)

    not_clamped = splats.opacity[None, sel] * g < _ALPHA_MAX
    d_alpha = d_alpha * not_clamped
    d_opacity = np.einsum("pk,pk->k", d_alpha, g)
    d_q = -0.5 * d_alpha * alpha  # alpha = opacity * g, d alpha/d q = -alpha/2

    A = inv_cov[sel]
    qx = 2.0 * (A[None, :, 0, 0] * dx + A[None, :, 0, 1] * dy)
    qy = 2.0 * (A[None, :, 0, 1] * dx + A[None, :, 1, 1] * dy)
    d_mean = np.stack(
        [-np.einsum("pk,pk->k", d_q, qx), -np.einsum("pk,pk->k", d_q, qy)], axis=1
    )
    d_invcov = np.stack(
        [
            np.einsum("pk,pk,pk->k", d_q, dx, dx),
            np.einsum("pk,pk,pk->k", d_q, dx, dy),
            np.einsum("pk,pk,pk->k", d_q, dy, dy),
        ],
        axis=1,
    )
    return sel, d_mean, d_invcov, d_opacity, d_color


def render_backward(
    frame: RenderedFrame,
    grad_rgb: np.ndarray,
    grad_alpha: np.ndarray | None = None,
    config: RenderConfig | None = None,
) -> RenderGradients:
    """Exact reverse-mode differentiation of compositing + projection +
    covariance reconstruction.  Per-splat contributions are reduced in tile
    order, so results are identical for any worker count."""
    if not frame.has_intermediates():
        raise ValueError("frame is missing saved intermediates; re-render with render()")
    config = config or frame.config
    cam = frame.camera
    posed = frame.posed
    splats = frame.splats
    bins = frame.bins
    grad_rgb = np.asarray(grad_rgb, dtype=float)
    if grad_rgb.shape != (cam.height, cam.width, 3):
        raise ValueError("grad_rgb must match the rendered image shape")
    if grad_alpha is None:
        grad_alpha = np.zeros((cam.height, cam.width))

    M = posed.count
    out = RenderGradients(
        centers=np.zeros((M, 3)),
        log_scales=np.zeros((M, 3)),
        rotations_tangent=np.zeros((M, 3)),
        opacity_logits=np.zeros(M),
        colors=np.zeros((M, 3)),
    )
    N = splats.count
    if N == 0 or bins.tile_ids.size == 0:
        return out
    inv_cov = _invert_cov2d(splats.cov2d)

    d_mean2d = np.zeros((N, 2))
    d_invcov = np.zeros((N, 3))
    d_opacity = np.zeros(N)
    d_color = np.zeros((N, 3))

    def run(i: int):
        sel = bins.pair_splat[bins.tile_start[i] : bins.tile_start[i + 1]]
        return _backward_tile(bins.tile_ids[i], sel, splats, inv_cov, cam, config, grad_rgb, grad_alpha)

    n = bins.tile_ids.size
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(run, range(n)))
    else:
        results = [run(i) for i in range(n)]
    for sel, dm, dic, dop, dc in results:  # fixed tile order: deterministic reduction
        d_mean2d[sel] += dm
        d_invcov[sel] += dic
        d_opacity[sel] += dop
        d_color[sel] += dc

    # ---- chain 2D gradients back to 3D Gaussian attributes ----
    idx = splats.indices
    centers = posed.centers[idx]
    x, y = centers[:, 0], centers[:, 1]
    d = splats.depth

    # inverse covariance -> covariance: dSigma = -A dA A with A = Sigma^{-1}
    gA = np.empty((N, 2, 2))
    gA[:, 0, 0] = d_invcov[:, 0]
    gA[:, 0, 1] = d_invcov[:, 1]
    gA[:, 1, 0] = d_invcov[:, 1]
    gA[:, 1, 1] = d_invcov[:, 2]
    g_cov2d = -np.einsum("nij,njk,nkl->nil", inv_cov, gA, inv_cov)

    J = _projection_jacobian(centers, cam)
    g_cov3d = np.einsum("nai,nab,nbj->nij", J, g_cov2d, J)

    R = quat_to_matrix(posed.rotations[idx])
    D = np.exp(2.0 * posed.log_scales[idx])
    cov3d = np.einsum("nij,nj,nkj->nik", R, D, R)
    gJ = 2.0 * np.einsum("nab,nbi,nij->naj", g_cov2d, J, cov3d)

    # centers via the projected mean
    g_center = np.einsum("nai,na->ni", J, d_mean2d)
    # centers via the projection jacobian inside cov2d
    fx, fy = cam.fx, cam.fy
    g_center[:, 0] += gJ[:, 0, 2] * fx / d**2
    g_center[:, 1] += gJ[:, 1, 2] * (-fy / d**2)
    g_d = (
        gJ[:, 0, 0] * (-fx / d**2)
        + gJ[:, 0, 2] * (-2.0 * fx * x / d**3)
        + gJ[:, 1, 1] * (fy / d**2)
        + gJ[:, 1, 2] * (2.0 * fy * y / d**3)
    )
    g_center[:, 2] += -g_d  # depth = -z

    # covariance -> log-scales and rotation tangent (right perturbation)
    G = np.einsum("nji,njk,nkl->nil", R, g_cov3d, R)  # R^T g_cov3d R
    g_logs = 2.0 * D * np.einsum("nkk->nk", G)
    g_tan = np.stack(
        [
            2.0 * G[:, 1, 2] * (D[:, 1] - D[:, 2]),
            2.0 * G[:, 0, 2] * (D[:, 2] - D[:, 0]),
            2.0 * G[:, 0, 1] * (D[:, 0] - D[:, 1]),
        ],
        axis=1,
    )

    op = splats.opacity
    g_logit = d_opacity * op * (1.0 - op)
    color_mask = (posed.colors[idx] >= 0.0) & (posed.colors[idx] <= 1.0)
    g_color = d_color * color_mask

    out.centers[idx] = g_center
    out.log_scales[idx] = g_logs
    out.rotations_tangent[idx] = g_tan
    out.opacity_logits[idx] = g_logit
    out.colors[idx] = g_color
    return out


def with_workers(config: RenderConfig, workers: int) -> RenderConfig:
    return replace(config, workers=workers)
