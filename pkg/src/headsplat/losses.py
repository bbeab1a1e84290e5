"""Photometric losses with analytic gradients, image metrics, subset sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import correlate1d

LossCallback = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class LossWeights:
    """Weights for the combined objective.  The perceptual and adversarial
    slots accept pluggable callbacks and default to zero weight."""

    l1: float = 0.8
    perceptual: float = 0.0
    ssim: float = 0.1
    adversarial: float = 0.0

    def __post_init__(self):
        if min(self.l1, self.perceptual, self.ssim, self.adversarial) < 0:
            raise ValueError("loss weights must be non-negative")


def l1_loss(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute difference and its subgradient w.r.t. a (0 at ties)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("images must share a shape")
    diff = a - b
    n = diff.size
    return float(np.abs(diff).mean()), np.sign(diff) / n


def _gaussian_window(window: int, sigma: float) -> np.ndarray:
    x = np.arange(window) - (window - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _filter_valid(img: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Separable 'valid' windowed mean over the first two axes."""
    half = w.size // 2
    out = correlate1d(img, w, axis=0, mode="constant")
    out = correlate1d(out, w, axis=1, mode="constant")
    return out[half:-half, half:-half]


def _filter_full(coeff: np.ndarray, w: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Adjoint of _filter_valid: scatter valid-region coefficients back."""
    half = w.size // 2
    pad = [(half, half), (half, half)] + [(0, 0)] * (coeff.ndim - 2)
    padded = np.pad(coeff, pad)
    out = correlate1d(padded, w, axis=0, mode="constant")
    out = correlate1d(out, w, axis=1, mode="constant")
    return out[: shape[0], : shape[1]]


def ssim(
    a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5
) -> tuple[float, np.ndarray]:
    """Gaussian-window SSIM (C1 = 0.01^2, C2 = 0.03^2 on unit range) averaged
    over valid pixels and channels, plus its gradient w.r.t. a."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("images must share a shape")
    if a.shape[0] < window or a.shape[1] < window:
        raise ValueError(f"images must be at least {window}x{window}")
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
        b = b[:, :, None]

    C1, C2 = 0.01**2, 0.03**2
    w = _gaussian_window(window, sigma)
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    s_aa = _filter_valid(a * a, w)
    s_bb = _filter_valid(b * b, w)
    s_ab = _filter_valid(a * b, w)
    var_a = s_aa - mu_a**2
    var_b = s_bb - mu_b**2
    cov = s_ab - mu_a * mu_b

    lum_n = 2.0 * mu_a * mu_b + C1
    lum_d = mu_a**2 + mu_b**2 + C1
    cs_n = 2.0 * cov + C2
    cs_d = var_a + var_b + C2
    lum = lum_n / lum_d
    cs = cs_n / cs_d
    smap = lum * cs
    value = float(smap.mean())

    n = smap.size
    # partials of S w.r.t. the windowed statistics (mu_a, s_aa, s_ab),
    # arranged so every term cancels bitwise when a == b (lum == cs == 1);
    # identical images then get an exactly-zero gradient, which keeps
    # optimizer fixed points genuinely stationary
    t_cs = lum / cs_d
    d_lum_d_mua = (2.0 * mu_b - 2.0 * mu_a * lum) / lum_d
    d_cs_d_mua = (2.0 * mu_a * cs - 2.0 * mu_b) / cs_d
    dS_d_mua = cs * d_lum_d_mua + lum * d_cs_d_mua
    dS_d_saa = -cs * t_cs
    dS_d_sab = 2.0 * t_cs

    shape = (a.shape[0], a.shape[1])
    grad = (
        _filter_full(dS_d_mua, w, shape)
        + 2.0 * a * _filter_full(dS_d_saa, w, shape)
        + b * _filter_full(dS_d_sab, w, shape)
    ) / n
    if squeeze:
        grad = grad[:, :, 0]
    return value, grad


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) on unit-range images; equal images give math.inf."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("images must share a shape")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def total_loss(
    pairs: Sequence[tuple[np.ndarray, np.ndarray]],
    weights: LossWeights = LossWeights(),
    perceptual_fn: LossCallback | None = None,
    adversarial_fn: LossCallback | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Weighted objective over (target, rendered) pairs: per-pixel means per
    image, summed over pairs.  Returns the scalar and the gradient w.r.t.
    each rendered image."""
    if len(pairs) == 0:
        raise ValueError("need at least one image pair")
    value = 0.0
    grads: list[np.ndarray] = []
    for target, rendered in pairs:
        grad = np.zeros_like(np.asarray(rendered, dtype=float))
        if weights.l1:
            v, g = l1_loss(rendered, target)
            value += weights.l1 * v
            grad += weights.l1 * g
        if weights.ssim:
            v, g = ssim(rendered, target)
            value += weights.ssim * (1.0 - v)
            grad -= weights.ssim * g
        if weights.perceptual and perceptual_fn is not None:
            v, g = perceptual_fn(target, rendered)
            value += weights.perceptual * v
            grad += weights.perceptual * g
        if weights.adversarial and adversarial_fn is not None:
            v, g = adversarial_fn(target, rendered)
            value += weights.adversarial * v
            grad += weights.adversarial * g
        grads.append(grad)
    return value, grads


def few_to_many_split(
    n_frames: int, S: int, R: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint conditioning / reconstruction index sets of sizes S and R.

    Requires R >= S and S + R <= n_frames; deterministic per seed.
    """
    if S < 1 or R < S:
        raise ValueError("need 1 <= S <= R")
    if S + R > n_frames:
        raise ValueError("S + R must not exceed the number of frames")
    perm = np.random.default_rng(seed).permutation(n_frames)
    conditioning = np.sort(perm[:S])
    reconstruction = np.sort(perm[S : S + R])
    return conditioning, reconstruction
