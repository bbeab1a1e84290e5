"""Numba-compiled per-tile splatting kernels.

Semantics are identical to the vectorized numpy tile path in rasterizer.py
(same kernel truncation, alpha clamp, and transmittance gating); only the
summation order differs at float rounding level.  The brute-force oracle
does not use these kernels.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap

_ALPHA_MAX = 1.0 - 1e-12


@njit(cache=True, nogil=True)
def forward_tile(px, py, mean2d, invcov, opacity, colors, cutoff, tfloor, out_rgb, out_alpha):
    P = px.size
    K = mean2d.shape[0]
    for p in range(P):
        T = 1.0
        r = 0.0
        g = 0.0
        b = 0.0
        acc = 0.0
        for k in range(K):
            if T < tfloor:
                break
            dx = px[p] - mean2d[k, 0]
            dy = py[p] - mean2d[k, 1]
            q = invcov[k, 0] * dx * dx + 2.0 * invcov[k, 1] * dx * dy + invcov[k, 2] * dy * dy
            if q > cutoff:
                continue
            alpha = opacity[k] * np.exp(-0.5 * q)
            if alpha > _ALPHA_MAX:
                alpha = _ALPHA_MAX
            w = alpha * T
            r += w * colors[k, 0]
            g += w * colors[k, 1]
            b += w * colors[k, 2]
            acc += w
            T *= 1.0 - alpha
        out_rgb[p, 0] = r
        out_rgb[p, 1] = g
        out_rgb[p, 2] = b
        out_alpha[p] = acc


@njit(cache=True, nogil=True)
def backward_tile(
    px,
    py,
    mean2d,
    invcov,
    opacity,
    colors,
    cutoff,
    tfloor,
    grad_rgb,
    grad_alpha,
    d_mean,
    d_invcov,
    d_opacity,
    d_color,
):
    P = px.size
    K = mean2d.shape[0]
    s_alpha = np.empty(K)
    s_g = np.empty(K)
    s_T = np.empty(K)
    s_gw = np.empty(K)
    s_dx = np.empty(K)
    s_dy = np.empty(K)
    for p in range(P):
        gr0 = grad_rgb[p, 0]
        gr1 = grad_rgb[p, 1]
        gr2 = grad_rgb[p, 2]
        ga = grad_alpha[p]
        T = 1.0
        total = 0.0
        n_active = 0
        for k in range(K):
            if T < tfloor:
                break
            dx = px[p] - mean2d[k, 0]
            dy = py[p] - mean2d[k, 1]
            q = invcov[k, 0] * dx * dx + 2.0 * invcov[k, 1] * dx * dy + invcov[k, 2] * dy * dy
            if q > cutoff:
                gk = 0.0
                alpha = 0.0
            else:
                gk = np.exp(-0.5 * q)
                alpha = opacity[k] * gk
                if alpha > _ALPHA_MAX:
                    alpha = _ALPHA_MAX
            s_alpha[n_active] = alpha
            s_g[n_active] = gk
            s_T[n_active] = T
            s_dx[n_active] = dx
            s_dy[n_active] = dy
            gw = gr0 * colors[k, 0] + gr1 * colors[k, 1] + gr2 * colors[k, 2] + ga
            s_gw[n_active] = gw
            w = alpha * T
            d_color[k, 0] += w * gr0
            d_color[k, 1] += w * gr1
            d_color[k, 2] += w * gr2
            total += gw * w
            T *= 1.0 - alpha
            n_active += 1
        # pass 2: splats 0..n_active-1 were stored at their own index k
        prefix = 0.0
        for k in range(n_active):
            alpha = s_alpha[k]
            gk = s_g[k]
            gw = s_gw[k]
            Tk = s_T[k]
            prefix += gw * alpha * Tk
            if gk <= 0.0 or alpha >= _ALPHA_MAX:  # out of support, or clamp saturated
                continue
            suffix = total - prefix
            d_alpha = gw * Tk - suffix / (1.0 - alpha)
            d_opacity[k] += d_alpha * gk
            d_q = -0.5 * d_alpha * alpha
            a00 = invcov[k, 0]
            a01 = invcov[k, 1]
            a11 = invcov[k, 2]
            dx = s_dx[k]
            dy = s_dy[k]
            qx = 2.0 * (a00 * dx + a01 * dy)
            qy = 2.0 * (a01 * dx + a11 * dy)
            d_mean[k, 0] += -d_q * qx
            d_mean[k, 1] += -d_q * qy
            d_invcov[k, 0] += d_q * dx * dx
            d_invcov[k, 1] += d_q * dx * dy
            d_invcov[k, 2] += d_q * dy * dy
