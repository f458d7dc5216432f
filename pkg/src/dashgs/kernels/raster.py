"""Per-pixel splatting kernels.

Inputs are already projected and sorted front to back. Gaussians are visited in
that order and each one touches the pixels of its clipped bounding box, which
gives the same per-pixel blend order as a pixel-major loop. Backward walks the
list in reverse and recovers transmittance by division.

Conic layout: ``(a, b, c)`` for the inverse 2D covariance ``[[a, b], [b, c]]``.
Bounds layout: ``(x0, x1, y0, y1)`` inclusive pixel ranges.
"""

import numpy as np

from .._accel import njit

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_EPS = 1e-4
POWER_MIN = -4.5  # 3-sigma ellipse: d^T conic d <= 9


# --------------------------------------------------------------------------- numba


@njit(nogil=True)
def rasterize_forward_numba(means2d, conics, opacities, colors, bounds, background, height, width):
    n = means2d.shape[0]
    image = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    stop = np.full((height, width), n, dtype=np.int64)
    for g in range(n):
        mx, my = means2d[g, 0], means2d[g, 1]
        a, b, c = conics[g, 0], conics[g, 1], conics[g, 2]
        op = opacities[g]
        for y in range(bounds[g, 2], bounds[g, 3] + 1):
            dy = y - my
            for x in range(bounds[g, 0], bounds[g, 1] + 1):
                T = trans[y, x]
                if T < T_EPS:
                    continue
                dx = x - mx
                power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                if power > 0.0 or power < POWER_MIN:
                    continue
                alpha = op * np.exp(power)
                if alpha > ALPHA_MAX:
                    alpha = ALPHA_MAX
                if alpha < ALPHA_MIN:
                    continue
                wgt = alpha * T
                for ch in range(3):
                    image[y, x, ch] += colors[g, ch] * wgt
                T = T * (1.0 - alpha)
                trans[y, x] = T
                if T < T_EPS:
                    stop[y, x] = g
    for y in range(height):
        for x in range(width):
            for ch in range(3):
                image[y, x, ch] += trans[y, x] * background[ch]
    return image, trans, stop


@njit(nogil=True)
def rasterize_backward_numba(
    means2d, conics, opacities, colors, bounds, background, trans, stop, grad_image
):
    n = means2d.shape[0]
    height, width = trans.shape
    g_means = np.zeros((n, 2))
    g_conics = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_colors = np.zeros((n, 3))
    T_cur = trans.copy()
    behind = np.empty((height, width, 3))
    for y in range(height):
        for x in range(width):
            for ch in range(3):
                behind[y, x, ch] = trans[y, x] * background[ch]
    for g in range(n - 1, -1, -1):
        mx, my = means2d[g, 0], means2d[g, 1]
        a, b, c = conics[g, 0], conics[g, 1], conics[g, 2]
        op = opacities[g]
        for y in range(bounds[g, 2], bounds[g, 3] + 1):
            dy = y - my
            for x in range(bounds[g, 0], bounds[g, 1] + 1):
                if g > stop[y, x]:
                    continue
                dx = x - mx
                power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                if power > 0.0 or power < POWER_MIN:
                    continue
                gauss = np.exp(power)
                raw = op * gauss
                alpha = raw if raw < ALPHA_MAX else ALPHA_MAX
                if alpha < ALPHA_MIN:
                    continue
                T = T_cur[y, x] / (1.0 - alpha)
                wgt = alpha * T
                d_alpha = 0.0
                for ch in range(3):
                    gc = grad_image[y, x, ch]
                    g_colors[g, ch] += wgt * gc
                    d_alpha += gc * (colors[g, ch] * T - behind[y, x, ch] / (1.0 - alpha))
                    behind[y, x, ch] += colors[g, ch] * wgt
                T_cur[y, x] = T
                if raw >= ALPHA_MAX:
                    continue
                g_opac[g] += d_alpha * gauss
                d_power = d_alpha * raw
                g_conics[g, 0] += -0.5 * dx * dx * d_power
                g_conics[g, 1] += -dx * dy * d_power
                g_conics[g, 2] += -0.5 * dy * dy * d_power
                g_means[g, 0] += (a * dx + b * dy) * d_power
                g_means[g, 1] += (b * dx + c * dy) * d_power
    return g_means, g_conics, g_opac, g_colors


# --------------------------------------------------------------------------- numpy


def _patch(bounds_g, means_g, conic_g):
    x0, x1, y0, y1 = (int(v) for v in bounds_g)
    xs = np.arange(x0, x1 + 1)
    ys = np.arange(y0, y1 + 1)
    dx = xs[None, :] - means_g[0]
    dy = ys[:, None] - means_g[1]
    a, b, c = conic_g
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    return (slice(y0, y1 + 1), slice(x0, x1 + 1)), dx, dy, power


def rasterize_forward_numpy(means2d, conics, opacities, colors, bounds, background, height, width):
    n = means2d.shape[0]
    image = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    stop = np.full((height, width), n, dtype=np.int64)
    for g in range(n):
        if bounds[g, 1] < bounds[g, 0] or bounds[g, 3] < bounds[g, 2]:
            continue
        win, dx, dy, power = _patch(bounds[g], means2d[g], conics[g])
        T = trans[win]
        with np.errstate(over="ignore", under="ignore"):
            alpha = np.minimum(opacities[g] * np.exp(power), ALPHA_MAX)
        live = (T >= T_EPS) & (power <= 0.0) & (power >= POWER_MIN) & (alpha >= ALPHA_MIN)
        alpha = np.where(live, alpha, 0.0)
        image[win] += colors[g] * (alpha * T)[..., None]
        T_new = np.where(live, T * (1.0 - alpha), T)
        stopped = live & (T_new < T_EPS)
        stop[win][stopped] = g
        trans[win] = T_new
    image += trans[..., None] * background
    return image, trans, stop


def rasterize_backward_numpy(
    means2d, conics, opacities, colors, bounds, background, trans, stop, grad_image
):
    n = means2d.shape[0]
    g_means = np.zeros((n, 2))
    g_conics = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_colors = np.zeros((n, 3))
    T_cur = trans.copy()
    behind = trans[..., None] * background
    for g in range(n - 1, -1, -1):
        if bounds[g, 1] < bounds[g, 0] or bounds[g, 3] < bounds[g, 2]:
            continue
        win, dx, dy, power = _patch(bounds[g], means2d[g], conics[g])
        a, b, c = conics[g]
        with np.errstate(over="ignore", under="ignore"):
            gauss = np.exp(power)
        raw = opacities[g] * gauss
        alpha = np.minimum(raw, ALPHA_MAX)
        live = (g <= stop[win]) & (power <= 0.0) & (power >= POWER_MIN) & (alpha >= ALPHA_MIN)
        alpha = np.where(live, alpha, 0.0)
        T = T_cur[win] / (1.0 - alpha)
        wgt = alpha * T
        gi = grad_image[win]
        bh = behind[win]
        d_alpha = np.sum(gi * (colors[g] * T[..., None] - bh / (1.0 - alpha)[..., None]), axis=-1)
        d_alpha = np.where(live, d_alpha, 0.0)
        g_colors[g] = np.sum(gi * wgt[..., None], axis=(0, 1))
        behind[win] = bh + colors[g] * wgt[..., None]
        T_cur[win] = np.where(live, T, T_cur[win])
        d_power = np.where(live & (raw < ALPHA_MAX), d_alpha * raw, 0.0)
        g_opac[g] = np.sum(np.where(live & (raw < ALPHA_MAX), d_alpha * gauss, 0.0))
        g_conics[g, 0] = np.sum(-0.5 * dx * dx * d_power)
        g_conics[g, 1] = np.sum(-dx * dy * d_power)
        g_conics[g, 2] = np.sum(-0.5 * dy * dy * d_power)
        g_means[g, 0] = np.sum((a * dx + b * dy) * d_power)
        g_means[g, 1] = np.sum((b * dx + c * dy) * d_power)
    return g_means, g_conics, g_opac, g_colors
