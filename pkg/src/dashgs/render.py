"""Differentiable pinhole splatting.

Forward: project each Gaussian (local affine Jacobian of the perspective map,
0.3 px anti-aliasing floor), sort by view depth with index tie-break, blend
front to back. Backward: per-pixel kernel gradients, then the projection and
covariance chain in vectorized numpy. Gradients through the sort order are
not propagated.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .kernels.raster import ALPHA_MAX, ALPHA_MIN, POWER_MIN, T_EPS
from .scene import GaussianCloud, quat_to_rotmat, sigmoid

log = logging.getLogger(__name__)

AA_FLOOR = 0.3


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    opacity: float
    color: np.ndarray

    @property
    def conic(self):
        return np.linalg.inv(self.cov2d)


@dataclass
class Projection:
    """Batched projection of a cloud plus the intermediates backward needs."""

    means2d: np.ndarray
    cov2d: np.ndarray
    conics: np.ndarray  # (N, 3) a, b, c
    depths: np.ndarray
    visible: np.ndarray
    bounds: np.ndarray
    t_cam: np.ndarray
    J: np.ndarray
    T2: np.ndarray
    sigma3d: np.ndarray
    M: np.ndarray
    rot: np.ndarray
    scales: np.ndarray
    n_singular: int = 0


def _sym_outer(A):
    """``A @ A^T`` for (..., m, k) formed entrywise, so exactly symmetric."""
    return (A[..., :, None, :] * A[..., None, :, :]).sum(axis=-1)


def project_arrays(positions, log_scales, rotations, cam, aa_floor=AA_FLOOR, orthographic=False):
    n = len(positions)
    scales = np.exp(log_scales)
    rot = quat_to_rotmat(rotations)
    M = rot * scales[:, None, :]
    sigma3d = _sym_outer(M)
    t_cam = positions @ cam.R.T + cam.t
    x, y, z = t_cam[:, 0], t_cam[:, 1], t_cam[:, 2]
    visible = z > cam.near
    zs = np.where(visible, z, 1.0)
    J = np.zeros((n, 2, 3))
    if orthographic:
        J[:, 0, 0] = 1.0
        J[:, 1, 1] = 1.0
        means2d = np.stack([x, y], axis=1)
    else:
        J[:, 0, 0] = cam.fx / zs
        J[:, 0, 2] = -cam.fx * x / zs**2
        J[:, 1, 1] = cam.fy / zs
        J[:, 1, 2] = -cam.fy * y / zs**2
        means2d = np.stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy], axis=1)
    T2 = J @ cam.R
    # T2 Sigma T2^T with Sigma = M M^T  ==  (T2 M)(T2 M)^T
    cov2d = _sym_outer(T2 @ M)
    cov2d[:, 0, 0] += aa_floor
    cov2d[:, 1, 1] += aa_floor
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    singular = visible & ~(det > 0)
    n_singular = int(np.count_nonzero(singular))
    if n_singular:
        log.warning("skipping %d Gaussians with singular 2D covariance", n_singular)
    visible &= ~singular
    safe_det = np.where(visible, det, 1.0)
    conics = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=1)
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(np.maximum(lam, 0.0))
    with np.errstate(invalid="ignore"):
        bounds = np.stack(
            [
                np.maximum(0, np.ceil(means2d[:, 0] - radius)),
                np.minimum(cam.width - 1, np.floor(means2d[:, 0] + radius)),
                np.maximum(0, np.ceil(means2d[:, 1] - radius)),
                np.minimum(cam.height - 1, np.floor(means2d[:, 1] + radius)),
            ],
            axis=1,
        )
    on_screen = (bounds[:, 0] <= bounds[:, 1]) & (bounds[:, 2] <= bounds[:, 3])
    visible &= on_screen & np.all(np.isfinite(bounds), axis=1)
    bounds = np.where(visible[:, None], bounds, 0).astype(np.int64)
    return Projection(
        means2d, cov2d, conics, z, visible, bounds, t_cam, J, T2, sigma3d, M, rot, scales, n_singular
    )


def project(position, log_scale, rotation, opacity_logit, color_logit, cam, aa_floor=AA_FLOOR, orthographic=False):
    """Project one Gaussian; returns ``None`` when it is culled."""
    p = project_arrays(
        np.atleast_2d(position), np.atleast_2d(log_scale), np.atleast_2d(rotation), cam, aa_floor, orthographic
    )
    if not p.t_cam[0, 2] > cam.near:
        return None
    return ProjectedGaussian(
        p.means2d[0], p.cov2d[0], float(p.depths[0]), float(sigmoid(opacity_logit)), sigmoid(color_logit)
    )


def gaussian_weight(g, pixel):
    """Alpha of one projected Gaussian at a pixel; 0 when outside 3 sigma or below 1/255."""
    d = np.asarray(pixel, dtype=np.float64) - g.mean2d
    power = -0.5 * float(d @ g.conic @ d)
    if power > 0.0 or power < POWER_MIN:
        return 0.0
    alpha = min(ALPHA_MAX, g.opacity * math.exp(power))
    return alpha if alpha >= ALPHA_MIN else 0.0


def composite(contributions, background=(0.0, 0.0, 0.0)):
    """Front-to-back blend of ``(alpha, color)`` pairs already sorted near to far."""
    out = np.zeros(3)
    T = 1.0
    for alpha, color in contributions:
        if T < T_EPS:
            break
        out += np.asarray(color, dtype=np.float64) * alpha * T
        T *= 1.0 - alpha
    return out + T * np.asarray(background, dtype=np.float64)


@dataclass
class RenderResult:
    image: np.ndarray
    alpha: np.ndarray
    proj: Projection
    order: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    background: np.ndarray
    trans: np.ndarray
    stop: np.ndarray
    cam: object
    rotations: np.ndarray


def render(cloud, cam, background=None):
    """Render a cloud (or a deformed view of one) through ``cam``."""
    if len(cloud) == 0:
        raise ValueError("cannot render an empty cloud")
    background = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    proj = project_arrays(cloud.positions, cloud.log_scales, cloud.rotations, cam)
    opac = sigmoid(cloud.opacity_logits)
    cols = sigmoid(cloud.color_logits)
    vis = np.flatnonzero(proj.visible)
    order = vis[np.argsort(proj.depths[vis], kind="stable")]
    image, trans, stop = kernels.rasterize_forward(
        np.ascontiguousarray(proj.means2d[order]),
        np.ascontiguousarray(proj.conics[order]),
        np.ascontiguousarray(opac[order]),
        np.ascontiguousarray(cols[order]),
        np.ascontiguousarray(proj.bounds[order]),
        background,
        cam.height,
        cam.width,
    )
    return RenderResult(
        image, 1.0 - trans, proj, order, opac, cols, background, trans, stop, cam, cloud.rotations.copy()
    )


def _quat_backward(q_raw, d_rot):
    """Gradient w.r.t. an unnormalized wxyz quaternion given dL/dR."""
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q = q_raw / norm
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = d_rot
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (
        y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
        + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2]
    )
    dy = 2 * (
        -2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
        - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2]
    )
    dz = 2 * (
        -2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
        + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1]
    )
    dq = np.stack([dw, dx, dy, dz], axis=1)
    return (dq - q * np.sum(q * dq, axis=1, keepdims=True)) / norm


def render_backward(res, grad_image):
    """Gradients of ``sum(grad_image * image)`` w.r.t. every cloud parameter.

    Also returns ``means2d_norm``: per-Gaussian norm of the screen-space mean
    gradient, the statistic densification accumulates.
    """
    proj, order, cam = res.proj, res.order, res.cam
    n = len(proj.depths)
    gm_s, gc_s, go_s, gcol_s = kernels.rasterize_backward(
        np.ascontiguousarray(proj.means2d[order]),
        np.ascontiguousarray(proj.conics[order]),
        np.ascontiguousarray(res.opacities[order]),
        np.ascontiguousarray(res.colors[order]),
        np.ascontiguousarray(proj.bounds[order]),
        res.background,
        res.trans,
        res.stop,
        np.ascontiguousarray(grad_image, dtype=np.float64),
    )
    g_means2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_col = np.zeros((n, 3))
    g_means2d[order] = gm_s
    g_conic[order] = gc_s
    g_opac[order] = go_s
    g_col[order] = gcol_s

    # conic (a, b, c) -> symmetric 2x2 gradient; inverse: dS = -A G A
    A = np.zeros((n, 2, 2))
    A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1] = (
        proj.conics[:, 0], proj.conics[:, 1], proj.conics[:, 1], proj.conics[:, 2],
    )
    G = np.zeros((n, 2, 2))
    G[:, 0, 0], G[:, 0, 1], G[:, 1, 0], G[:, 1, 1] = g_conic[:, 0], 0.5 * g_conic[:, 1], 0.5 * g_conic[:, 1], g_conic[:, 2]
    d_cov2d = -A @ G @ A

    T2 = proj.T2
    d_sigma = np.swapaxes(T2, 1, 2) @ d_cov2d @ T2
    d_T2 = 2.0 * d_cov2d @ T2 @ proj.sigma3d
    d_J = d_T2 @ cam.R.T

    x, y, z = proj.t_cam[:, 0], proj.t_cam[:, 1], np.where(proj.visible, proj.t_cam[:, 2], 1.0)
    fx, fy = cam.fx, cam.fy
    gu, gv = g_means2d[:, 0], g_means2d[:, 1]
    d_t = np.zeros((n, 3))
    d_t[:, 0] = gu * fx / z + d_J[:, 0, 2] * (-fx / z**2)
    d_t[:, 1] = gv * fy / z + d_J[:, 1, 2] * (-fy / z**2)
    d_t[:, 2] = (
        -gu * fx * x / z**2
        - gv * fy * y / z**2
        + d_J[:, 0, 0] * (-fx / z**2)
        + d_J[:, 0, 2] * (2 * fx * x / z**3)
        + d_J[:, 1, 1] * (-fy / z**2)
        + d_J[:, 1, 2] * (2 * fy * y / z**3)
    )
    d_t[~proj.visible] = 0.0
    d_pos = d_t @ cam.R

    d_M = 2.0 * d_sigma @ proj.M
    d_rot = d_M * proj.scales[:, None, :]
    d_scale = np.sum(d_M * proj.rot, axis=1)
    d_log_scale = d_scale * proj.scales
    d_quat = _quat_backward(res.rotations, d_rot)

    vis = proj.visible[:, None]
    return {
        "positions": d_pos,
        "log_scales": np.where(vis, d_log_scale, 0.0),
        "rotations": np.where(vis, d_quat, 0.0),
        "opacity_logits": g_opac * res.opacities * (1.0 - res.opacities),
        "color_logits": g_col * res.colors * (1.0 - res.colors),
        "means2d_norm": np.linalg.norm(g_means2d, axis=1),
        "visible": proj.visible.copy(),
    }


def blend_weights(res):
    """Per-Gaussian sum over pixels of its blending weight ``alpha * T``."""
    n = len(res.proj.depths)
    ones = np.ones((res.cam.height, res.cam.width, 3))
    sorted_cols = kernels.rasterize_backward(
        np.ascontiguousarray(res.proj.means2d[res.order]),
        np.ascontiguousarray(res.proj.conics[res.order]),
        np.ascontiguousarray(res.opacities[res.order]),
        np.ascontiguousarray(res.colors[res.order]),
        np.ascontiguousarray(res.proj.bounds[res.order]),
        res.background,
        res.trans,
        res.stop,
        ones,
    )[3]
    out = np.zeros(n)
    out[res.order] = sorted_cols[:, 0]
    return out


def to_uint8(image):
    return np.clip(np.rint(np.clip(image, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def render_labels(cloud, cam, background=(1.0, 1.0, 1.0)):
    """Dynamic Gaussians in red, static in black (fully opaque centres)."""
    vis = cloud.copy()
    red = np.array([1.0, 0.0, 0.0])
    black = np.zeros(3)
    colors = np.where((cloud.labels == 1)[:, None], red, black)
    vis.color_logits = np.log(np.clip(colors, 1e-6, 1 - 1e-6)) - np.log1p(-np.clip(colors, 1e-6, 1 - 1e-6))
    return render(vis, cam, background=background).image


__all__ = [
    "GaussianCloud",
    "ProjectedGaussian",
    "Projection",
    "RenderResult",
    "blend_weights",
    "composite",
    "gaussian_weight",
    "project",
    "project_arrays",
    "render",
    "render_backward",
    "render_labels",
    "to_uint8",
]
