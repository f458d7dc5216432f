"""Deformation networks.

Stage 1 predicts a per-Gaussian velocity from a 3D hash encoding of the
canonical position and moves Gaussians linearly in time. Stage 2 encodes
(position, time) with a 4D hash grid and decodes position, rotation and
log-scale offsets through three heads sharing one feature MLP.

All offsets produced here live in the unit domain; ``Domain.to_world_delta``
converts position offsets to world units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError, ShapeMismatchError
from .hashgrid import HashGridConfig, HashGridEncoder
from .nn import Mlp
from .scene import GaussianCloud

HIDDEN = 64
FEATURE_WIDTH = 32


def _check_finite(x):
    if not np.all(np.isfinite(x)):
        raise InvalidParameterError("non-finite deformation input")


class Stage1Model:
    """Velocity field ``phi_l(phi_p(G3(p)))``."""

    def __init__(self, enc_cfg=None, rng=None, hidden=HIDDEN, feature_width=FEATURE_WIDTH):
        rng = np.random.default_rng() if rng is None else rng
        enc_cfg = enc_cfg or HashGridConfig.stage1_default()
        self.encoder = HashGridEncoder(enc_cfg, rng=rng)
        self.phi_p = Mlp([enc_cfg.output_width, hidden, feature_width], rng=rng)
        self.phi_l = Mlp([feature_width, hidden, 3], rng=rng, zero_last=True)

    @property
    def params(self):
        return [self.encoder.tables] + self.phi_p.params + self.phi_l.params

    def forward(self, p):
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        _check_finite(p)
        feats = self.encoder.encode(p)
        f3, c_p = self.phi_p.forward(feats)
        dp, c_l = self.phi_l.forward(f3)
        return dp, (p, c_p, c_l)

    def __call__(self, p):
        return self.forward(p)[0]

    def backward(self, cache, grad_dp):
        """Returns ``(param_grads, grad_p)`` with grads aligned to :attr:`params`."""
        p, c_p, c_l = cache
        g_l, g_f3 = self.phi_l.backward(c_l, grad_dp)
        g_p, g_feats = self.phi_p.backward(c_p, g_f3)
        g_tab, g_in = self.encoder.encode_backward(p, g_feats)
        return [g_tab] + g_p + g_l, g_in


def stage1_delta(model, p):
    return model(p)


def linear_position(p, dp, t):
    """Position at time ``t`` under constant velocity ``dp``."""
    return np.asarray(p, dtype=np.float64) + t * np.asarray(dp, dtype=np.float64)


@dataclass
class DeformationDelta:
    dx: np.ndarray  # (M, 3) unit-domain position offsets
    dr: np.ndarray  # (M, 4) additive quaternion offsets
    ds: np.ndarray  # (M, 3) log-scale offsets

    def __len__(self):
        return len(self.dx)

    @classmethod
    def zeros(cls, m):
        return cls(np.zeros((m, 3)), np.zeros((m, 4)), np.zeros((m, 3)))


class Stage2Model:
    """4D hash encoder, shared feature MLP and position/rotation/scale heads."""

    def __init__(self, enc_cfg=None, rng=None, hidden=HIDDEN, feature_width=FEATURE_WIDTH):
        rng = np.random.default_rng() if rng is None else rng
        enc_cfg = enc_cfg or HashGridConfig.stage2_default()
        if enc_cfg.dims != 4:
            raise InvalidParameterError("stage-2 encoder must be four-dimensional")
        self.encoder = HashGridEncoder(enc_cfg, rng=rng)
        self.phi_d = Mlp([enc_cfg.output_width, hidden, feature_width], rng=rng)
        self.phi_x = Mlp([feature_width, hidden, 3], rng=rng, zero_last=True)
        self.phi_r = Mlp([feature_width, hidden, 4], rng=rng, zero_last=True)
        self.phi_s = Mlp([feature_width, hidden, 3], rng=rng, zero_last=True)

    @property
    def heads(self):
        return (self.phi_x, self.phi_r, self.phi_s)

    @property
    def params(self):
        out = [self.encoder.tables] + self.phi_d.params
        for h in self.heads:
            out += h.params
        return out

    def forward(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != 4:
            raise ShapeMismatchError("stage-2 inputs are (position, time) rows")
        _check_finite(x)
        fh = self.encoder.encode(x)
        f4, c_d = self.phi_d.forward(fh)
        outs, caches = [], []
        for h in self.heads:
            y, c = h.forward(f4)
            outs.append(y)
            caches.append(c)
        return DeformationDelta(*outs), (x, c_d, caches)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_delta):
        x, c_d, caches = cache
        g_heads = []
        g_f4 = 0.0
        for h, c, g in zip(self.heads, caches, (grad_delta.dx, grad_delta.dr, grad_delta.ds)):
            gp, gi = h.backward(c, g)
            g_heads += gp
            g_f4 = g_f4 + gi
        g_d, g_fh = self.phi_d.backward(c_d, g_f4)
        g_tab, g_in = self.encoder.encode_backward(x, g_fh)
        return [g_tab] + g_d + g_heads, g_in


def stage2_delta(model, x):
    return model(x)


def spacetime(p_unit, t):
    p_unit = np.atleast_2d(p_unit)
    return np.concatenate([p_unit, np.full((len(p_unit), 1), float(t))], axis=1)


def apply_deformation(cloud, indices, delta, domain):
    """New cloud with ``delta`` applied to the Gaussians at ``indices``.

    Positions move by the world-scaled offset, quaternions and log-scales get
    additive offsets; opacity, color and every other Gaussian are untouched.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) != len(delta):
        raise ShapeMismatchError("one delta row per deformed Gaussian")
    if len(indices) and (indices.min() < 0 or indices.max() >= len(cloud)):
        raise IndexError("deformation index out of range")
    out = GaussianCloud(
        cloud.positions.copy(),
        cloud.log_scales.copy(),
        cloud.rotations.copy(),
        cloud.opacity_logits.copy(),
        cloud.color_logits.copy(),
        cloud.labels.copy(),
    )
    if len(indices):
        out.positions[indices] += domain.to_world_delta(delta.dx)
        out.rotations[indices] += delta.dr
        out.log_scales[indices] += delta.ds
    return out
