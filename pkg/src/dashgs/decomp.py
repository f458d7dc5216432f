"""Dynamic/static split by motion magnitude, the static constraint, and
per-group adaptive density control."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidParameterError, ShapeMismatchError
from .scene import GaussianCloud, Label, logit, quat_to_rotmat


@dataclass(frozen=True)
class DecompositionConfig:
    top_percent: float = 20.0
    relabel_interval: int = 1000
    warmup: int = 3000
    lambda_s: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.top_percent < 100.0:
            raise InvalidParameterError("top_percent must lie in (0, 100)")
        if self.relabel_interval < 1 or self.warmup < 0:
            raise InvalidParameterError("intervals must be positive")
        if self.lambda_s < 0:
            raise InvalidParameterError("lambda_s must be non-negative")


@dataclass(frozen=True)
class DensityControlConfig:
    grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    densify_interval: int = 100
    opacity_reset_interval: int = 3000
    split_scale_fraction: float = 0.01  # of the scene extent; larger Gaussians split, smaller clone
    split_divisor: float = 1.6
    reset_ceiling: float = 0.01
    densify_from: int = 500
    densify_until: float = 0.5  # fraction of the stage's iterations
    max_gaussians: int = 5000
    enabled: bool = True

    def __post_init__(self):
        for name in ("grad_threshold", "prune_opacity", "split_scale_fraction", "split_divisor", "reset_ceiling"):
            if not getattr(self, name) > 0:
                raise InvalidParameterError(f"{name} must be positive")
        if self.densify_interval < 1 or self.opacity_reset_interval < 1:
            raise InvalidParameterError("intervals must be >= 1")
        if not 0.0 <= self.densify_until <= 1.0:
            raise InvalidParameterError("densify_until is a fraction of the stage in [0, 1]")

    def disabled(self):
        return replace(self, enabled=False)


def motion_threshold(magnitudes, top_percent):
    """Nearest-rank ``(100 - k)``-th percentile of the magnitudes."""
    m = np.asarray(magnitudes, dtype=np.float64).ravel()
    if m.size == 0:
        raise InvalidParameterError("empty magnitude list")
    if not np.all(np.isfinite(m)):
        raise InvalidParameterError("non-finite magnitudes")
    p = 100.0 - float(top_percent)
    rank = max(1, math.ceil(p * m.size / 100.0 - 1e-9))
    return float(np.sort(m)[rank - 1])


def classify(magnitudes, tau):
    """Dynamic iff strictly above ``tau``."""
    m = np.asarray(magnitudes, dtype=np.float64).ravel()
    return np.where(m > tau, Label.DYNAMIC, Label.STATIC).astype(np.uint8)


def decompose(magnitudes, top_percent):
    return classify(magnitudes, motion_threshold(magnitudes, top_percent))


def static_loss(deltas):
    """Mean Euclidean norm of the static set's motion offsets (0 when empty)."""
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 3)
    if len(d) == 0:
        return 0.0
    return float(np.mean(np.linalg.norm(d, axis=1)))


def static_loss_grad(deltas):
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 3)
    if len(d) == 0:
        return np.zeros((0, 3))
    n = np.linalg.norm(d, axis=1, keepdims=True)
    return np.divide(d, n * len(d), out=np.zeros_like(d), where=n > 0)


class GradientAccumulator:
    """Running mean of screen-space positional gradient norms over visible steps."""

    def __init__(self, n):
        self.total = np.zeros(n)
        self.count = np.zeros(n, dtype=np.int64)

    def add(self, norms, visible):
        self.total[visible] += norms[visible]
        self.count[visible] += 1

    def mean(self):
        return np.divide(self.total, self.count, out=np.zeros_like(self.total), where=self.count > 0)

    def reset(self, n):
        self.__init__(n)


@dataclass
class DensityResult:
    cloud: GaussianCloud
    parent: np.ndarray  # for each new row, the old row it derives from
    fresh: np.ndarray  # True for split children (no optimizer history)

    @property
    def keep(self):
        """Old-row map for :meth:`Adam.rebind` (-1 where state starts fresh)."""
        return np.where(self.fresh, -1, self.parent)


def density_control(cloud, mean_grads, configs, extent, rng):
    """Clone, split and prune each label group under its own configuration.

    ``configs`` maps ``Label`` to :class:`DensityControlConfig`; disabled or
    missing groups are left alone. New rows are ordered: survivors, clones,
    then both children of each split parent.
    """
    n = len(cloud)
    mean_grads = np.asarray(mean_grads, dtype=np.float64)
    if mean_grads.shape != (n,):
        raise ShapeMismatchError("one gradient statistic per Gaussian")
    opac = cloud.opacities
    max_scale = np.exp(cloud.log_scales).max(axis=1)
    prune = np.zeros(n, dtype=bool)
    clone = np.zeros(n, dtype=bool)
    split = np.zeros(n, dtype=bool)
    divisor = np.ones(n)
    for label, cfg in configs.items():
        if not cfg.enabled:
            continue
        group = cloud.labels == label
        prune |= group & (opac < cfg.prune_opacity)
        hot = group & ~prune & (mean_grads >= cfg.grad_threshold)
        small = max_scale <= cfg.split_scale_fraction * extent
        # growth cap: keep the highest-gradient candidates that fit the budget
        cand = np.flatnonzero(hot)
        budget = max(0, cfg.max_gaussians - n)
        if len(cand) > budget:
            cand = cand[np.argsort(-mean_grads[cand], kind="stable")[:budget]]
        chosen = np.zeros(n, dtype=bool)
        chosen[cand] = True
        clone |= chosen & small
        split |= chosen & ~small
        divisor[group] = cfg.split_divisor

    keep = ~prune & ~split
    parents = [np.flatnonzero(keep), np.flatnonzero(clone)]
    parts = [cloud.select(parents[0]), cloud.select(parents[1])]
    fresh = [np.zeros(len(parents[0]), bool), np.zeros(len(parents[1]), bool)]
    idx = np.flatnonzero(split)
    if len(idx):
        parent = cloud.select(idx)
        rot = quat_to_rotmat(parent.rotations)
        for _ in range(2):
            child = parent.copy()
            offs = rng.normal(size=(len(idx), 3)) * parent.scales
            child.positions = parent.positions + np.einsum("nij,nj->ni", rot, offs)
            child.log_scales = parent.log_scales - np.log(divisor[idx])[:, None]
            parts.append(child)
            parents.append(idx)
            fresh.append(np.ones(len(idx), bool))
    return DensityResult(GaussianCloud.concat(parts), np.concatenate(parents), np.concatenate(fresh))


def reset_opacity(cloud, mask, ceiling=0.01):
    """Clamp activated opacity to ``ceiling`` for the masked Gaussians (in place)."""
    cap = float(logit(ceiling))
    cloud.opacity_logits[mask] = np.minimum(cloud.opacity_logits[mask], cap)
    return cloud
