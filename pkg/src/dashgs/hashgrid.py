"""Multiresolution hash encoding over the unit cube in 3 or 4 dimensions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import InvalidParameterError, ShapeMismatchError

DEFAULT_PRIMES = (1, 2654435761, 805459861, 3674653429)
INIT_RANGE = 1e-4


@dataclass(frozen=True)
class HashGridConfig:
    dims: int = 4
    levels: int = 12
    n_min: int = 8
    n_max: int = 128
    table_size: int = 2**15
    features: int = 2
    primes: tuple = field(default=DEFAULT_PRIMES)

    def __post_init__(self):
        if self.dims not in (3, 4):
            raise InvalidParameterError("dims must be 3 or 4")
        if self.levels < 2:
            raise InvalidParameterError("need at least two levels")
        if not 1 <= self.n_min < self.n_max:
            raise InvalidParameterError("require 1 <= n_min < n_max")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise InvalidParameterError("table_size must be a power of two")
        if self.features < 1:
            raise InvalidParameterError("features must be >= 1")
        if len(self.primes) < self.dims or self.primes[0] != 1:
            raise InvalidParameterError("need one hash constant per dimension, the first equal to 1")
        if any(not 0 < p < 2**32 for p in self.primes):
            raise InvalidParameterError("hash constants must be 32-bit unsigned")

    @property
    def output_width(self):
        return self.levels * self.features

    @classmethod
    def stage1_default(cls):
        return cls(dims=3, levels=8, n_min=16, n_max=256, table_size=2**13, features=2)

    @classmethod
    def stage2_default(cls):
        return cls(dims=4, levels=12, n_min=8, n_max=128, table_size=2**15, features=2)


def growth_factor(cfg):
    return math.exp((math.log(cfg.n_max) - math.log(cfg.n_min)) / (cfg.levels - 1))


def level_resolution(cfg, level):
    """Lattice resolution ``floor(n_min * b**level)`` of a level.

    A relative slack of 1e-9 absorbs rounding in ``b**level`` so that exact
    geometric steps (e.g. 16 * 2**(3/3) = 32) are not floored one below.
    """
    if not 0 <= level < cfg.levels:
        raise InvalidParameterError(f"level {level} outside [0, {cfg.levels})")
    return int(math.floor(cfg.n_min * growth_factor(cfg) ** level * (1 + 1e-9)))


def level_resolutions(cfg):
    return np.array([level_resolution(cfg, l) for l in range(cfg.levels)], dtype=np.int64)


def hash_index(cfg, level, lattice_point):
    """Table slot of one lattice point (pure-Python reference of the kernel hash)."""
    del level  # every level shares the same table size and constants
    if len(lattice_point) != cfg.dims:
        raise ShapeMismatchError(f"expected {cfg.dims} coordinates")
    h = 0
    for x, p in zip(lattice_point, cfg.primes):
        if x < 0:
            raise InvalidParameterError("lattice coordinates must be non-negative")
        h ^= (int(x) * p) % 2**32
    return h % cfg.table_size


class HashGridEncoder:
    """Trainable tables of shape ``(levels, table_size, features)``."""

    def __init__(self, cfg, rng=None, tables=None):
        self.cfg = cfg
        self.resolutions = level_resolutions(cfg)
        self.primes = np.array(cfg.primes[: cfg.dims], dtype=np.uint64)
        shape = (cfg.levels, cfg.table_size, cfg.features)
        if tables is None:
            rng = np.random.default_rng() if rng is None else rng
            tables = rng.uniform(-INIT_RANGE, INIT_RANGE, size=shape)
        tables = np.ascontiguousarray(tables, dtype=np.float64)
        if tables.shape != shape:
            raise ShapeMismatchError(f"tables shape {tables.shape} != {shape}")
        self.tables = tables

    def _prepare(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.cfg.dims:
            raise ShapeMismatchError(f"expected points with {self.cfg.dims} coordinates")
        if not np.all(np.isfinite(x)):
            raise InvalidParameterError("non-finite encoder input")
        inside = (x >= 0.0) & (x <= 1.0)
        return np.ascontiguousarray(np.clip(x, 0.0, 1.0)), inside, single

    def encode(self, x):
        """Features of shape ``(..., levels * features)``, levels concatenated in order."""
        pts, _, single = self._prepare(x)
        out = np.empty((len(pts), self.cfg.output_width))
        kernels.encode_forward(pts, self.tables, self.resolutions, self.primes, out)
        return out[0] if single else out

    def encode_backward(self, x, upstream, grad_tables=None):
        """Returns ``(grad_tables, grad_x)``; table gradients are accumulated in place
        when ``grad_tables`` is given. Inputs that were clamped get zero gradient."""
        pts, inside, single = self._prepare(x)
        upstream = np.ascontiguousarray(np.atleast_2d(upstream), dtype=np.float64)
        if upstream.shape != (len(pts), self.cfg.output_width):
            raise ShapeMismatchError("upstream gradient shape does not match encoding")
        if grad_tables is None:
            grad_tables = np.zeros_like(self.tables)
        grad_x = np.empty_like(pts)
        kernels.encode_backward(
            pts, self.tables, self.resolutions, self.primes, upstream, grad_tables, grad_x
        )
        grad_x = np.where(inside, grad_x, 0.0)
        return grad_tables, (grad_x[0] if single else grad_x)

    def slots(self, lattice):
        lattice = np.ascontiguousarray(np.atleast_2d(lattice), dtype=np.int64)
        if np.any(lattice < 0):
            raise InvalidParameterError("lattice coordinates must be non-negative")
        return kernels.hash_slots(lattice, self.primes, np.int64(self.cfg.table_size))


@dataclass
class LevelStats:
    level: int
    resolution: int
    distinct_points: int
    distinct_slots: int
    max_load: int
    load_histogram: np.ndarray  # load_histogram[k] = number of slots holding exactly k points


def touched_corners(enc, x, level):
    """Distinct lattice corners read when encoding points ``x`` at one level."""
    pts, _, _ = enc._prepare(x)
    res = enc.resolutions[level]
    base = np.minimum(np.floor(pts * res).astype(np.int64), res - 1)
    bits = np.array([[(c >> i) & 1 for i in range(enc.cfg.dims)] for c in range(1 << enc.cfg.dims)])
    return np.unique((base[:, None, :] + bits[None]).reshape(-1, enc.cfg.dims), axis=0)


def collision_stats(enc, samples):
    """Per-level table occupancy.

    Integer ``samples`` are lattice points hashed as-is at every level. Float
    samples are points in the unit domain; each level then hashes the corners
    those points touch at its own resolution.
    """
    samples = np.atleast_2d(np.asarray(samples))
    if samples.size == 0:
        raise InvalidParameterError("empty lattice sample")
    out = []
    for lvl, res in enumerate(enc.resolutions):
        if samples.dtype.kind in "iu":
            lattice = np.unique(samples.astype(np.int64), axis=0)
        else:
            lattice = touched_corners(enc, samples, lvl)
        loads = np.bincount(enc.slots(lattice), minlength=enc.cfg.table_size)
        out.append(
            LevelStats(
                level=lvl,
                resolution=int(res),
                distinct_points=len(lattice),
                distinct_slots=int(np.count_nonzero(loads)),
                max_load=int(loads.max()),
                load_histogram=np.bincount(loads),
            )
        )
    return out


def full_lattice(resolution, dims):
    """All ``(resolution + 1) ** dims`` lattice points of one level."""
    axes = [np.arange(resolution + 1)] * dims
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, dims)
