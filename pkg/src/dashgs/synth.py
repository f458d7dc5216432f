"""Synthetic dynamic scenes with known labels and trajectories.

Frames are rendered with this package's own renderer from the exact
ground-truth positions, so a dataset is reproducible from its metadata.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidParameterError, TrajectoryError
from .render import render, to_uint8
from .scene import (
    Camera,
    GaussianCloud,
    Label,
    SceneDataset,
    View,
    cloud_from_json,
    cloud_to_json,
    logit,
)

KINDS = ("static", "linear", "circular", "sinusoidal")


@dataclass(frozen=True)
class TrajectorySpec:
    """Closed-form motion of a rigid group around its ``base`` point.

    linear:     base + velocity * t
    circular:   base + radius * (cos(wt + phase) - cos(phase), sin(wt + phase) - sin(phase), 0)
    sinusoidal: base + amplitude * axis * cos(2 pi frequency t)
    """

    kind: str = "static"
    velocity: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.0
    angular_rate: float = 0.0
    phase: float = 0.0
    amplitude: float = 0.0
    frequency: float = 0.0
    axis: tuple = (1.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidParameterError(f"unknown trajectory kind {self.kind!r}")

    def to_json(self):
        d = asdict(self)
        d["velocity"] = list(self.velocity)
        d["axis"] = list(self.axis)
        return d

    @classmethod
    def from_json(cls, d):
        d = dict(d)
        d["velocity"] = tuple(d["velocity"])
        d["axis"] = tuple(d["axis"])
        return cls(**d)


def trajectory_offset(spec, t):
    """Displacement from the anchor at time(s) ``t``; shape ``(..., 3)``."""
    t = np.asarray(t, dtype=np.float64)[..., None]
    if spec.kind == "static":
        return np.zeros(t.shape[:-1] + (3,))
    if spec.kind == "linear":
        return t * np.asarray(spec.velocity, dtype=np.float64)
    if spec.kind == "circular":
        a = spec.angular_rate * t + spec.phase
        return spec.radius * np.concatenate(
            [np.cos(a) - math.cos(spec.phase), np.sin(a) - math.sin(spec.phase), np.zeros_like(a)], axis=-1
        )
    if spec.kind == "sinusoidal":
        axis = np.asarray(spec.axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        return spec.amplitude * np.cos(2 * math.pi * spec.frequency * t) * axis
    raise InvalidParameterError(f"unknown trajectory kind {spec.kind!r}")


def trajectory_position(spec, base, t):
    return np.asarray(base, dtype=np.float64) + trajectory_offset(spec, t)


@dataclass(frozen=True)
class SynthSpec:
    n_static: int = 400
    n_dynamic: int = 100
    n_clusters: int = 5
    n_cameras: int = 8
    n_times: int = 16
    resolution: int = 64
    fov_deg: float = 50.0
    ring_radius: float = 4.0
    ring_height: float = 1.5
    held_out: bool = True
    ground_fraction: float = 0.75
    half_size: float = 1.5
    trajectory_kinds: tuple = ("linear", "circular", "sinusoidal", "linear", "circular")
    background: tuple = (0.0, 0.0, 0.0)
    name: str = "custom"

    def __post_init__(self):
        if self.n_cameras < 2:
            raise InvalidParameterError("at least 2 cameras required")
        if self.resolution < 16:
            raise InvalidParameterError("resolution must be >= 16")
        if self.n_static < 0 or self.n_dynamic < 0 or self.n_static + self.n_dynamic == 0:
            raise InvalidParameterError("need at least one Gaussian")
        if self.n_times < 1:
            raise InvalidParameterError("need at least one timestamp")
        if self.n_dynamic and self.n_clusters < 1:
            raise InvalidParameterError("dynamic Gaussians need at least one cluster")


PRESETS = {
    "orbit-64": SynthSpec(name="orbit-64"),
    # small scene for smoke tests
    "tiny": SynthSpec(
        n_static=60, n_dynamic=20, n_clusters=2, n_cameras=4, n_times=4, resolution=24, name="tiny",
        trajectory_kinds=("linear", "circular"),
    ),
}


def preset(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise InvalidParameterError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def scene_bbox(spec):
    h = spec.half_size
    return np.array([-h, -h, -0.2]), np.array([h, h, 1.4])


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _static_cloud(spec, rng):
    n = spec.n_static
    n_ground = int(round(spec.ground_fraction * n))
    n_blob = n - n_ground
    h = spec.half_size * 0.95
    ground = np.column_stack([rng.uniform(-h, h, n_ground), rng.uniform(-h, h, n_ground), np.zeros(n_ground)])
    g_scales = np.column_stack([np.full(n_ground, 0.12), np.full(n_ground, 0.12), np.full(n_ground, 0.01)])
    g_scales *= rng.uniform(0.8, 1.25, size=(n_ground, 1))
    # checker-ish albedo so the floor carries texture
    checker = (np.floor(ground[:, 0] * 2) + np.floor(ground[:, 1] * 2)) % 2
    g_col = np.where(checker[:, None] > 0, [0.75, 0.7, 0.55], [0.35, 0.45, 0.3]) + rng.normal(0, 0.04, (n_ground, 3))

    n_pillars = 4
    centres = np.array([[-0.9, -0.9], [0.9, -0.9], [-0.9, 0.9], [0.9, 0.9]])[:n_pillars]
    which = np.arange(n_blob) % n_pillars
    blob = np.column_stack(
        [
            centres[which, 0] + rng.normal(0, 0.08, n_blob),
            centres[which, 1] + rng.normal(0, 0.08, n_blob),
            rng.uniform(0.05, 0.9, n_blob),
        ]
    )
    b_scales = rng.uniform(0.05, 0.09, size=(n_blob, 3))
    palette = np.array([[0.2, 0.3, 0.8], [0.8, 0.8, 0.2], [0.2, 0.7, 0.7], [0.6, 0.3, 0.6]])
    b_col = palette[which] + rng.normal(0, 0.05, (n_blob, 3))

    pos = np.concatenate([ground, blob])
    scales = np.concatenate([g_scales, b_scales])
    rot = np.concatenate([np.tile([1.0, 0, 0, 0], (n_ground, 1)), _random_quats(rng, n_blob)])
    col = np.clip(np.concatenate([g_col, b_col]), 0.02, 0.98)
    opac = rng.uniform(0.85, 0.97, n)
    return GaussianCloud(pos, np.log(scales), rot, logit(opac), logit(col), np.full(n, Label.STATIC))


def _cluster_trajectory(kind, rng):
    if kind == "linear":
        ang = rng.uniform(0, 2 * math.pi)
        speed = rng.uniform(0.45, 0.65)
        return TrajectorySpec("linear", velocity=(speed * math.cos(ang), speed * math.sin(ang), rng.uniform(-0.1, 0.1)))
    if kind == "circular":
        return TrajectorySpec(
            "circular", radius=rng.uniform(0.25, 0.35), angular_rate=rng.choice([-1, 1]) * rng.uniform(2.0, 3.0),
            phase=rng.uniform(0, 2 * math.pi),
        )
    if kind == "sinusoidal":
        axis = rng.normal(size=3)
        axis[2] *= 0.3
        return TrajectorySpec(
            "sinusoidal", amplitude=rng.uniform(0.3, 0.4), frequency=rng.uniform(0.4, 0.6),
            axis=tuple(axis / np.linalg.norm(axis)),
        )
    return TrajectorySpec("static")


def _dynamic_cloud(spec, rng):
    n = spec.n_dynamic
    k = spec.n_clusters
    cluster = np.arange(n) % k
    ring = np.linspace(0, 2 * math.pi, k, endpoint=False) + rng.uniform(0, 2 * math.pi)
    centres = np.column_stack([0.45 * np.cos(ring), 0.45 * np.sin(ring), rng.uniform(0.35, 0.7, k)])
    pos = centres[cluster] + rng.normal(0, 0.09, size=(n, 3))
    scales = rng.uniform(0.04, 0.07, size=(n, 3))
    hues = np.array([[0.95, 0.2, 0.15], [0.15, 0.85, 0.2], [0.95, 0.5, 0.05], [0.9, 0.2, 0.8], [0.1, 0.5, 0.95]])
    col = np.clip(hues[cluster % len(hues)] + rng.normal(0, 0.05, (n, 3)), 0.02, 0.98)
    opac = rng.uniform(0.85, 0.97, n)
    cloud = GaussianCloud(pos, np.log(scales), _random_quats(rng, n), logit(opac), logit(col), np.full(n, Label.DYNAMIC))
    kinds = spec.trajectory_kinds
    trajs = [_cluster_trajectory(kinds[c % len(kinds)], rng) for c in range(k)]
    return cloud, [trajs[c] for c in cluster]


def _check_inside(positions, trajs, lo, hi):
    ts = np.linspace(0.0, 1.0, 257)
    for i, (p, tr) in enumerate(zip(positions, trajs)):
        path = trajectory_position(tr, p, ts)
        if np.any(path < lo) or np.any(path > hi):
            raise TrajectoryError(f"trajectory of Gaussian {i} leaves the bounding box")


def cameras(spec):
    """Training ring plus (optionally) one held-out camera between two ring stops."""
    target = np.array([0.0, 0.0, 0.3])
    up = np.array([0.0, 0.0, 1.0])
    cams = []
    for i in range(spec.n_cameras):
        a = 2 * math.pi * i / spec.n_cameras
        eye = [spec.ring_radius * math.cos(a), spec.ring_radius * math.sin(a), spec.ring_height]
        cams.append(Camera.look_at(eye, target, up, spec.resolution, spec.resolution, spec.fov_deg))
    held = []
    if spec.held_out:
        a = 2 * math.pi * 0.5 / spec.n_cameras
        eye = [0.95 * spec.ring_radius * math.cos(a), 0.95 * spec.ring_radius * math.sin(a), 0.85 * spec.ring_height]
        held.append(Camera.look_at(eye, target, up, spec.resolution, spec.resolution, spec.fov_deg))
    return cams, held


def timestamps(n_times):
    if n_times == 1:
        return [0.0]
    return [i / (n_times - 1) for i in range(n_times)]


def cloud_at(canonical, trajs, t):
    """Ground-truth cloud at time ``t``."""
    out = canonical.copy()
    for i, tr in enumerate(trajs):
        if tr.kind != "static":
            out.positions[i] = trajectory_position(tr, canonical.positions[i], t)
    return out


def generate_scene(spec, seed=0):
    """Returns a :class:`SceneDataset` whose ``ground_truth`` holds the canonical
    cloud, per-Gaussian trajectories and labels."""
    rng = np.random.default_rng(seed)
    static = _static_cloud(spec, rng)
    parts = [static]
    trajs = [TrajectorySpec("static")] * spec.n_static
    if spec.n_dynamic:
        dyn, dyn_trajs = _dynamic_cloud(spec, rng)
        parts.append(dyn)
        trajs = trajs + dyn_trajs
    canonical = GaussianCloud.concat(parts)
    lo, hi = scene_bbox(spec)
    _check_inside(canonical.positions, trajs, lo, hi)

    train_cams, held_cams = cameras(spec)
    bg = np.asarray(spec.background, dtype=np.float64)
    views = []
    for ti, t in enumerate(timestamps(spec.n_times)):
        state = cloud_at(canonical, trajs, t)
        for vi, cam in enumerate(train_cams + held_cams):
            img = to_uint8(render(state, cam, background=bg).image)
            split = "train" if vi < len(train_cams) else "test"
            views.append(View(cam, img, t, vi, ti, split))
    views.sort(key=lambda v: (v.view_index, v.time_index))
    gt = {
        "cloud": cloud_to_json(canonical),
        "trajectories": [tr.to_json() for tr in trajs],
        "labels": canonical.labels.tolist(),
        "background": bg.tolist(),
        "seed": int(seed),
        "spec": _spec_json(spec),
    }
    ds = SceneDataset(views, lo, hi, ground_truth=gt, name=spec.name)
    ds.validate()
    return ds


def _spec_json(spec):
    d = asdict(spec)
    d["trajectory_kinds"] = list(spec.trajectory_kinds)
    d["background"] = list(spec.background)
    return d


def ground_truth(dataset):
    """``(canonical cloud, trajectories, background)`` from a generated dataset."""
    gt = dataset.ground_truth
    if not gt or "cloud" not in gt:
        raise InvalidParameterError("dataset carries no ground-truth cloud")
    return (
        cloud_from_json(gt["cloud"]),
        [TrajectorySpec.from_json(d) for d in gt["trajectories"]],
        np.asarray(gt.get("background", (0.0, 0.0, 0.0)), dtype=np.float64),
    )


def init_cloud(dataset, rng, noise=0.01):
    """Training initialization: ground-truth positions at t=0 plus isotropic noise
    (``noise`` times the per-axis bbox extent); scale, rotation, opacity and color
    are randomized. All Gaussians start static."""
    canonical, trajs, _ = ground_truth(dataset)
    canonical = cloud_at(canonical, trajs, 0.0)
    n = len(canonical)
    ext = dataset.bbox_max - dataset.bbox_min
    pos = canonical.positions + rng.normal(size=(n, 3)) * noise * ext
    log_scales = np.log(rng.uniform(0.03, 0.08, size=(n, 3)))
    opac = rng.uniform(0.3, 0.7, n)
    col = rng.uniform(0.2, 0.8, size=(n, 3))
    return GaussianCloud(pos, log_scales, _random_quats(rng, n), logit(opac), logit(col))


__all__ = [
    "PRESETS",
    "SynthSpec",
    "TrajectorySpec",
    "cameras",
    "cloud_at",
    "generate_scene",
    "ground_truth",
    "init_cloud",
    "preset",
    "trajectory_offset",
    "trajectory_position",
]
