"""Core scene types: Gaussian clouds, cameras, posed datasets and their on-disk form."""

from __future__ import annotations

import copy
import enum
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatchError,
    EmptyDatasetError,
    InvalidParameterError,
    MalformedHeaderError,
    ShapeMismatchError,
    VersionMismatchError,
)

SCENE_FORMAT = "dash-scene"
SCENE_VERSION = 1
DOMAIN_MARGIN = 0.05


class Label(enum.IntEnum):
    STATIC = 0
    DYNAMIC = 1


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotmat(q):
    """Rotation matrices for wxyz quaternions of shape (..., 4); normalizes first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def covariance_from(scale, rotation):
    """Covariance ``R S S^T R^T`` from per-axis scales and a wxyz quaternion.

    Works on single Gaussians (shapes (3,), (4,)) or batches ((N, 3), (N, 4)).
    The product is formed entrywise so the result is exactly symmetric.
    """
    scale = np.asarray(scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if not (np.all(np.isfinite(scale)) and np.all(np.isfinite(rotation))):
        raise InvalidParameterError("non-finite scale or rotation")
    if np.any(scale < 0):
        raise InvalidParameterError("scale must be non-negative")
    if np.any(np.linalg.norm(rotation, axis=-1) == 0):
        raise InvalidParameterError("zero quaternion")
    M = quat_to_rotmat(rotation) * scale[..., None, :]
    return (M[..., :, None, :] * M[..., None, :, :]).sum(axis=-1)


@dataclass
class GaussianCloud:
    """Trainable Gaussian parameters in their unconstrained storage form.

    Scales are stored as logs, opacity as a logit and color as a logit of RGB;
    use the ``scales``/``opacities``/``colors`` properties for activated values.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    color_logits: np.ndarray
    labels: np.ndarray = None

    PARAM_NAMES = ("positions", "log_scales", "rotations", "opacity_logits", "color_logits")

    def __post_init__(self):
        self.positions = np.array(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.log_scales = np.array(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.array(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.array(self.opacity_logits, dtype=np.float64).reshape(n)
        self.color_logits = np.array(self.color_logits, dtype=np.float64).reshape(n, 3)
        if self.labels is None:
            self.labels = np.zeros(n, dtype=np.uint8)
        self.labels = np.array(self.labels, dtype=np.uint8).reshape(n)

    def __len__(self):
        return len(self.positions)

    @property
    def scales(self):
        return np.exp(self.log_scales)

    @property
    def opacities(self):
        return sigmoid(self.opacity_logits)

    @property
    def colors(self):
        return sigmoid(self.color_logits)

    @property
    def dynamic_indices(self):
        return np.flatnonzero(self.labels == Label.DYNAMIC)

    @property
    def static_indices(self):
        return np.flatnonzero(self.labels == Label.STATIC)

    def params(self):
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def copy(self):
        return copy.deepcopy(self)

    def select(self, idx):
        return GaussianCloud(
            **{k: v[idx] for k, v in self.params().items()}, labels=self.labels[idx]
        )

    @classmethod
    def concat(cls, clouds):
        clouds = list(clouds)
        return cls(
            **{k: np.concatenate([getattr(c, k) for c in clouds]) for k in cls.PARAM_NAMES},
            labels=np.concatenate([c.labels for c in clouds]),
        )

    def validate(self):
        if len(self) == 0:
            raise InvalidParameterError("empty Gaussian cloud")
        for name, arr in self.params().items():
            if not np.all(np.isfinite(arr)):
                raise InvalidParameterError(f"non-finite values in {name}")


@dataclass
class Camera:
    """Pinhole camera. ``R``/``t`` map world to camera space (x right, y down, z forward)."""

    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01

    def __post_init__(self):
        self.R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.array(self.t, dtype=np.float64).reshape(3)
        self.fx, self.fy = float(self.fx), float(self.fy)
        self.cx, self.cy = float(self.cx), float(self.cy)
        self.width, self.height = int(self.width), int(self.height)
        self.near = float(self.near)

    def validate(self):
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-5, rtol=0):
            raise InvalidParameterError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        if self.near <= 0:
            raise InvalidParameterError("near plane must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image size must be positive")

    @property
    def center(self):
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, eye, target, up, width, height, fov_x_deg=60.0, near=0.01):
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        f = 0.5 * width / math.tan(math.radians(fov_x_deg) / 2)
        return cls(R, -R @ eye, f, f, (width - 1) / 2, (height - 1) / 2, width, height, near)

    def to_json(self):
        return {
            "R": self.R.tolist(),
            "t": self.t.tolist(),
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "near": self.near,
        }

    @classmethod
    def from_json(cls, d):
        return cls(d["R"], d["t"], d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"], d["near"])


@dataclass
class View:
    camera: Camera
    image: np.ndarray  # uint8, H x W x 3
    t: float
    view_index: int
    time_index: int
    split: str = "train"

    @property
    def image_f(self):
        return self.image.astype(np.float64) / 255.0


@dataclass
class SceneDataset:
    views: list
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    ground_truth: dict = None
    name: str = ""

    def __post_init__(self):
        self.bbox_min = np.array(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.array(self.bbox_max, dtype=np.float64).reshape(3)

    @property
    def width(self):
        return self.views[0].camera.width

    @property
    def height(self):
        return self.views[0].camera.height

    def split(self, name):
        return [v for v in self.views if v.split == name]

    @property
    def timestamps(self):
        return sorted({v.t for v in self.views})

    def domain(self):
        return Domain.from_bbox(self.bbox_min, self.bbox_max)

    def validate(self):
        if not self.views:
            raise EmptyDatasetError()
        h, w = self.views[0].image.shape[:2]
        for v in self.views:
            if v.image.shape != (h, w, 3) or v.camera.width != w or v.camera.height != h:
                raise DimensionMismatchError()
            if not 0.0 <= v.t <= 1.0:
                raise InvalidParameterError(f"timestamp {v.t} outside [0, 1]")
            v.camera.validate()
        if np.any(self.bbox_max <= self.bbox_min):
            raise InvalidParameterError("degenerate bounding box")


@dataclass
class Domain:
    """Affine map from world positions to the encoders' unit cube."""

    lo: np.ndarray
    extent: np.ndarray

    @classmethod
    def from_bbox(cls, bbox_min, bbox_max, margin=DOMAIN_MARGIN):
        bbox_min = np.asarray(bbox_min, dtype=np.float64)
        bbox_max = np.asarray(bbox_max, dtype=np.float64)
        ext = bbox_max - bbox_min
        lo = bbox_min - margin * ext
        return cls(lo, ext * (1 + 2 * margin))

    def to_unit(self, p):
        return (np.asarray(p) - self.lo) / self.extent

    def to_world_delta(self, d):
        return np.asarray(d) * self.extent


# ---------------------------------------------------------------------------
# PPM and scene directory I/O


def write_ppm(path, image):
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ShapeMismatchError("PPM images must be H x W x 3")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(image.tobytes())


def read_ppm(path):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedHeaderError(f"{path}: truncated PPM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P6":
        raise MalformedHeaderError(f"{path}: not a P6 PPM")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise MalformedHeaderError(f"{path}: bad PPM header") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise MalformedHeaderError(f"{path}: unsupported PPM header")
    payload = data[pos : pos + w * h * 3]
    if len(payload) != w * h * 3:
        raise MalformedHeaderError(f"{path}: truncated PPM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def frame_name(view_index, time_index):
    return f"frames/{view_index:03d}_{time_index:03d}.ppm"


def _json_dump(obj, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def save_scene(dataset, path):
    """Write ``meta.json`` plus one P6 frame per view (and ``labels.json`` when known)."""
    if not dataset.views:
        raise EmptyDatasetError()
    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    views = []
    for v in dataset.views:
        name = frame_name(v.view_index, v.time_index)
        write_ppm(path / name, v.image)
        views.append(
            {
                "frame": name,
                "view": v.view_index,
                "time_index": v.time_index,
                "t": float(v.t),
                "split": v.split,
                "camera": v.camera.to_json(),
            }
        )
    meta = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "name": dataset.name,
        "width": dataset.width,
        "height": dataset.height,
        "bbox": {"min": dataset.bbox_min.tolist(), "max": dataset.bbox_max.tolist()},
        "views": views,
    }
    if dataset.ground_truth is not None:
        meta["ground_truth"] = dataset.ground_truth
        if "labels" in dataset.ground_truth:
            _json_dump([int(x) for x in dataset.ground_truth["labels"]], path / "labels.json")
    _json_dump(meta, path / "meta.json")


def load_scene(path):
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(os.fspath(meta_path))
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedHeaderError(f"meta.json: {exc}") from None
    if not isinstance(meta, dict) or meta.get("format") != SCENE_FORMAT:
        raise MalformedHeaderError("meta.json is not a scene description")
    if meta.get("version") != SCENE_VERSION:
        raise VersionMismatchError(f"scene version {meta.get('version')} != {SCENE_VERSION}")
    if not meta.get("views"):
        raise EmptyDatasetError()
    views = []
    for entry in meta["views"]:
        image = read_ppm(path / entry["frame"])
        cam = Camera.from_json(entry["camera"])
        if image.shape != (meta["height"], meta["width"], 3) or (cam.width, cam.height) != (
            meta["width"],
            meta["height"],
        ):
            raise DimensionMismatchError(f"dimension mismatch in {entry['frame']}")
        views.append(View(cam, image, entry["t"], entry["view"], entry["time_index"], entry["split"]))
    ds = SceneDataset(
        views,
        meta["bbox"]["min"],
        meta["bbox"]["max"],
        ground_truth=meta.get("ground_truth"),
        name=meta.get("name", ""),
    )
    ds.validate()
    return ds


def cloud_to_json(cloud):
    d = {k: v.tolist() for k, v in cloud.params().items()}
    d["labels"] = cloud.labels.tolist()
    return d


def cloud_from_json(d):
    return GaussianCloud(**{k: d[k] for k in GaussianCloud.PARAM_NAMES}, labels=d.get("labels"))
