import hashlib
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_cloud
from dashgs import checkpoint as ck
from dashgs.errors import (
    DimensionMismatchError,
    EmptyDatasetError,
    InvalidParameterError,
    MalformedHeaderError,
    NotACheckpointError,
    UnexpectedEOFError,
    VersionMismatchError,
)
from dashgs.scene import (
    Camera,
    Domain,
    SceneDataset,
    covariance_from,
    load_scene,
    read_ppm,
    save_scene,
    write_ppm,
)
from oracles import ref_cov3d


def test_covariance_identity():
    assert np.array_equal(covariance_from([1, 1, 1], [1, 0, 0, 0]), np.eye(3))


def test_covariance_axis_aligned():
    assert np.allclose(covariance_from([2, 1, 1], [1, 0, 0, 0]), np.diag([4.0, 1.0, 1.0]), atol=0)


def test_covariance_quarter_turn_about_z():
    h = math.sqrt(0.5)
    sigma = covariance_from([2, 1, 1], [h, 0, 0, h])
    assert np.allclose(sigma, np.diag([1.0, 4.0, 1.0]), atol=1e-12)


def test_covariance_symmetric_psd_and_double_cover():
    rng = np.random.default_rng(0)
    s = rng.uniform(1e-3, 3.0, size=(1000, 3))
    q = rng.normal(size=(1000, 4))
    sig = covariance_from(s, q)
    assert np.array_equal(sig, np.swapaxes(sig, 1, 2))
    assert np.linalg.eigvalsh(sig).min() >= -1e-9
    assert np.array_equal(sig, covariance_from(s, -q))


def test_covariance_matches_quaternion_sandwich():
    rng = np.random.default_rng(1)
    for _ in range(50):
        s = rng.uniform(0.01, 2.0, 3)
        q = rng.normal(size=4)
        assert np.allclose(covariance_from(s, q), ref_cov3d(s, q), rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("bad", [[np.nan, 1, 1], [1, np.inf, 1]])
def test_covariance_rejects_non_finite(bad):
    with pytest.raises(InvalidParameterError):
        covariance_from(bad, [1, 0, 0, 0])


def test_camera_validation():
    cam = Camera.look_at((0, -3, 1), (0, 0, 0), (0, 0, 1), 16, 16)
    cam.validate()
    assert np.allclose(cam.center, (0, -3, 1))
    bad = Camera(np.diag([1.0, 1.0, 2.0]), np.zeros(3), 10, 10, 8, 8, 16, 16)
    with pytest.raises(InvalidParameterError):
        bad.validate()
    with pytest.raises(InvalidParameterError):
        Camera(np.eye(3), np.zeros(3), -1, 10, 8, 8, 16, 16).validate()


def test_domain_maps_bbox_inside_unit_cube():
    d = Domain.from_bbox([-1, -2, 0], [1, 2, 1])
    u = d.to_unit(np.array([[-1, -2, 0], [1, 2, 1]]))
    assert np.all(u > 0) and np.all(u < 1)
    assert np.allclose(u[0], 0.05 / 1.1)
    assert np.allclose(d.to_world_delta([1, 1, 1]), [2.2, 4.4, 1.1])


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)


def test_ppm_bad_header(tmp_path):
    (tmp_path / "x.ppm").write_bytes(b"P3\n1 1\n255\n\0\0\0")
    with pytest.raises(MalformedHeaderError):
        read_ppm(tmp_path / "x.ppm")
    (tmp_path / "y.ppm").write_bytes(b"P6\n2 2\n255\n\0\0\0")
    with pytest.raises(MalformedHeaderError):
        read_ppm(tmp_path / "y.ppm")


def _dir_digest(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_scene_round_trip(tmp_path, tiny_scene):
    save_scene(tiny_scene, tmp_path / "a")
    back = load_scene(tmp_path / "a")
    assert len(back.views) == len(tiny_scene.views)
    for u, v in zip(tiny_scene.views, back.views):
        assert np.array_equal(u.image, v.image)
        assert u.t == v.t and u.split == v.split
        assert np.array_equal(u.camera.R, v.camera.R) and np.array_equal(u.camera.t, v.camera.t)
    assert np.array_equal(back.bbox_min, tiny_scene.bbox_min)
    assert back.ground_truth == tiny_scene.ground_truth
    save_scene(back, tmp_path / "b")
    assert _dir_digest(tmp_path / "a") == _dir_digest(tmp_path / "b")


def test_two_view_scene_reload_identical(tmp_path, tiny_scene):
    two = SceneDataset(tiny_scene.views[:2], tiny_scene.bbox_min, tiny_scene.bbox_max)
    save_scene(two, tmp_path / "a")
    save_scene(load_scene(tmp_path / "a"), tmp_path / "b")
    assert _dir_digest(tmp_path / "a") == _dir_digest(tmp_path / "b")


def test_empty_dataset(tmp_path):
    with pytest.raises(EmptyDatasetError, match="empty dataset"):
        save_scene(SceneDataset([], [0, 0, 0], [1, 1, 1]), tmp_path / "e")


def test_width_mismatch(tmp_path, tiny_scene):
    save_scene(tiny_scene, tmp_path / "s")
    frame = tmp_path / "s" / "frames" / "000_000.ppm"
    write_ppm(frame, np.zeros((tiny_scene.height, tiny_scene.width + 1, 3), np.uint8))
    with pytest.raises(DimensionMismatchError, match="dimension mismatch"):
        load_scene(tmp_path / "s")


def test_scene_version_mismatch(tmp_path, tiny_scene):
    save_scene(tiny_scene, tmp_path / "s")
    meta = tmp_path / "s" / "meta.json"
    meta.write_text(meta.read_text().replace('"version": 1', '"version": 99'))
    with pytest.raises(VersionMismatchError):
        load_scene(tmp_path / "s")


def test_error_codes_are_distinct():
    codes = {e.code for e in (DimensionMismatchError(), EmptyDatasetError(), MalformedHeaderError("x"),
                              VersionMismatchError("x"), NotACheckpointError(), UnexpectedEOFError())}
    assert len(codes) == 6


def _random_checkpoint(seed):
    rng = np.random.default_rng(seed)
    cloud = random_cloud(rng, 17)
    arrays = {f"cloud.{k}": v for k, v in cloud.params().items()}
    arrays["labels"] = rng.integers(0, 2, 17).astype(np.uint8)
    arrays["tables"] = rng.uniform(-1, 1, size=(3, 8, 2))
    arrays["f32"] = rng.normal(size=(4,)).astype(np.float32)
    arrays["idx"] = np.arange(5, dtype=np.int64)
    return ck.Checkpoint(arrays, {"kind": "test", "seed": seed})


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_checkpoint_round_trip_bit_identical(seed):
    c = _random_checkpoint(seed)
    blob = ck.dumps(c)
    back = ck.loads(blob)
    assert back.meta == c.meta
    assert set(back.arrays) == set(c.arrays)
    for k, v in c.arrays.items():
        assert back.arrays[k].dtype == v.dtype
        assert back.arrays[k].tobytes() == v.tobytes()
    assert ck.dumps(back) == blob


def test_checkpoint_header_layout():
    blob = ck.dumps(_random_checkpoint(0))
    assert blob[:4] == b"DASH"
    assert int.from_bytes(blob[4:8], "little") == ck.VERSION


def test_checkpoint_wrong_magic():
    blob = bytearray(ck.dumps(_random_checkpoint(0)))
    blob[:4] = b"NOPE"
    with pytest.raises(NotACheckpointError, match="not a checkpoint"):
        ck.loads(bytes(blob))


def test_checkpoint_truncated(tmp_path):
    blob = ck.dumps(_random_checkpoint(0))
    (tmp_path / "c.bin").write_bytes(blob[: len(blob) - 10])
    with pytest.raises(UnexpectedEOFError, match="unexpected EOF"):
        ck.load_checkpoint(tmp_path / "c.bin")


def test_checkpoint_version_mismatch():
    blob = bytearray(ck.dumps(_random_checkpoint(0)))
    blob[4:8] = (7).to_bytes(4, "little")
    with pytest.raises(VersionMismatchError):
        ck.loads(bytes(blob))
