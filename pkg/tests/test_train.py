import dataclasses
import math

import numpy as np
import pytest

from conftest import make_camera
from dashgs.decomp import DecompositionConfig, DensityControlConfig
from dashgs.hashgrid import HashGridConfig, HashGridEncoder
from dashgs.metrics import dssim_loss, l1_loss
from dashgs.render import render
from dashgs.scene import GaussianCloud, Label, SceneDataset, View, logit
from dashgs.synth import SynthSpec, generate_scene
from dashgs.train import (
    DashModel,
    LossWeights,
    TrainConfig,
    dump_config,
    initial_cloud,
    label_quality,
    load_config,
    load_model,
    new_stage1,
    new_stage2,
    position_lr,
    save_model,
    smooth_reg,
    stage1_step,
    stage2_cloud,
    stage2_step,
    train,
    weighted_label_quality,
)
from oracles import ref_encode

ENC = HashGridConfig(dims=4, levels=3, n_min=4, n_max=16, table_size=2**8, features=2)
ENC1 = HashGridConfig(dims=3, levels=3, n_min=4, n_max=16, table_size=2**8, features=2)


def small_cfg(**kw):
    base = dict(iters_stage1=4, iters_stage2=4, encoder_stage1=ENC1, encoder_stage2=ENC,
                decomposition=DecompositionConfig(warmup=2, relabel_interval=1))
    base.update(kw)
    return TrainConfig(**base)


def _encoder(seed=0):
    enc = HashGridEncoder(ENC, rng=np.random.default_rng(seed))
    enc.tables[:] = np.random.default_rng(seed + 100).uniform(-1, 1, enc.tables.shape)
    return enc


# -- smoothness regulariser ------------------------------------------------------------


def test_smooth_reg_zero_without_perturbation():
    enc = _encoder()
    x = np.random.default_rng(0).uniform(size=(7, 4))
    loss, grad = smooth_reg(enc, x, np.zeros(4), None, eps=np.zeros_like(x))
    assert loss == 0.0 and not grad.any()


def test_smooth_reg_zero_for_constant_field():
    enc = HashGridEncoder(ENC, tables=np.zeros((ENC.levels, ENC.table_size, ENC.features)))
    x = np.random.default_rng(0).uniform(size=(7, 4))
    loss, _ = smooth_reg(enc, x, np.full(4, 0.05), np.random.default_rng(1))
    assert loss == 0.0


def test_smooth_reg_matches_reference_encoding():
    enc = _encoder(3)
    rng = np.random.default_rng(3)
    x = rng.uniform(0.1, 0.9, size=(9, 4))
    eps = rng.uniform(-0.02, 0.02, size=x.shape)
    loss, _ = smooth_reg(enc, x, None, None, eps=eps)
    ref = np.mean([
        np.sum((ref_encode(a, enc.tables, ENC.n_min, ENC.n_max, ENC.primes)
                - ref_encode(a + e, enc.tables, ENC.n_min, ENC.n_max, ENC.primes)) ** 2)
        for a, e in zip(x, eps)
    ])
    assert loss == pytest.approx(ref, rel=1e-10)


def test_smooth_reg_table_gradient_matches_finite_differences():
    enc = _encoder(5)
    rng = np.random.default_rng(5)
    x = rng.uniform(0.1, 0.9, size=(6, 4))
    eps = rng.uniform(-0.05, 0.05, size=x.shape)
    _, grad = smooth_reg(enc, x, None, None, eps=eps)
    touched = np.argwhere(grad != 0)
    assert len(touched) > 0
    h = 1e-6
    for ix in touched[rng.choice(len(touched), 20, replace=False)]:
        ix = tuple(ix)
        old = enc.tables[ix]
        enc.tables[ix] = old + h
        fp = smooth_reg(enc, x, None, None, eps=eps)[0]
        enc.tables[ix] = old - h
        fm = smooth_reg(enc, x, None, None, eps=eps)[0]
        enc.tables[ix] = old
        fd = (fp - fm) / (2 * h)
        # the loss is quadratic in the tables, so only rounding separates the two
        assert abs(fd - grad[ix]) <= 1e-6 * max(abs(fd), 1e-3)


def test_smooth_reg_accumulates_weighted():
    enc = _encoder(1)
    x = np.random.default_rng(1).uniform(size=(5, 4))
    eps = np.full_like(x, 0.01)
    _, g1 = smooth_reg(enc, x, None, None, eps=eps)
    acc = np.ones_like(enc.tables)
    smooth_reg(enc, x, None, None, eps=eps, grad_tables=acc, weight=0.25)
    assert np.allclose(acc, 1 + 0.25 * g1)


# -- small helpers ---------------------------------------------------------------------


def test_position_lr_schedule():
    lrs = TrainConfig().lrs
    assert position_lr(lrs, 2.0, 0, 100) == pytest.approx(3.2e-4)
    assert position_lr(lrs, 2.0, 100, 100) == pytest.approx(3.2e-6)
    assert position_lr(lrs, 1.0, 50, 100) == pytest.approx(1.6e-5)
    assert position_lr(lrs, 1.0, 500, 100) == pytest.approx(1.6e-6)


def test_label_quality_examples():
    gt = np.array([0, 0, 1, 1])
    assert label_quality([0, 0, 1, 1], np.arange(4), gt) == (1.0, 1.0)
    assert label_quality([0, 0, 0, 1], np.arange(4), gt) == (0.5, 2 / 3)
    # rows inherit the truth of the Gaussian they descend from
    assert label_quality([1, 0], [2, 0], gt) == (1.0, 1.0)
    r, p = weighted_label_quality([0, 0, 0, 1], np.arange(4), gt, [1, 1, 3, 1])
    assert r == pytest.approx(0.25) and p == pytest.approx(2 / 5)


def test_config_ini_round_trip(tmp_path):
    cfg = TrainConfig(seed=7, iters_stage1=11, no_smooth_reg=True,
                      weights=LossWeights(lambda_c=0.3), encoder_stage2=ENC)
    text = dump_config(cfg)
    (tmp_path / "c.ini").write_text(text)
    back = load_config(tmp_path / "c.ini")
    assert back == cfg
    assert dump_config(back) == text


def test_config_rejects_unknown_keys(tmp_path):
    from dashgs.errors import InvalidParameterError

    (tmp_path / "a.ini").write_text("[train]\nbogus = 1\n")
    with pytest.raises(InvalidParameterError):
        load_config(tmp_path / "a.ini")
    (tmp_path / "b.ini").write_text("[nope]\nx = 1\n")
    with pytest.raises(InvalidParameterError):
        load_config(tmp_path / "b.ini")


# -- steps -----------------------------------------------------------------------------


def test_stage1_breakdown_matches_independent_losses(tiny_scene):
    cfg = small_cfg()
    s = new_stage1(cfg, tiny_scene, initial_cloud(tiny_scene, cfg))
    view = tiny_scene.split("train")[3]
    img = render(s.cloud, view.camera).image  # zero-initialised head: no motion yet
    bd = stage1_step(s, view)
    assert bd["l1"] == pytest.approx(l1_loss(img, view.image_f), abs=1e-12)
    assert bd["dssim"] == pytest.approx(dssim_loss(img, view.image_f), abs=1e-12)
    w = cfg.weights
    total = (1 - w.lambda_c) * bd["l1"] + w.lambda_c * bd["dssim"] + w.lambda_s * bd["ls"]
    assert abs(bd["total"] - total) <= 1e-6


def test_stage2_breakdown_identity(tiny_scene):
    cfg = small_cfg()
    cloud = initial_cloud(tiny_scene, cfg)
    cloud.labels[::3] = Label.DYNAMIC
    s = new_stage2(cfg, tiny_scene, cloud)
    for _ in range(3):
        bd = stage2_step(s)
        w = cfg.weights
        total = (1 - w.lambda_c) * bd["l1"] + w.lambda_c * bd["dssim"] + w.lambda_r * bd["lr"]
        assert abs(bd["total"] - total) <= 1e-6
        assert bd["lr"] >= 0 and bd["n_dynamic"] + bd["n_static"] == len(s.cloud)


def _stage2_params(cfg, scene, steps):
    cloud = initial_cloud(scene, cfg)
    cloud.labels[::2] = Label.DYNAMIC
    s = new_stage2(cfg, scene, cloud)
    for _ in range(steps):
        stage2_step(s)
    return [p.copy() for p in s.opt_cloud.params] + [p.copy() for p in s.model.params]


def test_disabling_smooth_reg_equals_zero_weight(tiny_scene):
    a = _stage2_params(small_cfg(no_smooth_reg=True), tiny_scene, 5)
    b = _stage2_params(small_cfg(weights=LossWeights(lambda_r=0.0)), tiny_scene, 5)
    c = _stage2_params(small_cfg(), tiny_scene, 5)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    assert not all(np.array_equal(x, y) for x, y in zip(a, c))


def _one_gaussian_scene():
    cam = make_camera(20, 16)
    target = GaussianCloud(np.array([[0.1, 0.0, 0.05]]), np.log(np.full((1, 3), 0.15)),
                           np.array([[1.0, 0, 0, 0]]), logit(np.array([0.9])), logit(np.array([[0.8, 0.3, 0.2]])))
    img = render(target, cam).image
    views = [View(cam, np.clip(np.rint(img * 255), 0, 255).astype(np.uint8), 0.0, 0, 0, "train")]
    ds = SceneDataset(views, np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))
    start = target.copy()
    start.positions[:] = [[0.0, 0.0, 0.0]]
    start.color_logits[:] = 0.0
    start.opacity_logits[:] = 0.0
    return ds, start


def test_single_gaussian_loss_decreases():
    ds, start = _one_gaussian_scene()
    cfg = small_cfg(static_only=True, iters_stage2=200, lrs=dataclasses.replace(TrainConfig().lrs, position_init=1e-2))
    s = new_stage2(cfg, ds, start)
    losses = [stage2_step(s)["total"] for _ in range(200)]
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])


def test_static_constraint_drives_extractor_to_rest():
    # a scene with nothing moving, so the image term does not fight the constraint
    spec = SynthSpec(n_static=40, n_dynamic=0, n_cameras=3, n_times=3, resolution=16, held_out=False)
    scene = generate_scene(spec, seed=0)
    cfg = small_cfg(weights=LossWeights(lambda_s=10.0), decomposition=DecompositionConfig(warmup=10**6))
    s = new_stage1(cfg, scene, initial_cloud(scene, cfg))
    rng = np.random.default_rng(0)
    s.model.phi_l.weights[-1][:] = rng.normal(scale=0.3, size=s.model.phi_l.weights[-1].shape)
    s.model.phi_l.biases[-1][:] = [0.2, -0.1, 0.15]
    s.labels_ready = True  # every Gaussian static, constraint active from the start
    ls = [stage1_step(s)["ls"] for _ in range(100)]
    assert ls[0] > 0
    assert ls[-1] < 0.2 * ls[0]


def test_counts_change_only_at_density_intervals(tiny_scene):
    dens = DensityControlConfig(densify_interval=5, densify_from=5, grad_threshold=1e-6,
                                opacity_reset_interval=10**6, densify_until=1.0)
    cfg = small_cfg(iters_stage1=23, density_static=dens, density_dynamic=dens)
    s = new_stage1(cfg, tiny_scene, initial_cloud(tiny_scene, cfg))
    counts = [len(s.cloud)]
    for _ in range(23):
        stage1_step(s)
        counts.append(len(s.cloud))
    changed = [i for i in range(1, len(counts)) if counts[i] != counts[i - 1]]
    assert changed, "densification never triggered"
    assert all(i % 5 == 0 for i in changed)


def test_labels_stay_static_during_warmup(tiny_scene):
    cfg = small_cfg(decomposition=DecompositionConfig(warmup=3, relabel_interval=1))
    s = new_stage1(cfg, tiny_scene, initial_cloud(tiny_scene, cfg))
    for _ in range(2):
        stage1_step(s)
        assert not s.cloud.labels.any() and not s.labels_ready
    stage1_step(s)
    assert s.labels_ready


def test_static_rows_not_deformed(tiny_scene):
    cfg = small_cfg()
    cloud = initial_cloud(tiny_scene, cfg)
    cloud.labels[:5] = Label.DYNAMIC
    s = new_stage2(cfg, tiny_scene, cloud)
    s.model.phi_x.weights[-1][:] = 0.3
    s.model.phi_x.biases[-1][:] = 0.3
    moved, dyn, _, _ = stage2_cloud(s, 0.5)
    assert np.array_equal(moved.positions[5:], s.cloud.positions[5:])
    assert not np.array_equal(moved.positions[:5], s.cloud.positions[:5])


# -- whole runs -------------------------------------------------------------------------


def _run_bytes(cfg, scene):
    s1, s2 = train(cfg, scene, initial_cloud(scene, cfg))
    return b"".join(p.tobytes() for p in list(s2.cloud.params().values()) + s2.model.params) + s2.cloud.labels.tobytes()


def test_training_is_deterministic(tiny_scene):
    cfg = small_cfg(seed=4)
    assert _run_bytes(cfg, tiny_scene) == _run_bytes(cfg, tiny_scene)
    assert _run_bytes(cfg, tiny_scene) != _run_bytes(cfg.replace(seed=5), tiny_scene)


def test_one_iteration_runs_produce_loadable_checkpoints(tmp_path, tiny_scene):
    cfg = small_cfg(iters_stage1=1, iters_stage2=1)
    s1, s2 = train(cfg, tiny_scene, initial_cloud(tiny_scene, cfg))
    for state, kind in ((s1, "decompose"), (s2, "deform")):
        m = DashModel.from_state(state)
        assert m.kind == kind
        save_model(m, tmp_path / f"{kind}.ckpt")
        back = load_model(tmp_path / f"{kind}.ckpt")
        v = tiny_scene.views[1]
        assert np.array_equal(m.render(v.camera, v.t), back.render(v.camera, v.t))
        assert np.array_equal(back.cloud.labels, m.cloud.labels)


def test_ablation_budgets(tiny_scene):
    cfg = small_cfg(iters_stage1=3, iters_stage2=2)
    s1, s2 = train(cfg.replace(no_decomposition=True), tiny_scene, initial_cloud(tiny_scene, cfg))
    assert s1 is None and s2.iteration == 5 and np.all(s2.cloud.labels == Label.DYNAMIC)
    s1, s2 = train(cfg.replace(static_only=True), tiny_scene, initial_cloud(tiny_scene, cfg))
    assert s1 is None and s2.iteration == 5 and not s2.cloud.labels.any()
    s1, s2 = train(cfg, tiny_scene, initial_cloud(tiny_scene, cfg))
    assert s1.iteration == 3 and s2.iteration == 2 and s2.global_step == 5


def test_non_finite_loss_is_reported(tiny_scene):
    from dashgs.errors import NonFiniteLossError

    cfg = small_cfg()
    cloud = initial_cloud(tiny_scene, cfg)
    s = new_stage2(cfg, tiny_scene, cloud)
    s.cloud.color_logits[0, 0] = math.nan
    with pytest.raises(NonFiniteLossError, match="non-finite loss"):
        for _ in range(5):
            stage2_step(s)
