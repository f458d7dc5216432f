import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_cloud
from dashgs.decomp import (
    DecompositionConfig,
    DensityControlConfig,
    GradientAccumulator,
    classify,
    decompose,
    density_control,
    motion_threshold,
    reset_opacity,
    static_loss,
    static_loss_grad,
)
from dashgs.errors import InvalidParameterError
from dashgs.scene import Label, logit

magnitude_lists = st.lists(st.floats(0, 1e3, allow_nan=False), min_size=1, max_size=80)
percents = st.floats(0.5, 99.5)


def nearest_rank(values, p):
    """Smallest sample with at least p% of the list at or below it."""
    s = sorted(values)
    rank = max(1, math.ceil(round(p * len(s) / 100.0, 9)))
    return s[rank - 1]


def test_threshold_example_one_to_ten():
    mags = np.arange(1, 11, dtype=float)
    tau = motion_threshold(mags, 20)
    assert tau == 8
    assert np.flatnonzero(classify(mags, tau) == Label.DYNAMIC).tolist() == [8, 9]  # values 9 and 10


def test_threshold_all_equal_gives_no_dynamic():
    mags = np.full(17, 0.3)
    assert not decompose(mags, 20).any()


def test_threshold_near_hundred_percent():
    mags = np.random.default_rng(0).permutation(np.linspace(0.1, 5, 40))
    tau = motion_threshold(mags, 99.999)
    assert tau == mags.min()
    labels = classify(mags, tau)
    assert labels.sum() == 39 and labels[np.argmin(mags)] == Label.STATIC


def test_threshold_errors():
    with pytest.raises(InvalidParameterError):
        motion_threshold([], 20)
    with pytest.raises(InvalidParameterError):
        motion_threshold([1.0, np.nan], 20)
    with pytest.raises(InvalidParameterError):
        DecompositionConfig(top_percent=100)


@settings(max_examples=300, deadline=None)
@given(magnitude_lists, percents)
def test_threshold_is_nearest_rank(mags, k):
    assert motion_threshold(mags, k) == nearest_rank(mags, 100 - k)


@settings(max_examples=300, deadline=None)
@given(magnitude_lists, percents)
def test_dynamic_count_bounded(mags, k):
    labels = decompose(mags, k)
    assert labels.sum() <= math.ceil(k * len(mags) / 100)


@settings(max_examples=300, deadline=None)
@given(magnitude_lists, percents, percents)
def test_threshold_monotone_in_k(mags, k1, k2):
    lo, hi = sorted((k1, k2))
    small = decompose(mags, lo).astype(bool)
    big = decompose(mags, hi).astype(bool)
    assert np.all(big[small])


@settings(max_examples=300, deadline=None)
@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=80), percents, st.integers(-20, 20))
def test_labels_scale_equivariant(mags, k, log2c):
    m = np.asarray(mags, dtype=float)
    assert np.array_equal(decompose(m, k), decompose(m * 2.0**log2c, k))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 10**6), min_size=1, max_size=80), percents, st.floats(1e-3, 1e3))
def test_labels_scale_equivariant_any_factor(mags, k, c):
    # integer-valued magnitudes stay far apart relative to the rounding of c * m
    m = np.asarray(mags, dtype=float)
    assert np.array_equal(decompose(m, k), decompose(m * c, k))


def test_classify_examples():
    m = np.array([0.5, 2.0, 7.0])
    assert not classify(m, math.inf).any()
    assert classify(m, -1).all()
    assert classify([0.5, 2.0], 1.0).tolist() == [Label.STATIC, Label.DYNAMIC]
    assert classify([1.0], 1.0).tolist() == [Label.STATIC]  # ties fall static


# -- static constraint ------------------------------------------------------------------


def test_static_loss_examples():
    assert static_loss(np.zeros((5, 3))) == 0.0
    assert static_loss([[3, 4, 0], [0, 0, 0]]) == 2.5
    assert static_loss(np.zeros((0, 3))) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 20), st.just(0.0) | st.floats(1e-100, 100), st.integers(0, 2**32 - 1))
def test_static_loss_homogeneous(n, c, seed):
    d = np.random.default_rng(seed).normal(size=(n, 3))
    assert math.isclose(static_loss(c * d), c * static_loss(d), rel_tol=1e-12, abs_tol=1e-300)


def test_static_loss_gradient():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(6, 3))
    g = static_loss_grad(d)
    h = 1e-6
    for i in range(6):
        for k in range(3):
            e = np.zeros_like(d)
            e[i, k] = h
            fd = (static_loss(d + e) - static_loss(d - e)) / (2 * h)
            assert abs(fd - g[i, k]) <= 1e-6 * max(1.0, abs(fd))
    assert not static_loss_grad(np.zeros((2, 3))).any()
    assert static_loss_grad(np.zeros((0, 3))).shape == (0, 3)


# -- density control --------------------------------------------------------------------


def _cloud(n=8, seed=0, scale=0.01, opacity=0.5, labels=None):
    rng = np.random.default_rng(seed)
    c = random_cloud(rng, n)
    c.log_scales[:] = np.log(scale)
    c.opacity_logits[:] = logit(opacity)
    if labels is not None:
        c.labels[:] = labels
    return c


CFG = DensityControlConfig()
EXTENT = 2.0  # split above 0.01 * 2 = 0.02


def _configs(static=CFG, dynamic=CFG):
    return {Label.STATIC: static, Label.DYNAMIC: dynamic}


def test_density_noop():
    c = _cloud()
    res = density_control(c, np.zeros(len(c)), _configs(), EXTENT, np.random.default_rng(0))
    assert len(res.cloud) == len(c)
    assert np.array_equal(res.cloud.positions, c.positions)
    assert np.array_equal(res.parent, np.arange(len(c)))


def test_density_prunes_exactly_one():
    c = _cloud()
    c.opacity_logits[3] = logit(0.001)
    res = density_control(c, np.zeros(len(c)), _configs(), EXTENT, np.random.default_rng(0))
    assert len(res.cloud) == len(c) - 1
    assert 3 not in res.parent


def test_density_clone_inherits_dynamic_label():
    c = _cloud(labels=[0, 0, 1, 0, 0, 0, 0, 0])
    g = np.zeros(len(c))
    g[2] = 1.0
    res = density_control(c, g, _configs(), EXTENT, np.random.default_rng(0))
    assert len(res.cloud) == len(c) + 1
    assert res.cloud.labels[-1] == Label.DYNAMIC
    assert res.parent[-1] == 2
    assert np.array_equal(res.cloud.positions[-1], c.positions[2])
    assert res.keep[-1] == 2


def test_density_split_large_gaussian():
    c = _cloud(labels=[1] * 8)
    c.log_scales[4] = np.log([0.3, 0.1, 0.05])
    g = np.zeros(len(c))
    g[4] = 1.0
    res = density_control(c, g, _configs(), EXTENT, np.random.default_rng(0))
    assert len(res.cloud) == len(c) + 1  # parent replaced by two children
    kids = np.flatnonzero(res.parent == 4)
    assert len(kids) == 2 and np.all(res.fresh[kids]) and np.all(res.keep[kids] == -1)
    for k in kids:
        assert np.allclose(res.cloud.scales[k], np.array([0.3, 0.1, 0.05]) / 1.6)
        assert res.cloud.labels[k] == Label.DYNAMIC
    assert not np.array_equal(res.cloud.positions[kids[0]], res.cloud.positions[kids[1]])


def test_density_groups_use_their_own_configs():
    # sentinel thresholds: static never densifies, dynamic always does
    never = DensityControlConfig(grad_threshold=1e9, prune_opacity=1e-9)
    always = DensityControlConfig(grad_threshold=1e-12, prune_opacity=0.9)
    labels = np.array([0, 1, 0, 1, 0, 1])
    c = _cloud(n=6, labels=labels, opacity=0.5)
    g = np.full(6, 1e-3)
    res = density_control(c, g, _configs(never, always), EXTENT, np.random.default_rng(0))
    # every dynamic Gaussian falls under the dynamic prune threshold (0.5 < 0.9); statics stay
    assert np.array_equal(res.parent, [0, 2, 4])
    c.opacity_logits[:] = logit(0.95)
    res = density_control(c, g, _configs(never, always), EXTENT, np.random.default_rng(0))
    assert sorted(res.parent[6:].tolist()) == [1, 3, 5]
    assert np.all(res.cloud.labels[6:] == Label.DYNAMIC)


def test_density_disabled_group_untouched():
    labels = np.array([0, 1, 1])
    c = _cloud(n=3, labels=labels)
    c.opacity_logits[:] = logit(1e-4)
    res = density_control(c, np.ones(3), _configs(CFG, CFG.disabled()), EXTENT, np.random.default_rng(0))
    assert res.parent.tolist() == [1, 2]


def test_density_growth_cap():
    c = _cloud(n=10)
    g = np.linspace(1, 2, 10)
    cap = DensityControlConfig(max_gaussians=13)
    res = density_control(c, g, _configs(cap, cap), EXTENT, np.random.default_rng(0))
    assert len(res.cloud) == 13
    assert sorted(res.parent[10:].tolist()) == [7, 8, 9]  # highest gradients win


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_density_never_produces_nan(seed):
    rng = np.random.default_rng(seed)
    c = random_cloud(rng, 30, scale=(0.001, 0.5))
    c.labels[:] = rng.integers(0, 2, 30)
    c.opacity_logits[:] = rng.normal(scale=4, size=30)
    res = density_control(c, rng.exponential(1e-3, 30), _configs(), EXTENT, rng)
    for v in res.cloud.params().values():
        assert np.all(np.isfinite(v))
    assert np.array_equal(res.cloud.labels, c.labels[res.parent])


def test_reset_opacity_caps_masked_rows():
    c = _cloud(n=4)
    c.opacity_logits[:] = logit([0.9, 0.005, 0.5, 0.9])
    before = c.opacity_logits.copy()
    reset_opacity(c, np.array([True, True, True, False]), 0.01)
    assert np.all(c.opacities[:3] <= 0.01 + 1e-15)
    assert c.opacity_logits[1] == before[1]
    assert c.opacity_logits[3] == before[3]


def test_gradient_accumulator_mean():
    acc = GradientAccumulator(3)
    acc.add(np.array([1.0, 2.0, 3.0]), np.array([True, False, True]))
    acc.add(np.array([3.0, 5.0, 1.0]), np.array([True, False, False]))
    assert acc.mean().tolist() == [2.0, 0.0, 3.0]
    acc.reset(2)
    assert acc.mean().tolist() == [0.0, 0.0]


def test_density_config_validation():
    with pytest.raises(InvalidParameterError):
        DensityControlConfig(grad_threshold=0)
    with pytest.raises(InvalidParameterError):
        DensityControlConfig(densify_until=2.0)
