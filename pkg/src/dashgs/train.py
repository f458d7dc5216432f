"""Two-stage training: decomposition with a linear-motion extractor, then a
4D hash deformation field over the dynamic Gaussians only."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .decomp import (
    DecompositionConfig,
    DensityControlConfig,
    GradientAccumulator,
    decompose,
    density_control,
    reset_opacity,
    static_loss,
    static_loss_grad,
)
from .deform import Stage1Model, Stage2Model, apply_deformation, spacetime
from .errors import InvalidParameterError, NonFiniteLossError, NotACheckpointError
from .hashgrid import HashGridConfig, level_resolution
from .metrics import dssim_grad, l1_grad, l1_loss, psnr, ssim
from .nn import Adam
from .render import blend_weights, render, render_backward
from .scene import GaussianCloud, Label

log = logging.getLogger(__name__)

CSV_FIELDS = ("iteration", "stage", "l1", "dssim", "ls", "lr", "total", "n_static", "n_dynamic")


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 0.2
    lambda_s: float = 0.1
    lambda_r: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.lambda_c < 1.0:
            raise InvalidParameterError("lambda_c must lie in [0, 1)")
        if self.lambda_s < 0 or self.lambda_r < 0:
            raise InvalidParameterError("loss weights must be non-negative")


@dataclass(frozen=True)
class SmoothRegConfig:
    eps_p: float = 0.0  # 0 selects half a finest-level voxel
    eps_t: float = 0.0
    samples: int = 256

    def __post_init__(self):
        if self.eps_p < 0 or self.eps_t < 0 or self.samples < 1:
            raise InvalidParameterError("perturbation widths must be > 0 and samples >= 1")

    def half_widths(self, enc_cfg):
        """Per-axis half-widths ``(eps_x, eps_y, eps_z, eps_t)``."""
        finest = level_resolution(enc_cfg, enc_cfg.levels - 1)
        ep = self.eps_p or 0.5 / finest
        et = self.eps_t or 0.5 / finest
        return np.array([ep, ep, ep, et])


@dataclass(frozen=True)
class LearningRates:
    position_init: float = 1.6e-4  # times the scene extent
    position_final: float = 1.6e-6
    opacity: float = 0.05
    scale: float = 5e-3
    rotation: float = 1e-3
    color: float = 2.5e-3
    network: float = 1e-3
    tables: float = 1e-2


@dataclass(frozen=True)
class TrainConfig:
    iters_stage1: int = 6000
    iters_stage2: int = 14000
    batch: int = 1
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    smooth: SmoothRegConfig = field(default_factory=SmoothRegConfig)
    lrs: LearningRates = field(default_factory=LearningRates)
    decomposition: DecompositionConfig = field(default_factory=DecompositionConfig)
    density_static: DensityControlConfig = field(default_factory=DensityControlConfig)
    density_dynamic: DensityControlConfig = field(default_factory=DensityControlConfig)
    encoder_stage1: HashGridConfig = field(default_factory=HashGridConfig.stage1_default)
    encoder_stage2: HashGridConfig = field(default_factory=HashGridConfig.stage2_default)
    no_decomposition: bool = False
    no_dynamic_density_control: bool = False
    no_smooth_reg: bool = False
    static_only: bool = False
    init_noise: float = 0.01
    log_interval: int = 1

    def __post_init__(self):
        if self.iters_stage1 < 1 or self.iters_stage2 < 1 or self.batch < 1:
            raise InvalidParameterError("iteration counts and batch must be >= 1")
        if self.no_decomposition and self.static_only:
            raise InvalidParameterError("no_decomposition and static_only are exclusive")

    @property
    def skip_stage1(self):
        return self.no_decomposition or self.static_only

    @property
    def total_iters(self):
        return self.iters_stage1 + self.iters_stage2

    def stage2_iters(self):
        # variants without a decomposition stage spend the whole budget in stage 2
        return self.total_iters if self.skip_stage1 else self.iters_stage2

    def density_configs(self):
        dyn = self.density_dynamic.disabled() if self.no_dynamic_density_control else self.density_dynamic
        return {Label.STATIC: self.density_static, Label.DYNAMIC: dyn}

    def effective_lambda_r(self):
        return 0.0 if self.no_smooth_reg else self.weights.lambda_r

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        nested = {
            "weights": LossWeights,
            "smooth": SmoothRegConfig,
            "lrs": LearningRates,
            "decomposition": DecompositionConfig,
            "density_static": DensityControlConfig,
            "density_dynamic": DensityControlConfig,
            "encoder_stage1": HashGridConfig,
            "encoder_stage2": HashGridConfig,
        }
        kw = {}
        for k, v in d.items():
            if k in nested:
                v = dict(v)
                if "primes" in v:
                    v["primes"] = tuple(v["primes"])
                kw[k] = nested[k](**v)
            else:
                kw[k] = v
        return cls(**kw)


# ---------------------------------------------------------------------------
# config file: INI sections mirror the nested dataclasses, [train] holds the rest


def _coerce(template, text):
    if isinstance(template, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise InvalidParameterError(f"not a boolean: {text!r}")
    if isinstance(template, int):
        return int(text)
    if isinstance(template, float):
        return float(text)
    if isinstance(template, tuple):
        return tuple(int(x) for x in text.split(","))
    return text


def load_config(path, base=None):
    """Read an INI training config; unknown sections or keys are errors."""
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as f:
        parser.read_file(f)
    cfg = base or TrainConfig()
    top = {}
    for section in parser.sections():
        items = dict(parser.items(section))
        if section == "train":
            for k, v in items.items():
                if k not in TrainConfig.__dataclass_fields__ or dataclasses.is_dataclass(getattr(cfg, k)):
                    raise InvalidParameterError(f"unknown key [train] {k}")
                top[k] = _coerce(getattr(cfg, k), v)
            continue
        sub = getattr(cfg, section, None)
        if not dataclasses.is_dataclass(sub):
            raise InvalidParameterError(f"unknown config section [{section}]")
        kw = {}
        for k, v in items.items():
            if k not in type(sub).__dataclass_fields__:
                raise InvalidParameterError(f"unknown key [{section}] {k}")
            kw[k] = _coerce(getattr(sub, k), v)
        top[section] = dataclasses.replace(sub, **kw)
    return dataclasses.replace(cfg, **top)


def dump_config(cfg):
    parser = configparser.ConfigParser()
    parser["train"] = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            parser[f.name] = {k: _fmt(x) for k, x in dataclasses.asdict(v).items()}
        else:
            parser["train"][f.name] = _fmt(v)
    import io

    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# losses


def smooth_reg(encoder, x, half_widths, rng, eps=None, grad_tables=None, weight=1.0):
    """Squared feature change under a uniform perturbation, averaged over rows.

    Returns ``(L_r, grad_tables)``; both encodings share the tables and both
    contribute gradient. Pass ``eps`` to fix the perturbation. When
    ``grad_tables`` is given, ``weight * dL_r/dtables`` is added into it.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if eps is None:
        hw = np.asarray(half_widths, dtype=np.float64)
        eps = rng.uniform(-1.0, 1.0, size=x.shape) * hw
    xe = x + eps
    f0 = encoder.encode(x)
    f1 = encoder.encode(xe)
    diff = f0 - f1
    m = len(x)
    loss = float(np.sum(diff * diff) / m)
    g = (2.0 * weight / m) * diff
    grad, _ = encoder.encode_backward(x, g, grad_tables=grad_tables)
    encoder.encode_backward(xe, -g, grad_tables=grad)
    return loss, grad


def feature_difference(encoder, x, half_widths, rng):
    """Mean (unsquared) feature change ``E||G(x) - G(x + eps)||`` on probe rows."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    eps = rng.uniform(-1.0, 1.0, size=x.shape) * np.asarray(half_widths)
    d = encoder.encode(x) - encoder.encode(x + eps)
    return float(np.mean(np.linalg.norm(d, axis=1)))


def image_loss(pred, target, lambda_c):
    """``(1 - lc) L1 + lc D-SSIM`` with its gradient; returns (l1, dssim, grad)."""
    l1 = l1_loss(pred, target)
    ds, g_ds = dssim_grad(pred, target)
    grad = (1.0 - lambda_c) * l1_grad(pred, target) + lambda_c * g_ds
    return l1, ds, grad


# ---------------------------------------------------------------------------
# training state


def scene_extent(dataset):
    """Half the bounding-box diagonal; scales position learning rates and the split test."""
    return float(0.5 * np.linalg.norm(dataset.bbox_max - dataset.bbox_min))


def position_lr(lrs, extent, step, total):
    """Log-linear decay from the initial to the final position rate."""
    frac = min(max(step / max(total, 1), 0.0), 1.0)
    lo, hi = math.log(lrs.position_init), math.log(lrs.position_final)
    return math.exp(lo + frac * (hi - lo)) * extent


def _cloud_optimizer(cloud, lrs, extent):
    return Adam(
        [cloud.positions, cloud.log_scales, cloud.rotations, cloud.opacity_logits, cloud.color_logits],
        [lrs.position_init * extent, lrs.scale, lrs.rotation, lrs.opacity, lrs.color],
    )


def _model_optimizer(model, lrs):
    # params()[0] is always the hash table stack
    return Adam(model.params, [lrs.tables] + [lrs.network] * (len(model.params) - 1))


@dataclass
class StageState:
    cfg: TrainConfig
    dataset: object
    cloud: GaussianCloud
    origin: np.ndarray  # index of the initial Gaussian each row descends from
    domain: object
    extent: float
    model: object
    opt_cloud: Adam
    opt_model: Adam
    rng: np.random.Generator
    reg_rng: np.random.Generator
    stage: int
    planned: int = 1  # iterations this stage will run
    iteration: int = 0  # within the stage
    step_offset: int = 0  # iterations completed before this stage
    accum: GradientAccumulator = None
    labels_ready: bool = False
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.accum is None:
            self.accum = GradientAccumulator(len(self.cloud))

    @property
    def global_step(self):
        return self.step_offset + self.iteration

    def train_views(self):
        return self.dataset.split("train")


def initial_cloud(dataset, cfg, n=500):
    """Starting cloud: noisy ground truth when the scene carries it, else ``n``
    random Gaussians filling the bounding box."""
    from .synth import _random_quats, init_cloud

    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0]))
    if dataset.ground_truth and "cloud" in dataset.ground_truth:
        return init_cloud(dataset, rng, cfg.init_noise)
    lo, hi = dataset.bbox_min, dataset.bbox_max
    return GaussianCloud(
        rng.uniform(lo, hi, size=(n, 3)),
        np.log(rng.uniform(0.03, 0.08, size=(n, 3))),
        _random_quats(rng, n),
        np.zeros(n),
        rng.normal(0.0, 0.5, size=(n, 3)),
    )


def _stage_rngs(seed, stage):
    ss = np.random.SeedSequence([int(seed), stage])
    a, b, c = ss.spawn(3)
    return np.random.default_rng(a), np.random.default_rng(b), np.random.default_rng(c)


def new_stage1(cfg, dataset, cloud, origin=None):
    init_rng, rng, reg_rng = _stage_rngs(cfg.seed, 1)
    extent = scene_extent(dataset)
    model = Stage1Model(cfg.encoder_stage1, rng=init_rng)
    cloud = cloud.copy()
    cloud.labels[:] = Label.STATIC
    return StageState(
        cfg, dataset, cloud,
        np.arange(len(cloud)) if origin is None else np.asarray(origin),
        dataset.domain(), extent, model,
        _cloud_optimizer(cloud, cfg.lrs, extent), _model_optimizer(model, cfg.lrs),
        rng, reg_rng, stage=1, planned=cfg.iters_stage1,
    )


def new_stage2(cfg, dataset, cloud, origin=None, step_offset=0):
    init_rng, rng, reg_rng = _stage_rngs(cfg.seed, 2)
    extent = scene_extent(dataset)
    model = Stage2Model(cfg.encoder_stage2, rng=init_rng)
    cloud = cloud.copy()
    if cfg.no_decomposition:
        cloud.labels[:] = Label.DYNAMIC
    elif cfg.static_only:
        cloud.labels[:] = Label.STATIC
    return StageState(
        cfg, dataset, cloud,
        np.arange(len(cloud)) if origin is None else np.asarray(origin),
        dataset.domain(), extent, model,
        _cloud_optimizer(cloud, cfg.lrs, extent), _model_optimizer(model, cfg.lrs),
        rng, reg_rng, stage=2, planned=cfg.stage2_iters(), step_offset=step_offset, labels_ready=True,
    )


def _sample_view(state):
    views = state.train_views()
    return views[int(state.rng.integers(len(views)))]


def _check_finite(state, breakdown):
    if not math.isfinite(breakdown["total"]):
        dump = {k: v for k, v in breakdown.items()}
        dump.update(stage=state.stage, iteration=state.iteration, n=len(state.cloud))
        raise NonFiniteLossError(f"non-finite loss: {json.dumps(dump, default=str)}")


def _apply_cloud_grads(state, grads):
    state.opt_cloud.lrs[0] = position_lr(state.cfg.lrs, state.extent, state.global_step, state.cfg.total_iters)
    state.opt_cloud.step(grads)


def _breakdown(state, l1, ds, ls, lr):
    w = state.cfg.weights
    term = w.lambda_s * ls if state.stage == 1 else state.cfg.effective_lambda_r() * lr
    n_dyn = int(np.count_nonzero(state.cloud.labels == Label.DYNAMIC))
    return {
        "iteration": state.global_step,
        "stage": state.stage,
        "l1": l1,
        "dssim": ds,
        "ls": ls,
        "lr": lr,
        "total": (1.0 - w.lambda_c) * l1 + w.lambda_c * ds + term,
        "n_static": len(state.cloud) - n_dyn,
        "n_dynamic": n_dyn,
    }


def stage1_positions(state, t):
    """Linearly moved world positions at ``t`` plus the intermediates for backward."""
    P = state.domain.to_unit(state.cloud.positions)
    dn, cache = state.model.forward(P)
    pos_t = state.cloud.positions + t * state.domain.to_world_delta(dn)
    return pos_t, dn, cache


def _with_positions(cloud, pos):
    return GaussianCloud(pos, cloud.log_scales, cloud.rotations, cloud.opacity_logits, cloud.color_logits, cloud.labels)


def _background(state):
    gt = state.dataset.ground_truth or {}
    return np.asarray(gt.get("background", (0.0, 0.0, 0.0)), dtype=np.float64)


def _accumulate(acc, grads):
    if acc is None:
        return list(grads)
    for a, g in zip(acc, grads):
        a += g
    return acc


def stage1_step(state, view=None):
    """One decomposition step; returns the loss breakdown."""
    cfg = state.cfg
    views = [view] if view is not None else [_sample_view(state) for _ in range(cfg.batch)]
    n = len(state.cloud)
    g_cloud = [np.zeros_like(p) for p in state.opt_cloud.params]
    g_model = None
    l1 = ds = ls = 0.0
    bg = _background(state)
    for v in views:
        pos_t, dn, cache = stage1_positions(state, v.t)
        res = render(_with_positions(state.cloud, pos_t), v.camera, background=bg)
        a, b, g_img = image_loss(res.image, v.image_f, cfg.weights.lambda_c)
        g_img /= len(views)
        l1 += a / len(views)
        ds += b / len(views)
        g = render_backward(res, g_img)
        g_dn = v.t * state.domain.to_world_delta(g["positions"])
        if state.labels_ready and cfg.weights.lambda_s > 0:
            static = state.cloud.labels == Label.STATIC
            ls += static_loss(dn[static]) / len(views)
            g_dn[static] += cfg.weights.lambda_s * static_loss_grad(dn[static]) / len(views)
        gm, g_P = state.model.backward(cache, g_dn)
        g_model = _accumulate(g_model, gm)
        g_cloud[0] += g["positions"] + g_P / state.domain.extent
        g_cloud[1] += g["log_scales"]
        g_cloud[2] += g["rotations"]
        g_cloud[3] += g["opacity_logits"]
        g_cloud[4] += g["color_logits"]
        state.accum.add(g["means2d_norm"], g["visible"])
    bd = _breakdown(state, l1, ds, ls, 0.0)
    _check_finite(state, bd)
    _apply_cloud_grads(state, g_cloud)
    state.opt_model.step(g_model)
    state.iteration += 1
    _maintenance(state)
    if n != len(state.cloud):
        log.debug("stage 1 it %d: %d -> %d Gaussians", state.iteration, n, len(state.cloud))
    return bd


def motion_magnitudes(state):
    """Per-Gaussian ``||dp||`` of the stage-1 extractor, in unit-domain coordinates."""
    dn = state.model(state.domain.to_unit(state.cloud.positions))
    return np.linalg.norm(dn, axis=1)


def relabel(state):
    state.cloud.labels[:] = decompose(motion_magnitudes(state), state.cfg.decomposition.top_percent)
    state.labels_ready = True


def stage2_cloud(state, t):
    """Canonical statics merged with deformed dynamics at ``t``."""
    dyn = state.cloud.dynamic_indices
    if len(dyn) == 0:
        return state.cloud, dyn, None, None
    x = spacetime(state.domain.to_unit(state.cloud.positions[dyn]), t)
    delta, cache = state.model.forward(x)
    return apply_deformation(state.cloud, dyn, delta, state.domain), dyn, delta, cache


def stage2_step(state, view=None):
    cfg = state.cfg
    views = [view] if view is not None else [_sample_view(state) for _ in range(cfg.batch)]
    g_cloud = [np.zeros_like(p) for p in state.opt_cloud.params]
    g_model = None
    l1 = ds = lr_term = 0.0
    lam_r = cfg.effective_lambda_r()
    hw = cfg.smooth.half_widths(cfg.encoder_stage2)
    bg = _background(state)
    for v in views:
        deformed, dyn, delta, cache = stage2_cloud(state, v.t)
        res = render(deformed, v.camera, background=bg)
        a, b, g_img = image_loss(res.image, v.image_f, cfg.weights.lambda_c)
        g_img /= len(views)
        l1 += a / len(views)
        ds += b / len(views)
        g = render_backward(res, g_img)
        g_cloud[0] += g["positions"]
        g_cloud[1] += g["log_scales"]
        g_cloud[2] += g["rotations"]
        g_cloud[3] += g["opacity_logits"]
        g_cloud[4] += g["color_logits"]
        if len(dyn):
            gd = type(delta)(
                state.domain.to_world_delta(g["positions"][dyn]), g["rotations"][dyn], g["log_scales"][dyn]
            )
            gm, g_x = state.model.backward(cache, gd)
            g_cloud[0][dyn] += g_x[:, :3] / state.domain.extent
            g_model = _accumulate(g_model, gm)
            # the regulariser always draws, so toggling it never shifts other streams
            m = min(cfg.smooth.samples, len(dyn))
            pick = state.reg_rng.choice(len(dyn), size=m, replace=False)
            eps = state.reg_rng.uniform(-1.0, 1.0, size=(m, 4)) * hw
            if lam_r > 0:
                lr_val, _ = smooth_reg(state.model.encoder, cache[0][pick], hw, None, eps=eps,
                                       grad_tables=g_model[0], weight=lam_r / len(views))
                lr_term += lr_val / len(views)
        state.accum.add(g["means2d_norm"], g["visible"])
    bd = _breakdown(state, l1, ds, 0.0, lr_term)
    _check_finite(state, bd)
    _apply_cloud_grads(state, g_cloud)
    if g_model is None:
        g_model = [np.zeros_like(p) for p in state.model.params]
    state.opt_model.step(g_model)
    state.iteration += 1
    _maintenance(state)
    return bd


def _maintenance(state):
    """Relabeling (stage 1) and per-group density control at their intervals."""
    cfg = state.cfg
    it = state.iteration
    dc = cfg.decomposition
    if state.stage == 1 and it >= dc.warmup and (it - dc.warmup) % dc.relabel_interval == 0:
        relabel(state)
    configs = cfg.density_configs()
    ref = cfg.density_static
    until = ref.densify_until * state.planned
    if ref.densify_from <= it < until and it % ref.densify_interval == 0:
        res = density_control(state.cloud, state.accum.mean(), configs, state.extent, state.rng)
        _rebind(state, res)
    for label, dcfg in configs.items():
        if dcfg.enabled and it % dcfg.opacity_reset_interval == 0 and it < dcfg.densify_until * state.planned:
            mask = state.cloud.labels == label
            reset_opacity(state.cloud, mask, dcfg.reset_ceiling)
            state.opt_cloud.m[3][mask] = 0.0
            state.opt_cloud.v[3][mask] = 0.0


def _rebind(state, res):
    state.cloud = res.cloud
    state.origin = state.origin[res.parent]
    keep = res.keep
    for i, name in enumerate(GaussianCloud.PARAM_NAMES):
        state.opt_cloud.rebind(i, getattr(state.cloud, name), keep)
    state.accum.reset(len(state.cloud))


def run_stage(state, iters, step_fn, logger=None, progress=None):
    for _ in range(iters):
        bd = step_fn(state)
        if logger is not None and (state.iteration % state.cfg.log_interval == 0 or state.iteration == iters):
            logger(bd)
        if progress is not None:
            progress(state, bd)
    return state


def train_decompose(cfg, dataset, cloud, logger=None, progress=None):
    """Stage 1; returns the state with labels frozen from the final extractor."""
    state = new_stage1(cfg, dataset, cloud)
    run_stage(state, cfg.iters_stage1, stage1_step, logger, progress)
    relabel(state)
    return state


def train_deform(cfg, dataset, cloud, origin=None, step_offset=0, logger=None, progress=None):
    state = new_stage2(cfg, dataset, cloud, origin, step_offset)
    run_stage(state, cfg.stage2_iters(), stage2_step, logger, progress)
    return state


def train(cfg, dataset, cloud, logger=None, progress=None):
    """Full pipeline. Returns ``(stage1_state or None, stage2_state)``."""
    s1 = None
    if cfg.skip_stage1:
        return None, train_deform(cfg, dataset, cloud, logger=logger, progress=progress)
    s1 = train_decompose(cfg, dataset, cloud, logger, progress)
    s2 = train_deform(cfg, dataset, s1.cloud, s1.origin, cfg.iters_stage1, logger, progress)
    return s1, s2


class CsvLogger:
    """Per-iteration metrics rows (``CSV_FIELDS``)."""

    def __init__(self, fh):
        self.writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore", lineterminator="\n")
        self.writer.writeheader()

    def __call__(self, bd):
        self.writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in bd.items()})


# ---------------------------------------------------------------------------
# trained models: rendering, evaluation and checkpoints


@dataclass
class DashModel:
    """A trained cloud plus whatever deformation it carries.

    ``kind`` is ``"decompose"`` (stage-1 linear motion), ``"deform"`` (4D
    field on the dynamic subset) or ``"static"``.
    """

    kind: str
    cloud: GaussianCloud
    domain: object
    background: np.ndarray
    model: object = None
    origin: np.ndarray = None
    config: TrainConfig = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_state(cls, state, kind=None):
        kind = kind or ("decompose" if state.stage == 1 else "deform")
        return cls(kind, state.cloud, state.domain, _background(state), state.model, state.origin, state.cfg,
                   {"iterations": state.global_step, "dataset": state.dataset.name})

    def cloud_at(self, t):
        if self.kind == "decompose":
            dn = self.model(self.domain.to_unit(self.cloud.positions))
            return _with_positions(self.cloud, self.cloud.positions + t * self.domain.to_world_delta(dn))
        if self.kind == "deform" and self.model is not None:
            dyn = self.cloud.dynamic_indices
            if len(dyn):
                x = spacetime(self.domain.to_unit(self.cloud.positions[dyn]), t)
                return apply_deformation(self.cloud, dyn, self.model(x), self.domain)
        return self.cloud

    def render(self, cam, t):
        return render(self.cloud_at(t), cam, background=self.background).image


def evaluate(model, dataset, split="test"):
    """Per-frame PSNR/SSIM rows for a split (falls back to train when empty)."""
    views = dataset.split(split) or dataset.split("train")
    rows = []
    for v in views:
        img = model.render(v.camera, v.t)
        rows.append({"view": v.view_index, "time_index": v.time_index, "t": v.t,
                     "psnr": psnr(img, v.image_f), "ssim": ssim(img, v.image_f)})
    return rows


def mean_psnr(rows):
    vals = [r["psnr"] for r in rows]
    return float(np.mean(vals)) if vals else float("nan")


def probe_points(model, n=512, seed=12345):
    """Held-out probes: dynamic canonical positions (unit domain) at random times."""
    rng = np.random.default_rng(seed)
    dyn = model.cloud.dynamic_indices
    if len(dyn) == 0:
        raise InvalidParameterError("no dynamic Gaussians to probe")
    pick = rng.choice(dyn, size=n, replace=True)
    p = model.domain.to_unit(model.cloud.positions[pick])
    return np.concatenate([p, rng.uniform(0.0, 1.0, (n, 1))], axis=1), rng


def feature_difference_metric(model, n=512, seed=12345):
    x, rng = probe_points(model, n, seed)
    hw = model.config.smooth.half_widths(model.config.encoder_stage2)
    return feature_difference(model.model.encoder, x, hw, rng)


def _model_arrays(prefix, model):
    return {f"{prefix}.{i:02d}": p for i, p in enumerate(model.params)}


def to_checkpoint(m):
    arrays = {f"cloud.{k}": v for k, v in m.cloud.params().items()}
    arrays["cloud.labels"] = m.cloud.labels
    arrays["cloud.origin"] = np.asarray(m.origin if m.origin is not None else np.arange(len(m.cloud)), dtype=np.int64)
    arrays["domain.lo"] = m.domain.lo
    arrays["domain.extent"] = m.domain.extent
    arrays["background"] = m.background
    if m.model is not None:
        arrays.update(_model_arrays("model", m.model))
    meta = dict(m.meta)
    meta.update(kind=m.kind, config=m.config.to_dict() if m.config else None)
    return Checkpoint(arrays, meta)


def from_checkpoint(ckpt):
    from .scene import Domain

    a, meta = ckpt.arrays, ckpt.meta
    if "kind" not in meta:
        raise NotACheckpointError("checkpoint carries no model description")
    cloud = GaussianCloud(**{k: a[f"cloud.{k}"] for k in GaussianCloud.PARAM_NAMES}, labels=a["cloud.labels"])
    cfg = TrainConfig.from_dict(meta["config"]) if meta.get("config") else TrainConfig()
    model = None
    if meta["kind"] == "decompose":
        model = Stage1Model(cfg.encoder_stage1, rng=np.random.default_rng(0))
    elif meta["kind"] == "deform":
        model = Stage2Model(cfg.encoder_stage2, rng=np.random.default_rng(0))
    if model is not None:
        for i, p in enumerate(model.params):
            p[...] = a[f"model.{i:02d}"]
    domain = Domain(np.array(a["domain.lo"]), np.array(a["domain.extent"]))
    extra = {k: v for k, v in meta.items() if k not in ("kind", "config")}
    return DashModel(meta["kind"], cloud, domain, np.array(a["background"]), model, np.array(a["cloud.origin"]), cfg, extra)


def save_model(m, path):
    save_checkpoint(to_checkpoint(m), path)


def load_model(path):
    return from_checkpoint(load_checkpoint(path))


def label_quality(labels, origin, gt_labels):
    """Dynamic recall and static precision of predicted labels against the
    ground-truth label of each row's originating Gaussian."""
    labels = np.asarray(labels)
    truth = np.asarray(gt_labels)[np.asarray(origin)]
    true_dyn = truth == Label.DYNAMIC
    pred_dyn = labels == Label.DYNAMIC
    recall = np.count_nonzero(true_dyn & pred_dyn) / max(1, np.count_nonzero(true_dyn))
    pred_static = ~pred_dyn
    precision = np.count_nonzero(pred_static & ~true_dyn) / max(1, np.count_nonzero(pred_static))
    return float(recall), float(precision)


def rendered_mass(model, dataset, split="train"):
    """Per-Gaussian blending weight summed over every pixel of every frame."""
    mass = np.zeros(len(model.cloud))
    for v in dataset.split(split):
        mass += blend_weights(render(model.cloud_at(v.t), v.camera, background=model.background))
    return mass


def weighted_label_quality(labels, origin, gt_labels, weights):
    """As :func:`label_quality` but each row counts with its rendered mass."""
    labels = np.asarray(labels)
    w = np.asarray(weights, dtype=np.float64)
    true_dyn = np.asarray(gt_labels)[np.asarray(origin)] == Label.DYNAMIC
    pred_dyn = labels == Label.DYNAMIC
    recall = w[true_dyn & pred_dyn].sum() / max(w[true_dyn].sum(), 1e-300)
    precision = w[~pred_dyn & ~true_dyn].sum() / max(w[~pred_dyn].sum(), 1e-300)
    return float(recall), float(precision)
