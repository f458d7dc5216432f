"""Command-line entry point.

Machine-readable results go to stdout as CSV or ``key=value`` lines; human
summaries go to stderr. Failures print one ``error code=... message=...``
line and exit 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import os
import sys
import time

EXIT_OK = 0
EXIT_FAIL = 1


def _common(p):
    p.add_argument("--config", help="INI training config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="worker cap (default: $DASH_THREADS)")
    p.add_argument("--deterministic", action="store_true", help="serial, seed-deterministic execution")
    p.add_argument("-v", "--verbose", action="store_true")


def _train_flags(p, stage1=True, stage2=True):
    if stage1:
        p.add_argument("--iters-stage1", type=int, default=None)
    if stage2:
        p.add_argument("--iters-stage2", type=int, default=None)
        p.add_argument("--no-smooth-reg", action="store_true")
    p.add_argument("--no-dynamic-density-control", action="store_true")
    p.add_argument("--metrics", help="per-iteration CSV log path")
    p.add_argument("--checkpoint-interval", type=int, default=0)


def build_parser():
    ap = argparse.ArgumentParser(prog="dash", description="Dynamic/static Gaussian splatting with 4D hash deformation.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene")
    _common(p)
    p.add_argument("--preset", default="orbit-64")
    p.add_argument("--out", required=True, help="scene directory to write")

    p = sub.add_parser("train", help="run decomposition then deformation")
    _common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    _train_flags(p)
    p.add_argument("--no-decomposition", action="store_true")
    p.add_argument("--static-only", action="store_true", help="baseline without any deformation")

    p = sub.add_parser("train-decompose", help="stage 1 only")
    _common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    _train_flags(p, stage2=False)

    p = sub.add_parser("train-deform", help="stage 2 from a decomposition checkpoint")
    _common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _train_flags(p, stage1=False)

    p = sub.add_parser("render", help="render frames from a checkpoint")
    _common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory for PPM frames")
    p.add_argument("--frames", default="all", help="'all' or comma list of VIEW:TIME_INDEX")

    p = sub.add_parser("eval", help="PSNR/SSIM CSV against the scene frames")
    _common(p)
    p.add_argument("--scene", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--ground-truth", action="store_true", help="evaluate the scene's own ground-truth cloud")
    p.add_argument("--split", default="all", choices=["all", "train", "test"])
    p.add_argument("--out", help="CSV path (default stdout)")

    p = sub.add_parser("bench", help="repeated-render throughput")
    _common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--renders", type=int, default=100)

    p = sub.add_parser("inspect-labels", help="red/black dynamic/static label image")
    _common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="PPM image path")
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--time-index", type=int, default=0)
    p.add_argument("--labels-json", help="also write the label array as JSON")
    return ap


def _setup_threads(args):
    n = args.threads
    if n is None and os.environ.get("DASH_THREADS"):
        n = int(os.environ["DASH_THREADS"])
    if args.deterministic and n is None:
        n = 1
    if n is not None and n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
            os.environ.setdefault(var, str(n))
    return n


def _err(code, message):
    print(f"error code={code} message={' '.join(str(message).split())}", file=sys.stderr)
    return EXIT_FAIL


def _kv(**kw):
    for k, v in kw.items():
        print(f"{k}={v}")


def _config(args, base=None):
    from .train import TrainConfig, load_config

    cfg = base or TrainConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    kw = {}
    if args.seed is not None:
        kw["seed"] = args.seed
    for flag in ("iters_stage1", "iters_stage2"):
        if getattr(args, flag, None) is not None:
            kw[flag] = getattr(args, flag)
    for flag in ("no_decomposition", "no_dynamic_density_control", "no_smooth_reg", "static_only"):
        if getattr(args, flag, False):
            kw[flag] = True
    return cfg.replace(**kw)


def _file(path):
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return path


def _training_hooks(args, out_path):
    from .train import CsvLogger, DashModel, save_model

    fh = open(args.metrics, "w", encoding="utf-8") if args.metrics else None
    logger = CsvLogger(fh) if fh else None
    every = args.checkpoint_interval

    def progress(state, bd):
        if every and state.iteration % every == 0:
            save_model(DashModel.from_state(state), out_path)

    return logger, progress, fh


def cmd_synth(args):
    from .scene import save_scene
    from .synth import generate_scene, preset

    ds = generate_scene(preset(args.preset), seed=0 if args.seed is None else args.seed)
    save_scene(ds, args.out)
    gt = ds.ground_truth
    n_dyn = sum(gt["labels"])
    _kv(scene=args.out, views=len(ds.views), gaussians=len(gt["labels"]), dynamic=n_dyn)
    print(f"wrote {len(ds.views)} frames of preset {args.preset} to {args.out}", file=sys.stderr)


def _summary(model, dataset, t0):
    from .train import evaluate, mean_psnr

    rows = evaluate(model, dataset, "test")
    psnr = mean_psnr(rows)
    n_dyn = int((model.cloud.labels == 1).sum())
    _kv(
        checkpoint_kind=model.kind,
        gaussians=len(model.cloud),
        dynamic=n_dyn,
        static=len(model.cloud) - n_dyn,
        heldout_psnr=f"{psnr:.4f}",
        wall_s=f"{time.perf_counter() - t0:.3f}",
    )
    print(f"{model.kind}: {len(model.cloud)} Gaussians ({n_dyn} dynamic), held-out PSNR {psnr:.2f} dB", file=sys.stderr)


def cmd_train(args):
    from .scene import load_scene
    from .train import DashModel, initial_cloud, save_model, train

    t0 = time.perf_counter()
    ds = load_scene(_file(args.scene))
    cfg = _config(args)
    logger, progress, fh = _training_hooks(args, args.out)
    try:
        _, s2 = train(cfg, ds, initial_cloud(ds, cfg), logger, progress)
    finally:
        if fh:
            fh.close()
    model = DashModel.from_state(s2, "static" if cfg.static_only else "deform")
    save_model(model, args.out)
    _summary(model, ds, t0)


def cmd_train_decompose(args):
    from .scene import load_scene
    from .train import DashModel, initial_cloud, save_model, train_decompose

    t0 = time.perf_counter()
    ds = load_scene(_file(args.scene))
    cfg = _config(args)
    logger, progress, fh = _training_hooks(args, args.out)
    try:
        s1 = train_decompose(cfg, ds, initial_cloud(ds, cfg), logger, progress)
    finally:
        if fh:
            fh.close()
    model = DashModel.from_state(s1)
    save_model(model, args.out)
    _summary(model, ds, t0)


def cmd_train_deform(args):
    from .errors import InvalidParameterError
    from .scene import load_scene
    from .train import DashModel, load_model, save_model, train_deform

    t0 = time.perf_counter()
    ds = load_scene(_file(args.scene))
    prev = load_model(_file(args.checkpoint))
    if prev.kind != "decompose":
        raise InvalidParameterError(f"expected a decomposition checkpoint, got {prev.kind!r}")
    cfg = _config(args, prev.config)
    logger, progress, fh = _training_hooks(args, args.out)
    try:
        s2 = train_deform(cfg, ds, prev.cloud, prev.origin, int(prev.meta.get("iterations", 0)), logger, progress)
    finally:
        if fh:
            fh.close()
    model = DashModel.from_state(s2)
    save_model(model, args.out)
    _summary(model, ds, t0)


def _parse_frames(spec, dataset):
    from .errors import InvalidParameterError

    if spec == "all":
        return list(dataset.views)
    index = {(v.view_index, v.time_index): v for v in dataset.views}
    out = []
    for item in spec.split(","):
        try:
            vi, ti = (int(x) for x in item.split(":"))
        except ValueError:
            raise InvalidParameterError(f"bad frame selector {item!r}; use VIEW:TIME_INDEX") from None
        if (vi, ti) not in index:
            raise InvalidParameterError(f"no frame {vi}:{ti} in scene")
        out.append(index[(vi, ti)])
    return out


def cmd_render(args):
    from pathlib import Path

    from .render import to_uint8
    from .scene import frame_name, load_scene, write_ppm
    from .train import load_model

    ds = load_scene(_file(args.scene))
    model = load_model(_file(args.checkpoint))
    out = Path(args.out)
    views = _parse_frames(args.frames, ds)
    print("view,time_index,t,path")
    for v in views:
        path = out / frame_name(v.view_index, v.time_index)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_ppm(path, to_uint8(model.render(v.camera, v.t)))
        print(f"{v.view_index},{v.time_index},{v.t!r},{path}")
    print(f"rendered {len(views)} frames to {out}", file=sys.stderr)


def _gt_model(ds):
    """Ground-truth cloud wrapped so it renders the exact trajectories, quantized
    like the stored frames."""
    import numpy as np

    from .render import render, to_uint8
    from .synth import cloud_at, ground_truth

    canonical, trajs, bg = ground_truth(ds)

    class _Gt:
        def render(self, cam, t):
            img = render(cloud_at(canonical, trajs, t), cam, background=bg).image
            return to_uint8(img).astype(np.float64) / 255.0

    return _Gt()


def cmd_eval(args):
    import csv

    from .scene import load_scene
    from .train import evaluate, load_model

    ds = load_scene(_file(args.scene))
    if args.ground_truth:
        model = _gt_model(ds)
    else:
        model = load_model(_file(args.checkpoint))
    rows = []
    splits = ["train", "test"] if args.split == "all" else [args.split]
    for s in splits:
        if ds.split(s):
            rows += [dict(r, split=s) for r in evaluate(model, ds, s)]
    fields = ["split", "view", "time_index", "t", "psnr", "ssim"]
    fh = open(args.out, "w", encoding="utf-8", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k in ("t", "psnr", "ssim") else r[k]) for k in fields})
    finally:
        if args.out:
            fh.close()
    for s in splits:
        vals = [r["psnr"] for r in rows if r["split"] == s]
        if vals:
            print(f"{s}: mean PSNR {sum(vals) / len(vals):.3f} dB over {len(vals)} frames", file=sys.stderr)


def cmd_bench(args):
    from . import _accel
    from .errors import InvalidParameterError
    from .scene import load_scene
    from .train import load_model

    if args.renders < 100:
        raise InvalidParameterError("bench needs at least 100 renders")
    ds = load_scene(_file(args.scene))
    model = load_model(_file(args.checkpoint))
    views = ds.split("train")
    model.render(views[0].camera, views[0].t)  # compile / warm caches
    t0 = time.perf_counter()
    for i in range(args.renders):
        v = views[i % len(views)]
        model.render(v.camera, v.t)
    wall = time.perf_counter() - t0
    rate = args.renders / wall
    _kv(
        renders=args.renders,
        gaussians=len(model.cloud),
        width=ds.width,
        height=ds.height,
        wall_s=f"{wall:.4f}",
        renders_per_s=f"{rate:.2f}",
        backend=_accel.backend(),
    )
    print(f"{rate:.1f} renders/s with {len(model.cloud)} Gaussians at {ds.width}x{ds.height}", file=sys.stderr)


def cmd_inspect_labels(args):
    import json

    from .render import render_labels, to_uint8
    from .scene import load_scene, write_ppm
    from .errors import InvalidParameterError
    from .train import load_model

    ds = load_scene(_file(args.scene))
    model = load_model(_file(args.checkpoint))
    match = [v for v in ds.views if v.view_index == args.view and v.time_index == args.time_index]
    if not match:
        raise InvalidParameterError(f"no frame {args.view}:{args.time_index} in scene")
    v = match[0]
    cloud = model.cloud_at(v.t)
    write_ppm(args.out, to_uint8(render_labels(cloud, v.camera)))
    if args.labels_json:
        with open(args.labels_json, "w", encoding="utf-8") as f:
            json.dump([int(x) for x in model.cloud.labels], f)
    n_dyn = int((model.cloud.labels == 1).sum())
    _kv(image=args.out, gaussians=len(model.cloud), dynamic=n_dyn, static=len(model.cloud) - n_dyn)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "train-decompose": cmd_train_decompose,
    "train-deform": cmd_train_deform,
    "render": cmd_render,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "inspect-labels": cmd_inspect_labels,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = _setup_threads(args)
    import logging

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    from . import _accel
    from .errors import DashError

    _accel.set_threads(threads)
    try:
        COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        return _err("file_not_found", exc.filename or exc)
    except DashError as exc:
        return _err(exc.code, exc)
    except (OSError, ValueError) as exc:
        return _err("invalid_input", exc)
    return EXIT_OK


def run(argv=None):
    """Console-script wrapper."""
    sys.exit(main(argv))


if __name__ == "__main__":
    run()
