"""Compare the numba and numpy kernel flavours on orbit-64-sized workloads.

    python benchmarks/bench_kernels.py [--repeats N]

Prints one CSV row per (kernel, backend) with the median wall time in ms.
"""

import argparse
import statistics
import time

import numpy as np

from dashgs import kernels
from dashgs.hashgrid import HashGridConfig, HashGridEncoder
from dashgs.render import project_arrays
from dashgs.scene import sigmoid
from dashgs.synth import generate_scene, ground_truth, preset


def timed(fn, repeats):
    fn()  # warm-up (numba compiles here)
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return 1e3 * statistics.median(out)


def raster_inputs():
    ds = generate_scene(preset("orbit-64"), seed=0)
    cloud, _, bg = ground_truth(ds)
    cam = ds.split("train")[0].camera
    proj = project_arrays(cloud.positions, cloud.log_scales, cloud.rotations, cam)
    vis = np.flatnonzero(proj.visible)
    order = vis[np.argsort(proj.depths[vis], kind="stable")]
    args = (
        np.ascontiguousarray(proj.means2d[order]),
        np.ascontiguousarray(proj.conics[order]),
        np.ascontiguousarray(sigmoid(cloud.opacity_logits)[order]),
        np.ascontiguousarray(sigmoid(cloud.color_logits)[order]),
        np.ascontiguousarray(proj.bounds[order]),
        bg,
    )
    return args, cam.height, cam.width


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--points", type=int, default=500)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    enc = HashGridEncoder(HashGridConfig.stage2_default(), rng=rng)
    pts = rng.uniform(0, 1, size=(args.points, 4))
    up = rng.normal(size=(args.points, enc.cfg.output_width))
    r_args, h, w = raster_inputs()
    img, trans, stop = kernels.NUMBA["rasterize_forward"](*r_args, h, w)
    g_img = rng.normal(size=img.shape)

    print("kernel,backend,median_ms")
    for name, table in (("numba", kernels.NUMBA), ("numpy", kernels.NUMPY)):
        out = np.empty((len(pts), enc.cfg.output_width))
        cases = {
            "encode_forward": lambda: table["encode_forward"](pts, enc.tables, enc.resolutions, enc.primes, out),
            "encode_backward": lambda: table["encode_backward"](
                pts, enc.tables, enc.resolutions, enc.primes, up, np.zeros_like(enc.tables), np.empty_like(pts)
            ),
            "rasterize_forward": lambda: table["rasterize_forward"](*r_args, h, w),
            "rasterize_backward": lambda: table["rasterize_backward"](*r_args, trans, stop, g_img),
        }
        for kernel, fn in cases.items():
            print(f"{kernel},{name},{timed(fn, args.repeats):.3f}")


if __name__ == "__main__":
    main()
