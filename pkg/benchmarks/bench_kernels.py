"""Benchmark the compiled ray-cast kernels against the numpy fallback.

Run:  python benchmarks/bench_kernels.py [--res 64] [--repeats 20]
"""

import argparse
import time

import numpy as np

from latentview import camgeo, kernels, scenes
from latentview.camgeo import Intrinsics


def timeit(fn, repeats):
    fn()  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--res", type=int, default=64)
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    g = scenes.gen_scene(args.seed)
    intr = Intrinsics.default(args.res)
    pose = camgeo.look_at(g.center + np.array([0.2, 0.1, -0.3]), g.center)
    origins, dirs = camgeo.world_ray_grid(intr, pose)
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)

    pts = scenes.surface_points(g, 4096, seed=1)
    cam = pose.translation
    rel = pts - cam
    vis_d = rel / np.linalg.norm(rel, axis=1, keepdims=True)
    vis_o = np.broadcast_to(cam, vis_d.shape)

    backends = ["python"]
    if kernels.backend() == "compiled":
        backends.append("compiled")
    else:
        print("compiled kernels not built; benchmarking the fallback only")

    rows = []
    for name in backends:
        t_render = timeit(lambda: kernels.render_with(name, o, d, g), args.repeats)
        if name == "python":
            from latentview.kernels import pykernels as impl
        else:
            from latentview.kernels import _ckernels as impl
        t_vis = timeit(lambda: impl.trace_depth(
            np.ascontiguousarray(vis_o), np.ascontiguousarray(vis_d),
            g.room_lo, g.room_hi, g.boxes, g.spheres), args.repeats)
        rows.append((name, t_render, t_vis))

    print(f"\nres {args.res}x{args.res}, {len(g.boxes)} boxes, {len(g.spheres)} spheres, "
          f"{args.repeats} repeats")
    print(f"{'backend':<10} {'render/frame':>14} {'visibility/4096rays':>20}")
    for name, tr, tv in rows:
        print(f"{name:<10} {tr * 1e3:>11.3f} ms {tv * 1e3:>17.3f} ms")
    if len(rows) == 2:
        print(f"{'speedup':<10} {rows[0][1] / rows[1][1]:>13.1f}x {rows[0][2] / rows[1][2]:>18.1f}x")
        c_py, _ = kernels.render_with("python", o, d, g)
        c_cy, _ = kernels.render_with("compiled", o, d, g)
        print("bit-identical outputs:", np.array_equal(c_py, c_cy))


if __name__ == "__main__":
    main()
