"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each row reports the best wall time of ``--repeat`` runs after one warm-up
call (which also absorbs numba's compile time), plus the speed-up.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from invoxel import _accel
from invoxel import diffcore as dc
from invoxel.diffcore import Tensor
from invoxel.rendering import render_weights
from invoxel.scenedata import ToyScene, camera_rays, focal_from_fov, render_oracle, toy_cameras
from invoxel.voxelgrid import GridSpec, dda_batch


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases(rng):
    grid = GridSpec(32, 4.0, (-2.0, -2.0, -2.0))
    n = 20000
    o = rng.uniform(-3, 3, (n, 3))
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    yield ("dda traversal, 20k rays, 32^3",
           lambda flag: dda_batch(o, d, np.zeros(n), np.full(n, 8.0), grid, use_numba=flag))

    sigma = Tensor(rng.uniform(0, 3, (4096, 192)), requires_grad=True)
    delta = rng.uniform(0.005, 0.05, (4096, 192))

    def weights(flag):
        w, _ = render_weights(sigma, delta, use_numba=flag)
        dc.backward(dc.sum(w))
        sigma.grad = None
    yield "render weights fwd+bwd, 4096 x 192", weights

    scene = ToyScene(H=32, W=32)
    poses, _ = toy_cameras(scene)
    ro, rd = camera_rays(32, 32, focal_from_fov(32, scene.camera_angle_x), poses[0])
    yield ("toy quadrature, 1024 rays x 1024 steps",
           lambda flag: render_oracle(scene, ro, rd, steps=1024, use_numba=flag))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not importable; nothing to compare")
    print(f"{'kernel':<42}{'numba':>10}{'numpy':>10}{'speed-up':>10}")
    for name, fn in cases(np.random.default_rng(args.seed)):
        a = best_of(lambda: fn(True), args.repeat)
        b = best_of(lambda: fn(False), args.repeat)
        print(f"{name:<42}{a * 1e3:>8.1f}ms{b * 1e3:>8.1f}ms{b / a:>9.1f}x")


if __name__ == "__main__":
    main()
