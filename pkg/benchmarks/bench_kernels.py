"""Time the numba and numpy paths of the point kernels on one synthetic scan.

Usage: ``python3 benchmarks/bench_kernels.py [--beams 64] [--columns 2048] [--repeat 5]``

Both implementations are called directly, so one process measures both
regardless of ``COARSE3D_NUMBA``. Outputs are compared before timing.
"""

import argparse
import time

import numpy as np

from coarse3d import kernels
from coarse3d.pointcloud_io import ProjectionConfig, _point_pixels, pixel_labels, spherical_project
from coarse3d.synthetic import SceneSpec, generate_scene


def best_of(fn, args, repeat):
    out = fn(*args)  # warm-up, includes numba compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return out, min(times)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--beams", type=int, default=64)
    p.add_argument("--columns", type=int, default=2048)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()

    cloud, dense = generate_scene(SceneSpec(seed=0, beams=args.beams, columns=args.columns))
    pcfg = ProjectionConfig(64, 2048)
    rows, cols, rng = _point_pixels(cloud.coords, pcfg)
    flat = np.where(rows >= 0, rows * pcfg.width + cols, -1)
    image = spherical_project(cloud, pcfg)
    pix_label = pixel_labels(image, dense)
    pix_range = np.where(image.valid, image.range, np.inf)
    inside = rows >= 0
    n_classes = int(dense.max()) + 1
    noisy = np.where(np.random.default_rng(0).random(dense.size) < 0.1, 0, dense)

    cases = {
        "zbuffer": ((flat, rng, pcfg.height * pcfg.width), kernels.zbuffer_numba, kernels.zbuffer_numpy),
        "knn_vote": (
            (rows[inside], cols[inside], rng[inside], pix_range, pix_label, 5, 5, n_classes),
            kernels.knn_vote_numba,
            kernels.knn_vote_numpy,
        ),
        "confusion": ((dense, noisy, n_classes), kernels.confusion_numba, kernels.confusion_numpy),
    }
    print(f"{len(cloud)} points, {pcfg.height}x{pcfg.width} image, best of {args.repeat}")
    print(f"{'kernel':<10} {'numba ms':>10} {'numpy ms':>10} {'speed-up':>9}  equal")
    for name, (kargs, fast, ref) in cases.items():
        a, t_fast = best_of(fast, kargs, args.repeat)
        b, t_ref = best_of(ref, kargs, args.repeat)
        print(f"{name:<10} {1e3 * t_fast:10.2f} {1e3 * t_ref:10.2f} {t_ref / t_fast:8.1f}x  {np.array_equal(a, b)}")


if __name__ == "__main__":
    main()
