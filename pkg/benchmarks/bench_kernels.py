#!/usr/bin/env python3
"""Time the numba kernels against their pure-numpy fallbacks.

Run: python benchmarks/bench_kernels.py [--repeats N]
Each row reports the per-call time of both paths and checks they agree.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from mitodet import kernels as K
from mitodet.augment import disk_offsets


def timeit(fn, repeats: int) -> float:
    fn()  # warmup / JIT compile
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def bench_mean_filter(rng, repeats):
    img = rng.integers(0, 256, (512, 512, 3), dtype=np.uint8)
    offsets = disk_offsets(3)
    padded = K._pad_image(img, 3, "reflect", 0)
    nb = lambda: K._mean_filter_nb(padded, offsets, 512, 512, 3)
    np_ = lambda: K._mean_filter_np(padded, offsets, 512, 512, 3)
    assert np.array_equal(np.asarray(nb()), np_())
    return "disk mean filter 512x512 r=3", timeit(nb, repeats), timeit(np_, repeats)


def bench_nms(rng, repeats):
    n = 2000
    xy = rng.uniform(0, 2000, (n, 2))
    boxes = np.hstack([xy, xy + rng.uniform(10, 60, (n, 2))])
    order = np.lexsort((np.arange(n), -rng.uniform(size=n)))
    sorted_boxes = np.ascontiguousarray(boxes[order])
    nb = lambda: K._nms_keep_nb(sorted_boxes, 0.4)
    np_ = lambda: K._nms_keep_np(sorted_boxes, 0.4)
    assert np.array_equal(np.asarray(nb()), np_())
    return "greedy NMS n=2000", timeit(nb, repeats), timeit(np_, repeats)


def bench_label(rng, repeats):
    mask = (rng.uniform(size=(512, 512)) < 0.3).astype(np.uint8)
    nb = lambda: K._label_components_nb(mask)
    np_ = lambda: K._label_components_np(mask)
    assert nb()[1] == np_()[1]
    return "component labeling 512x512", timeit(nb, repeats), timeit(np_, repeats)


def bench_lab(rng, repeats):
    img = rng.integers(0, 256, (512, 512, 3), dtype=np.uint8)
    nb = lambda: K._rgb_to_lab_nb(img, K._SRGB_TO_XYZ, K._WHITE, K._LAB_DELTA)
    np_ = lambda: K._rgb_to_lab_np(img)
    assert np.allclose(np.asarray(nb()), np_(), atol=1e-9)
    return "rgb->lab 512x512", timeit(nb, repeats), timeit(np_, repeats)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=10)
    args = parser.parse_args()
    if not K._HAVE_NUMBA:
        raise SystemExit("numba not importable; nothing to compare")

    rng = np.random.Generator(np.random.PCG64(0))
    rows = [
        bench_mean_filter(rng, args.repeats),
        bench_nms(rng, args.repeats),
        bench_label(rng, args.repeats),
        bench_lab(rng, args.repeats),
    ]
    print(f"{'kernel':<32} {'numba':>12} {'numpy':>12} {'speedup':>9}")
    for name, t_nb, t_np in rows:
        print(f"{name:<32} {t_nb * 1e3:>10.2f}ms {t_np * 1e3:>10.2f}ms {t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
