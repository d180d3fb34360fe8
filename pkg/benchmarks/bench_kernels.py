"""Time the compiled resampling kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--batch 256] [--size 28] [--repeat 5]
"""

import argparse
import math
import timeit

import numpy as np

from tarc._ext import resample_py

try:
    from tarc._ext import resample as compiled
except ImportError:
    compiled = None


def workload(batch, size, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.uniform(size=(batch, size, size))
    area = rng.uniform(0.6, 1.0, batch) * size * size
    ratio = np.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3), batch))
    w = np.minimum(np.sqrt(area * ratio), size)
    h = np.minimum(np.sqrt(area / ratio), size)
    boxes = np.ascontiguousarray(np.column_stack([rng.uniform(size=batch) * (size - h),
                                                  rng.uniform(size=batch) * (size - w), h, w]))
    flips = (rng.uniform(size=batch) < 0.5).astype(np.uint8)
    angles = rng.uniform(0.0, math.pi, batch)
    return images, boxes, flips, angles


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--batch", type=int, default=256)
    ap.add_argument("--size", type=int, default=28)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if compiled is None:
        raise SystemExit("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")

    images, boxes, flips, angles = workload(args.batch, args.size)
    H = args.size
    cases = {
        "crop_resize": lambda m: m.crop_resize(images, boxes, flips, H, H),
        "rotate": lambda m: m.rotate(images, angles),
    }
    print(f"batch={args.batch} image={H}x{H} best of {args.repeat}")
    print(f"{'kernel':<12} {'numpy ms':>10} {'compiled ms':>12} {'speedup':>8} {'max |diff|':>11}")
    for name, call in cases.items():
        t_py = min(timeit.repeat(lambda: call(resample_py), number=1, repeat=args.repeat))
        t_c = min(timeit.repeat(lambda: call(compiled), number=1, repeat=args.repeat))
        diff = float(np.abs(call(compiled) - call(resample_py)).max())
        print(f"{name:<12} {1e3 * t_py:>10.2f} {1e3 * t_c:>12.2f} {t_py / t_c:>7.1f}x {diff:>11.1e}")


if __name__ == "__main__":
    main()
