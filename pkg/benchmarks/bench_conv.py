"""Time the compiled convolution kernels against the numpy fallback.

Runs forward and both adjoints on a few representative workloads,
cross-checks that the two implementations agree before timing, and
prints median wall times with the speedup.  Use ``--csv`` for a
machine-readable copy.

    python benchmarks/bench_conv.py --repeats 7
"""

import argparse
import csv
import statistics
import sys
import time

import numpy as np

from trnet._kernels import conv_np

try:
    from trnet._kernels import _conv_cy
except ImportError:
    _conv_cy = None

# (name, batch, height, width, cin, cout, filter, stride, pad)
# The bond-* rows mirror the factored conv layers' spatial step, where
# the channel count is a bond rank and the batch carries a folded bond.
WORKLOADS = [
    ("tiny", 8, 12, 12, 4, 8, 3, 1, 1),
    ("bond-r3", 96, 14, 14, 3, 3, 3, 1, 1),
    ("bond-r10", 320, 14, 14, 10, 10, 3, 1, 1),
    ("bond-r15", 750, 14, 14, 15, 15, 3, 1, 1),
    ("digits-conv1", 32, 28, 28, 1, 20, 5, 1, 0),
    ("digits-conv2", 32, 12, 12, 20, 50, 5, 1, 0),
    ("wide-channels", 16, 16, 16, 64, 64, 3, 1, 1),
    ("strided", 16, 32, 32, 16, 32, 3, 2, 1),
]


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _cases(name, b, h, w, cin, cout, d, stride, pad, rng):
    x = rng.standard_normal((b, h, w, cin))
    k = rng.standard_normal((d, d, cin, cout))
    ho = conv_np.out_size(h, d, stride, pad)
    wo = conv_np.out_size(w, d, stride, pad)
    gy = rng.standard_normal((b, ho, wo, cout))
    return [
        (f"{name}/fwd", lambda impl: impl.conv2d_fwd(x, k, stride, pad)),
        (f"{name}/bwd_x", lambda impl: impl.conv2d_bwd_x(gy, k, stride, pad, h, w)),
        (f"{name}/bwd_k", lambda impl: impl.conv2d_bwd_k(x, gy, stride, pad, d)),
    ]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5,
                        help="timing repeats per case; the median is reported")
    parser.add_argument("--csv", help="also write results to this CSV file")
    args = parser.parse_args(argv)

    if _conv_cy is None:
        print("compiled extension not available; nothing to compare "
              "(build it, then rerun)", file=sys.stderr)
        return 1

    rng = np.random.default_rng(0)
    rows = []
    print(f"{'case':24} {'numpy (ms)':>12} {'cython (ms)':>12} {'speedup':>9}")
    for workload in WORKLOADS:
        for case, run in _cases(*workload, rng):
            ref = run(conv_np)
            got = run(_conv_cy)
            # summation order differs between the backends, so long
            # reductions legitimately drift by ~n*eps of the result scale
            scale = max(1.0, float(np.max(np.abs(ref))))
            if float(np.max(np.abs(got - ref))) > 1e-9 * scale:
                print(f"{case}: implementations disagree", file=sys.stderr)
                return 1
            t_np = _median_time(lambda: run(conv_np), args.repeats)
            t_cy = _median_time(lambda: run(_conv_cy), args.repeats)
            rows.append((case, t_np * 1e3, t_cy * 1e3, t_np / t_cy))
            print(f"{case:24} {rows[-1][1]:12.3f} {rows[-1][2]:12.3f} "
                  f"{rows[-1][3]:8.2f}x")

    geo = float(np.exp(np.mean(np.log([r[3] for r in rows]))))
    print(f"{'geometric mean':24} {'':12} {'':12} {geo:8.2f}x")

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case", "numpy_ms", "cython_ms", "speedup"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
