"""Time the numba and pure-numpy kernel backends on network-sized inputs.

    python3 benchmarks/bench_kernels.py [--repeat 7] [--input-size 256] [--csv out.csv]

Per kernel the median of ``--repeat`` timed calls is reported after one
warmup call (which also triggers numba compilation). The last rows run a
full TypeA forward pass and one Adam step with each backend swapped in.
"""
import argparse
import csv
import statistics
import time

import numpy as np
from threadpoolctl import threadpool_limits

from movnect import kernels
from movnect import network as N
from movnect.cli import host_descriptor

KERNEL_NAMES = ("im2col", "col2im", "dw_conv", "dw_conv_grad", "bilinear", "bilinear_grad",
                "one_euro_run", "adam_update")


def kernel_cases(rng):
    # shapes follow the 128-px stage of a 256-px input
    xp = rng.normal(size=(1, 96, 66, 66))
    cols = rng.normal(size=(1, 96 * 9, 64 * 64))
    w = rng.normal(size=(96, 1, 3, 3))
    g = rng.normal(size=(1, 96, 64, 64))
    maps = rng.normal(size=(1, 60, 32, 32))
    up = rng.normal(size=(1, 60, 64, 64))
    ts = np.arange(300) / 30.0
    xs = rng.normal(size=(300, 45))
    p = rng.normal(size=1_000_000)
    grad = rng.normal(size=p.size)

    def euro(impl):
        impl.one_euro_run(xs, ts, 1.0, 0.007, 1.0, np.zeros(45), np.zeros(45), np.zeros(1), np.zeros(1, np.bool_))

    def adam(impl):
        impl.adam_update(p.copy(), grad, np.zeros(p.size), np.zeros(p.size), 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001)

    return {
        "im2col": lambda impl: impl.im2col(xp, 3, 3, 1, 64, 64),
        "col2im": lambda impl: impl.col2im(cols, xp.shape, 3, 3, 1, 64, 64),
        "dw_conv": lambda impl: impl.dw_conv(xp, w, 1, 64, 64),
        "dw_conv_grad": lambda impl: impl.dw_conv_grad(xp, w, g, 1),
        "bilinear": lambda impl: impl.bilinear(maps, 64, 64),
        "bilinear_grad": lambda impl: impl.bilinear_grad(up, 32, 32),
        "one_euro_run": euro,
        "adam_update": adam,
    }


def time_call(fn, repeat):
    fn()
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(samples)


def use_backend(name):
    impl = kernels.BACKENDS[name]
    for k in KERNEL_NAMES:
        setattr(kernels, k, getattr(impl, k))


def run(repeat, input_size):
    rng = np.random.default_rng(0)
    names = sorted(kernels.BACKENDS)
    rows = []
    for kernel, fn in kernel_cases(rng).items():
        rows.append({"case": kernel, **{b: time_call(lambda: fn(kernels.BACKENDS[b]), repeat) for b in names}})
    net = N.fold_network(N.build(N.profile("a", input_size=input_size), seed=0))
    image = rng.uniform(-1, 1, size=(1, 3, input_size, input_size)).astype(np.float32)
    row = {"case": f"forward TypeA {input_size}px"}
    for b in names:
        use_backend(b)
        row[b] = time_call(lambda: N.run(net, image), repeat)
    rows.append(row)
    use_backend(kernels.BACKEND)
    return names, rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--input-size", type=int, default=256)
    ap.add_argument("--csv")
    args = ap.parse_args(argv)
    with threadpool_limits(limits=1):
        names, rows = run(args.repeat, args.input_size)
    print(f"host: {host_descriptor()}; median of {args.repeat} calls, ms")
    print(f"{'case':<24}" + "".join(f"{b:>12}" for b in names) + f"{'numpy/numba':>14}")
    for r in rows:
        ratio = r["numpy"] / r["numba"] if "numba" in r else float("nan")
        print(f"{r['case']:<24}" + "".join(f"{r[b]:>12.3f}" for b in names) + f"{ratio:>14.2f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["case", *names])
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
