"""Compare the compiled and numpy kernel backends on training-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 50]

Prints the median wall time per call for each kernel and backend, plus the
maximum absolute disagreement between backends.
"""
import argparse
import time

import numpy as np

from imageome.numerics import _pykernels, backend


def median_time(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return float(np.median(times))


def cases(rng):
    x = rng.normal(size=(32, 8, 8, 4))
    w = rng.normal(size=(3, 3, 4, 4))
    gy = rng.normal(size=(32, 8, 8, 4))
    z = rng.normal(size=(32 * 28, 8))
    codes = rng.normal(size=(64, 8))
    return {
        "conv2d_forward": lambda k: k.conv2d_forward(x, w),
        "conv2d_backward": lambda k: k.conv2d_backward(x, w, gy),
        "nearest_codes": lambda k: k.nearest_codes(z, codes),
    }


def _flat(result):
    if isinstance(result, tuple):
        return [np.asarray(r, dtype=np.float64) for r in result]
    return [np.asarray(result, dtype=np.float64)]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    compiled = "cython" in backend.available()
    if not compiled:
        print("compiled backend not built; timing the numpy backend only")
        from imageome.numerics import _pykernels as ck  # noqa: F401
    else:
        from imageome.numerics import _ckernels as ck
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<18}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}{'max |diff|':>12}")
    for name, call in cases(rng).items():
        t_py = median_time(lambda: call(_pykernels), args.repeat)
        if compiled:
            t_c = median_time(lambda: call(ck), args.repeat)
            diff = max(float(np.abs(a - b).max()) for a, b in zip(_flat(call(_pykernels)), _flat(call(ck))))
            print(f"{name:<18}{t_py * 1e3:>10.3f}{t_c * 1e3:>11.3f}{t_py / t_c:>8.2f}x{diff:>12.2e}")
        else:
            print(f"{name:<18}{t_py * 1e3:>10.3f}{'-':>11}{'-':>9}{'-':>12}")


if __name__ == "__main__":
    main()
