"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per kernel and problem size with the median wall time of
each backend and the speed-up. Outputs are checked for agreement first.
"""
import argparse
import timeit

import numpy as np

from jointnerf.kernels import backends


def _composite_case(rng, rays, samples):
    ts = np.sort(rng.uniform(0.1, 4.0, (rays, samples)), axis=1)
    sigma = rng.uniform(0, 5, (rays, samples))
    rgb = rng.uniform(0, 1, (rays, samples, 3))
    g = rng.normal(size=(rays, 5))
    return sigma, rgb, ts, g


def _cloud_case(rng, n):
    a = rng.uniform(-1, 1, (n, 3)) + [0, 0, 2]
    b = a + rng.normal(0, 0.02, a.shape)
    return a, b


def _median(fn, repeat):
    return float(np.median(timeit.repeat(fn, number=1, repeat=repeat)))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=7)
    args = ap.parse_args(argv)
    impls = backends()
    if "cython" not in impls:
        print("compiled extension not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    cap = 3.9 / 128
    print(f"{'kernel':<22}{'size':>14}" + "".join(f"{k:>12}" for k in impls) + f"{'speedup':>10}")

    for rays, samples in [(128, 32), (1024, 128)]:
        sigma, rgb, ts, g = _composite_case(rng, rays, samples)
        outs = {k: m.composite_forward(sigma, rgb, ts, cap) for k, m in impls.items()}
        ref = outs["python"]
        for k, o in outs.items():
            assert np.allclose(o[0], ref[0], atol=1e-10), k
        fwd = {k: _median(lambda m=m: m.composite_forward(sigma, rgb, ts, cap), args.repeat)
               for k, m in impls.items()}
        w, tr = ref[1], ref[2]
        bwd = {k: _median(lambda m=m: m.composite_backward(g, sigma, rgb, ts, cap, w, tr),
                          args.repeat) for k, m in impls.items()}
        for name, times in (("composite_forward", fwd), ("composite_backward", bwd)):
            _row(name, f"{rays}x{samples}", times)

    for n in (576, 2304):
        a, b = _cloud_case(rng, n)
        res = {k: m.nearest_neighbors(a, b) for k, m in impls.items()}
        for k, (_, d2) in res.items():
            assert np.allclose(d2, res["python"][1], atol=1e-12), k
        times = {k: _median(lambda m=m: m.nearest_neighbors(a, b), args.repeat)
                 for k, m in impls.items()}
        _row("nearest_neighbors", f"{n} pts", times)


def _row(name, size, times):
    cells = "".join(f"{t * 1e3:>10.3f}ms" for t in times.values())
    sp = times["python"] / times["cython"] if "cython" in times else float("nan")
    print(f"{name:<22}{size:>14}{cells}{sp:>9.1f}x")


if __name__ == "__main__":
    main()
