"""Time the Cython kernels against the NumPy fallback.

Run with ``python3 benchmarks/bench_kernels.py``. Each kernel is timed on
both backends with identical inputs, and the outputs are checked to agree.
"""
import argparse
import timeit

import numpy as np

from calens import kernels


def _cases(rows, cells, k):
    rng = np.random.default_rng(0)
    scores = rng.normal(0.0, 3.0, size=(rows, 10))
    mass = rng.dirichlet(np.ones(cells))
    cond = rng.dirichlet(np.ones(k), size=cells)
    return {
        f"mean_max_softmax ({rows}x10)": lambda: kernels.mean_max_softmax(scores, 0.7),
        f"combiner_errors ({k}^{cells} combiners)": lambda: kernels.combiner_errors(mass, cond),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", type=int, default=200_000)
    p.add_argument("--cells", type=int, default=12)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the python backend is available")
    previous = kernels.current_backend()
    cases = _cases(args.rows, args.cells, args.classes)
    print(f"{'kernel':<40}" + "".join(f"{b:>12}" for b in backends) + f"{'speedup':>10}")
    try:
        for name, fn in cases.items():
            times, outputs = {}, {}
            for b in backends:
                kernels.use_backend(b)
                outputs[b] = fn()
                times[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
            ref = outputs[backends[0]]
            for b in backends[1:]:
                np.testing.assert_allclose(outputs[b], ref, rtol=1e-12, atol=1e-15)
            speed = times["python"] / times["cython"] if "cython" in times else float("nan")
            print(f"{name:<40}" + "".join(f"{times[b] * 1e3:>10.2f}ms" for b in backends) + f"{speed:>9.1f}x")
    finally:
        kernels.use_backend(previous)


if __name__ == "__main__":
    main()
