"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--nodes 150] [--repeat 5]

Prints one line per kernel: best wall time of each backend and the speedup.
Both backends are checked for agreement before timing.
"""
import argparse
import timeit

import numpy as np

from kgraphctl import kernels
from kgraphctl.graph import generate_erdos_renyi


def cases(n, samples, dim, steps, rng):
    g = generate_erdos_renyi(n, min(1.0, 8.0 / n), 0)
    feats = rng.normal(size=(samples, n, dim))
    w = kernels.gibbs_weights(feats, g.indptr, g.indices, kernels.GAUSSIAN, 1.0, backend="python")
    blocks = rng.normal(size=(g.nnz, dim, dim))
    x = rng.normal(size=(samples, n, dim))
    rope_n = 6
    pos0 = np.stack([np.zeros(rope_n), -0.12 * np.arange(rope_n)], axis=1)
    gen = np.zeros(n, dtype=bool)
    gen[: n // 3] = True
    return {
        "gibbs_weights": lambda b: kernels.gibbs_weights(feats, g.indptr, g.indices,
                                                         kernels.GAUSSIAN, 1.0, backend=b),
        "aggregate": lambda b: kernels.aggregate(feats, g.indptr, g.indices, w, backend=b),
        "block_matvec": lambda b: kernels.block_matvec(blocks, g.indptr, g.indices, x, backend=b),
        "block_rmatvec": lambda b: kernels.block_rmatvec(blocks, g.indptr, g.indices, x, n,
                                                         backend=b),
        "rope_rollout": lambda b: kernels.rope_rollout(pos0, np.zeros((rope_n, 2)),
                                                       np.zeros(steps), 1.0, 500.0, 0.1, 0.5,
                                                       9.81, 0.01, backend=b),
        "grid_rollout": lambda b: kernels.grid_rollout(np.ones(n), np.zeros(n), g.indptr,
                                                       g.indices, np.zeros((steps, n)),
                                                       np.zeros((steps, n)), gen, 1.0, 2.0, 0.5,
                                                       1.0, 0.05, backend=b),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--nodes", type=int, default=150)
    ap.add_argument("--samples", type=int, default=200)
    ap.add_argument("--dim", type=int, default=8)
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built (or KGRAPHCTL_PURE_PYTHON=1); timing python only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<15}" + "".join(f"{b + ' [ms]':>16}" for b in backends) + f"{'speedup':>10}")
    for name, fn in cases(args.nodes, args.samples, args.dim, args.steps, rng).items():
        outs = [fn(b) for b in backends]
        for other in outs[1:]:
            np.testing.assert_allclose(other, outs[0], rtol=1e-9, atol=1e-12)
        times = [min(timeit.repeat(lambda b=b: fn(b), number=1, repeat=args.repeat)) * 1e3
                 for b in backends]
        speed = f"{times[0] / times[-1]:>9.1f}x" if len(times) > 1 else ""
        print(f"{name:<15}" + "".join(f"{t:>16.3f}" for t in times) + speed)


if __name__ == "__main__":
    main()
