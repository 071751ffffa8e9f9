"""Time the all-pairs hop-count kernel: numba against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--sizes 50,200,500] [--repeat 5]
"""

import argparse
import random
import timeit

import numpy as np

from pvh import _kernels
from pvh._kernels import hop_matrix, to_csr


def random_graph(n, seed, extra=0.5):
    rng = random.Random(f"bench:{n}:{seed}")
    edges = [(i, rng.randrange(i)) for i in range(1, n)]
    edges += [tuple(rng.sample(range(n), 2)) for _ in range(int(extra * n))]
    return to_csr(n, edges)


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--sizes", default="50,200,500")
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args()
    if not _kernels.HAS_NUMBA:
        print("numba unavailable or disabled; timing the numpy path only")
    print(f"{'n':>6} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    for n in (int(s) for s in args.sizes.split(",")):
        indptr, indices = random_graph(n, 0)
        ref = hop_matrix(indptr, indices, n, use_numba=False)
        t_np = min(timeit.repeat(lambda: hop_matrix(indptr, indices, n, use_numba=False),
                                 number=1, repeat=args.repeat))
        if _kernels.HAS_NUMBA:
            assert np.array_equal(hop_matrix(indptr, indices, n, use_numba=True), ref)  # also warms the JIT
            t_nb = min(timeit.repeat(lambda: hop_matrix(indptr, indices, n, use_numba=True),
                                     number=1, repeat=args.repeat))
            print(f"{n:>6} {t_np * 1e3:>10.2f} {t_nb * 1e3:>10.2f} {t_np / t_nb:>7.1f}x")
        else:
            print(f"{n:>6} {t_np * 1e3:>10.2f} {'-':>10} {'-':>8}")


if __name__ == "__main__":
    main()
