"""Compare the compiled and numpy kernel backends on catalog-sized inputs.

    python benchmarks/bench_kernels.py [--repeat 20]

Each row checks the two backends agree before timing them.
"""

import argparse
import timeit

import numpy as np

from vidrec._kernels import compiled, fallback


def cases(rng):
    n, d = 10_000, 64
    matrix = rng.standard_normal((n, d))
    ids = np.arange(n, dtype=np.int64)
    query = rng.standard_normal(d)
    mask = (rng.random(n) > 0.1).astype(np.uint8)
    yield "topk_dot n=10k d=64 k=10", (matrix, ids, query, 10, mask), "topk_dot"
    yield "topk_dot n=10k d=64 k=100", (matrix, ids, query, 100, mask), "topk_dot"

    lengths = rng.integers(2, 11, 5_000)
    offsets = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    gains = (rng.random(offsets[-1]) < 0.3) * rng.uniform(1, 10, offsets[-1])
    yield "segment_ndcg 5k feeds", (gains, offsets), "segment_ndcg"

    scores = np.round(rng.standard_normal(100_000), 2)
    labels = (rng.random(100_000) < 0.2).astype(np.uint8)
    yield "auc n=100k with ties", (scores, labels), "auc"

    embs = rng.standard_normal((50, d))
    ages = rng.uniform(0, 30 * 86_400_000, 50)
    yield "decay_pool 50 events", (embs, ages, np.log(2) / (7 * 86_400_000)), "decay_pool"


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12, equal_nan=True)


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    if compiled is None:
        raise SystemExit("compiled backend not built; run `pip install -e . --no-build-isolation`")
    rng = np.random.default_rng(0)
    print(f"{'kernel':30s} {'cython ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, argv, fn in cases(rng):
        fc, fp = getattr(compiled, fn), getattr(fallback, fn)
        if not same(fc(*argv), fp(*argv)):
            raise SystemExit(f"{name}: backends disagree")
        tc = min(timeit.repeat(lambda: fc(*argv), number=args.repeat, repeat=3)) / args.repeat * 1e3
        tp = min(timeit.repeat(lambda: fp(*argv), number=args.repeat, repeat=3)) / args.repeat * 1e3
        print(f"{name:30s} {tc:10.3f} {tp:10.3f} {tp / tc:7.1f}x")


if __name__ == "__main__":
    main()
