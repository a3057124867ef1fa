"""Compare the compiled and pure-Python metric kernels.

    python3 benchmarks/bench_kernels.py [--pairs 2000] [--len 20]
"""

import argparse
import random
import timeit

from densecap_kit import _kernels_py

try:
    from densecap_kit import _kernels as _kernels_c
except ImportError:
    _kernels_c = None


def make_pairs(n, length, vocab, seed):
    r = random.Random(seed)
    seq = lambda: [r.randrange(vocab) for _ in range(r.randint(length // 2, length))]  # noqa: E731
    return [(seq(), seq()) for _ in range(n)]


def run(mod, pairs):
    for a, b in pairs:
        mod.lcs_length(a, b)
        mod.meteor_align(a, b, a, b)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--pairs", type=int, default=2000)
    ap.add_argument("--len", type=int, default=20, help="max tokens per sentence")
    ap.add_argument("--vocab", type=int, default=30)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    pairs = make_pairs(args.pairs, args.len, args.vocab, 0)
    backends = [("python", _kernels_py)]
    if _kernels_c is None:
        print("compiled extension not built; reporting the pure-Python backend only")
    else:
        backends.append(("cython", _kernels_c))
        for a, b in pairs[:200]:
            assert _kernels_c.lcs_length(a, b) == _kernels_py.lcs_length(a, b)
            assert _kernels_c.meteor_align(a, b, a, b) == _kernels_py.meteor_align(a, b, a, b)
    best = {}
    for name, mod in backends:
        best[name] = min(timeit.repeat(lambda: run(mod, pairs), number=1, repeat=args.repeat))
        print(f"{name:7s} {best[name] * 1e3:9.1f} ms  ({args.pairs} pairs, len<={args.len})")
    if len(best) == 2:
        print(f"speedup {best['python'] / best['cython']:.1f}x")


if __name__ == "__main__":
    main()
