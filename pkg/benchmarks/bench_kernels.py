"""Compare the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best-of-N wall time for each backend and
the speedup. Exits non-zero if the two backends disagree.
"""
from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from diffgraph import _kernels_py, kernels


def _best(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_hash(repeat: int, compiled) -> tuple[float, float, bool]:
    words = [f"subject:forest{i}; attrs:rain,bloom{i % 7}".encode() for i in range(20_000)]
    py = _best(lambda: [_kernels_py.fnv1a64(w) for w in words], repeat)
    ext = _best(lambda: [compiled.fnv1a64(w) for w in words], repeat)
    same = all(_kernels_py.fnv1a64(w) == compiled.fnv1a64(w) for w in words[:2000])
    return py, ext, same


def bench_rewards(repeat: int, compiled) -> tuple[float, float, bool]:
    rng = np.random.default_rng(0)
    shares = rng.dirichlet(np.ones(6), size=10_000)
    proj = rng.standard_normal((6, 5, 4))
    target = rng.standard_normal((5, 4))
    py = _best(lambda: _kernels_py.batch_rewards(shares, proj, target, 1.0), repeat)
    ext = _best(lambda: compiled.batch_rewards(shares, proj, target, 1.0), repeat)
    diff = np.abs(_kernels_py.batch_rewards(shares, proj, target, 1.0)
                  - compiled.batch_rewards(shares, proj, target, 1.0)).max()
    return py, ext, bool(diff < 1e-12)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    compiled = kernels.compiled_module()
    if compiled is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`")
        return 1
    ok = True
    for name, fn in (("fnv1a64 x20000", bench_hash), ("batch_rewards G=10000", bench_rewards)):
        py, ext, same = fn(args.repeat, compiled)
        ok &= same
        print(f"{name:24s} python {py * 1e3:9.2f} ms  compiled {ext * 1e3:9.2f} ms  "
              f"speedup {py / ext:7.1f}x  agree={same}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
